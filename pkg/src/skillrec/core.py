"""Domain types, validation and the on-disk dataset format.

A dataset directory holds four plain-text files:

``jds.jsonl``
    one job description per line: ``jd_id``, ``title_id``, ``raw_items``
    and ``items`` (a list of token-id lists).
``users.jsonl``
    one profile per line: ``user_id``, ``jd_id`` (the paired job), ``skills``
    (the skill distribution) and ``aux_info`` with ``position_name_id`` and
    ``position_level``.
``clicks.jsonl``
    one click record per line: ``user_id``, ``jd_id``, ``label``.
``vocab.txt``
    ``token<TAB>id`` per line.

Every JSON record in ``users.jsonl`` together with the JD it names forms a
:class:`PersonJobRecord`.  JDs without a paired user are still part of the
recall pool.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetParseError, DomainError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
DEFAULT_MAX_ITEMS = 40
DIST_TOL = 1e-6

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenizedItem:
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if not self.token_ids:
            raise DomainError("an item needs at least one token")

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class JobDescription:
    jd_id: str
    title_id: int
    items: tuple[TokenizedItem, ...]
    raw_items: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "raw_items", tuple(self.raw_items))
        if not self.items:
            raise DomainError(f"JD {self.jd_id!r} has no items")


@dataclass(frozen=True)
class SkillDistribution:
    """A probability vector over the global skill vocabulary."""

    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in np.asarray(self.probs, dtype=np.float64).ravel())
        object.__setattr__(self, "probs", probs)
        problem = distribution_problem(probs)
        if problem:
            raise DomainError(problem)

    @classmethod
    def unchecked(cls, probs) -> "SkillDistribution":
        """Wrap ``probs`` without validation (used when loading data for auditing)."""
        dist = object.__new__(cls)
        object.__setattr__(dist, "probs", tuple(float(p) for p in probs))
        return dist

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def __len__(self):
        return len(self.probs)


def distribution_problem(probs: Sequence[float], tol: float = DIST_TOL) -> str | None:
    """Return a description of why ``probs`` is not a distribution, or None."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        return "distribution must be a non-empty vector"
    if not np.all(np.isfinite(arr)):
        return "distribution has non-finite entries"
    if arr.min() < 0.0 or arr.max() > 1.0:
        return "distribution entries must lie in [0, 1]"
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        return f"distribution sums to {total:.9g}, not 1"
    return None


@dataclass(frozen=True)
class AuxUserInfo:
    position_name_id: int
    position_level: int


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    skills: SkillDistribution
    aux_info: AuxUserInfo


@dataclass(frozen=True)
class ClickRecord:
    user_id: str
    jd_id: str
    label: int


@dataclass(frozen=True)
class JDTuple:
    central: JobDescription
    neighbors: tuple[JobDescription, ...]

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        ids = [self.central.jd_id] + [n.jd_id for n in self.neighbors]
        if len(set(ids)) != len(ids):
            raise DomainError(f"tuple members must be distinct JDs, got {ids}")

    @property
    def members(self) -> tuple[JobDescription, ...]:
        return (self.central,) + self.neighbors


@dataclass(frozen=True)
class PersonJobRecord:
    jd: JobDescription
    profile: UserProfile


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


class Vocabulary:
    """Token <-> id map with id 0 reserved for padding and id 1 for unknown."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._ids: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts: Counter[str] = Counter()
        order: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] += 1
                order.setdefault(tok, len(order))
        # first-seen order keeps ids stable for a given corpus
        return cls([t for t in order if counts[t] >= min_freq])

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self.tokens)
            self.tokens.append(token)
        return self._ids[token]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokenize(text)]

    def save(self, path) -> None:
        lines = "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.tokens))
        atomic_write_text(path, lines)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab.tokens, vocab._ids = [], {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[1].isdigit():
                    raise DatasetParseError(path, lineno, "expected 'token<TAB>id'")
                tok, idx = parts[0], int(parts[1])
                if idx != len(vocab.tokens):
                    raise DatasetParseError(path, lineno, f"non-contiguous id {idx}")
                vocab._ids[tok] = idx
                vocab.tokens.append(tok)
        if vocab.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DatasetParseError(path, 1, "ids 0 and 1 must be <pad> and <unk>")
        return vocab


def make_jd(
    jd_id: str,
    title_id: int,
    raw_items: Sequence[str],
    vocab: Vocabulary,
    max_items: int = DEFAULT_MAX_ITEMS,
    max_item_tokens: int | None = None,
) -> JobDescription:
    """Tokenize raw item strings into a JD, keeping the first ``max_items``.

    Items with no tokens (pure punctuation) are dropped before truncation.
    """
    items, kept_raw = [], []
    for raw in raw_items:
        ids = vocab.encode(raw)
        if max_item_tokens is not None:
            ids = ids[:max_item_tokens]
        if ids:
            items.append(TokenizedItem(tuple(ids)))
            kept_raw.append(raw)
    return JobDescription(jd_id, int(title_id), tuple(items[:max_items]), tuple(kept_raw[:max_items]))


def truncate_jd(jd: JobDescription, max_items: int) -> JobDescription:
    if len(jd.items) <= max_items:
        return jd
    return JobDescription(jd.jd_id, jd.title_id, jd.items[:max_items], jd.raw_items[:max_items])


# --------------------------------------------------------------------------
# Ratings
# --------------------------------------------------------------------------


def normalize_ratings(ratings) -> SkillDistribution:
    """Softmax-normalize a vector of skill ratings into a distribution."""
    arr = np.asarray(ratings, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("ratings vector is empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError("ratings contain NaN or infinite entries")
    z = np.exp(arr - arr.max())
    return SkillDistribution(z / z.sum())


# --------------------------------------------------------------------------
# Dataset container and validation
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    """All JDs (the recall pool), paired records, clicks and the vocabulary."""

    jds: dict[str, JobDescription]
    records: list[PersonJobRecord]
    clicks: list[ClickRecord] = field(default_factory=list)
    vocab: Vocabulary = field(default_factory=Vocabulary)

    @property
    def num_skills(self) -> int:
        return len(self.records[0].profile.skills) if self.records else 0

    @property
    def num_titles(self) -> int:
        return 1 + max((jd.title_id for jd in self.jds.values()), default=-1)

    @property
    def num_position_names(self) -> int:
        return 1 + max((r.profile.aux_info.position_name_id for r in self.records), default=-1)

    @property
    def max_position_level(self) -> int:
        return max((r.profile.aux_info.position_level for r in self.records), default=0)

    def users(self) -> dict[str, UserProfile]:
        return {r.profile.user_id: r.profile for r in self.records}


@dataclass(frozen=True)
class Violation:
    record: str
    message: str

    def __str__(self):
        return f"{self.record}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, record: str, message: str) -> None:
        self.violations.append(Violation(record, message))

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [{"record": v.record, "message": v.message} for v in self.violations]}


def validate_dataset(
    records: Sequence[PersonJobRecord],
    clicks: Sequence[ClickRecord] = (),
    jds: Iterable[JobDescription] | None = None,
    vocab_size: int | None = None,
    max_items: int = DEFAULT_MAX_ITEMS,
    num_position_names: int | None = None,
) -> ValidationReport:
    """Check every dataset invariant; the report is empty iff all hold.

    Profiles are checked from their raw numbers, so this also works on
    records assembled without going through :class:`SkillDistribution`.
    """
    report = ValidationReport()
    pool = {r.jd.jd_id: r.jd for r in records}
    if jds is not None:
        for jd in jds:
            pool.setdefault(jd.jd_id, jd)

    num_skills = None
    seen_users: set[str] = set()
    for rec in records:
        uid = rec.profile.user_id
        tag = f"user {uid}"
        if uid in seen_users:
            report.add(tag, "duplicate user_id")
        seen_users.add(uid)
        probs = rec.profile.skills.probs
        problem = distribution_problem(probs)
        if problem:
            report.add(tag, f"skill distribution invalid: {problem}")
        if num_skills is None:
            num_skills = len(probs)
        elif len(probs) != num_skills:
            report.add(tag, f"skill vector length {len(probs)} != {num_skills}")
        aux = rec.profile.aux_info
        if aux.position_name_id < 0 or (num_position_names is not None and aux.position_name_id >= num_position_names):
            report.add(tag, f"position_name_id {aux.position_name_id} out of range")
        if aux.position_level < 0:
            report.add(tag, f"position_level {aux.position_level} is negative")

    for jd in pool.values():
        tag = f"jd {jd.jd_id}"
        if not 1 <= len(jd.items) <= max_items:
            report.add(tag, f"has {len(jd.items)} items, expected 1..{max_items}")
        if jd.title_id < 0:
            report.add(tag, "negative title_id")
        for m, item in enumerate(jd.items):
            if len(item.token_ids) == 0:
                report.add(tag, f"item {m} has no tokens")
            elif min(item.token_ids) < 0 or (vocab_size is not None and max(item.token_ids) >= vocab_size):
                report.add(tag, f"item {m} has token ids outside the vocabulary")

    users = {r.profile.user_id for r in records}
    for i, click in enumerate(clicks):
        tag = f"click {i} ({click.user_id}, {click.jd_id})"
        if click.label not in (0, 1):
            report.add(tag, f"label {click.label!r} not in {{0, 1}}")
        if click.user_id not in users:
            report.add(tag, f"dangling reference to unknown user_id {click.user_id!r}")
        if click.jd_id not in pool:
            report.add(tag, f"dangling reference to unknown jd_id {click.jd_id!r}")
    return report


def validate(dataset: Dataset, max_items: int = DEFAULT_MAX_ITEMS) -> ValidationReport:
    return validate_dataset(
        dataset.records, dataset.clicks, dataset.jds.values(), vocab_size=len(dataset.vocab), max_items=max_items
    )


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

JDS_FILE = "jds.jsonl"
USERS_FILE = "users.jsonl"
CLICKS_FILE = "clicks.jsonl"
VOCAB_FILE = "vocab.txt"


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def jd_to_dict(jd: JobDescription) -> dict:
    return {
        "jd_id": jd.jd_id,
        "title_id": jd.title_id,
        "raw_items": list(jd.raw_items),
        "items": [list(it.token_ids) for it in jd.items],
    }


def profile_to_dict(rec: PersonJobRecord) -> dict:
    p = rec.profile
    return {
        "user_id": p.user_id,
        "jd_id": rec.jd.jd_id,
        "skills": list(p.skills.probs),
        "aux_info": {"position_name_id": p.aux_info.position_name_id, "position_level": p.aux_info.position_level},
    }


def click_to_dict(c: ClickRecord) -> dict:
    return {"user_id": c.user_id, "jd_id": c.jd_id, "label": c.label}


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / JDS_FILE, "".join(dumps_line(jd_to_dict(jd)) for jd in dataset.jds.values()))
    atomic_write_text(directory / USERS_FILE, "".join(dumps_line(profile_to_dict(r)) for r in dataset.records))
    atomic_write_text(directory / CLICKS_FILE, "".join(dumps_line(click_to_dict(c)) for c in dataset.clicks))
    dataset.vocab.save(directory / VOCAB_FILE)
    return directory


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(path, lineno, f"invalid JSON: {exc.msg}") from None


def _field(path, lineno, obj, key):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise DatasetParseError(path, lineno, f"missing field {key!r}") from None


def read_jds(path, max_items: int = DEFAULT_MAX_ITEMS) -> dict[str, JobDescription]:
    jds = {}
    for lineno, obj in _read_jsonl(path):
        try:
            items = tuple(TokenizedItem(tuple(ids)) for ids in _field(path, lineno, obj, "items"))
            jd = JobDescription(
                str(_field(path, lineno, obj, "jd_id")),
                int(_field(path, lineno, obj, "title_id")),
                items,
                tuple(obj.get("raw_items", ())),
            )
        except (DomainError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(path, lineno, str(exc)) from None
        if jd.jd_id in jds:
            raise DatasetParseError(path, lineno, f"duplicate jd_id {jd.jd_id!r}")
        jds[jd.jd_id] = truncate_jd(jd, max_items)
    return jds


def read_users(path, jds: dict[str, JobDescription], strict: bool = True) -> list[PersonJobRecord]:
    """Read profiles and pair them with their JDs.

    With ``strict=False`` invalid distributions are kept (wrapped without
    checks) so :func:`validate_dataset` can report them.
    """
    records = []
    for lineno, obj in _read_jsonl(path):
        jd_id = str(_field(path, lineno, obj, "jd_id"))
        if jd_id not in jds:
            raise DatasetParseError(path, lineno, f"profile references unknown jd_id {jd_id!r}")
        aux = _field(path, lineno, obj, "aux_info")
        skills = _field(path, lineno, obj, "skills")
        try:
            dist = SkillDistribution(skills)
        except DomainError as exc:
            if strict:
                raise DatasetParseError(path, lineno, str(exc)) from None
            dist = SkillDistribution.unchecked(skills)
        profile = UserProfile(
            str(_field(path, lineno, obj, "user_id")),
            dist,
            AuxUserInfo(int(_field(path, lineno, aux, "position_name_id")), int(_field(path, lineno, aux, "position_level"))),
        )
        records.append(PersonJobRecord(jds[jd_id], profile))
    return records


def read_clicks(path) -> list[ClickRecord]:
    clicks = []
    for lineno, obj in _read_jsonl(path):
        label = _field(path, lineno, obj, "label")
        if label not in (0, 1) or isinstance(label, bool):
            raise DatasetParseError(path, lineno, f"label must be 0 or 1, got {label!r}")
        clicks.append(ClickRecord(str(_field(path, lineno, obj, "user_id")), str(_field(path, lineno, obj, "jd_id")), int(label)))
    return clicks


def load_dataset(directory, max_items: int = DEFAULT_MAX_ITEMS, strict: bool = True) -> Dataset:
    directory = Path(directory)
    for name in (JDS_FILE, USERS_FILE):
        if not (directory / name).exists():
            raise DatasetParseError(directory / name, None, "file not found")
    jds = read_jds(directory / JDS_FILE, max_items)
    records = read_users(directory / USERS_FILE, jds, strict=strict)
    clicks = read_clicks(directory / CLICKS_FILE) if (directory / CLICKS_FILE).exists() else []
    vocab = Vocabulary.load(directory / VOCAB_FILE) if (directory / VOCAB_FILE).exists() else Vocabulary()
    return Dataset(jds, records, clicks, vocab)


def split_records(records: Sequence[PersonJobRecord], test_fraction: float, seed: int):
    """Deterministic shuffled train/test split of paired records."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_test = int(math.floor(len(records) * test_fraction))
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return [records[i] for i in train], [records[i] for i in test]
