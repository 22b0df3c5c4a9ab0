"""Synthetic person-job datasets with a known generative process.

Each skill owns a handful of multi-word phrases.  A JD draws a latent skill
distribution (a title-specific dominant block mixed with a Dirichlet
background), then each of its items is one phrase of a skill sampled from
that latent, padded with 0-2 generic filler words.  The paired user's skill
profile is the latent perturbed multiplicatively by ``neighbor_noise`` and
renormalized.  Click labels are Bernoulli with probability
``sigmoid(click_temperature * (cos(latent, profile) - mean_cos))``.

Also home to :func:`load_vector_ldl`, a reader for feature-vector +
label-distribution corpora.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    AuxUserInfo,
    ClickRecord,
    Dataset,
    JobDescription,
    PersonJobRecord,
    SkillDistribution,
    UserProfile,
    Vocabulary,
    atomic_write_text,
    dumps_line,
    make_jd,
    save_dataset,
)
from .errors import ConfigError, DatasetParseError, DomainError

TRUTH_FILE = "truth.jsonl"

FILLER_WORDS = (
    "experience", "strong", "ability", "knowledge", "solid", "familiar", "with",
    "good", "proven", "hands", "on", "responsible", "for", "excellent", "deep",
    "understanding", "of", "practical", "skills", "in", "team", "projects",
)

_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "pl", "st", "gr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


@dataclass(frozen=True)
class SynthConfig:
    num_skills: int = 20
    num_titles: int = 10
    num_jds: int = 2000
    num_users: int = 2000
    items_per_jd: tuple[int, int] = (4, 8)
    phrases_per_skill: int = 4
    neighbor_noise: float = 0.1
    click_temperature: float = 10.0
    seed: int = 0
    words_per_phrase: tuple[int, int] = (2, 3)
    dominant_mass: float = 0.5
    background_concentration: float = 0.3
    clicks_per_user: int = 8
    num_levels: int = 4
    max_items: int = 40

    def __post_init__(self):
        object.__setattr__(self, "items_per_jd", tuple(self.items_per_jd))
        object.__setattr__(self, "words_per_phrase", tuple(self.words_per_phrase))
        counts = {
            "num_skills": self.num_skills, "num_titles": self.num_titles, "num_jds": self.num_jds,
            "num_users": self.num_users, "phrases_per_skill": self.phrases_per_skill,
            "clicks_per_user": self.clicks_per_user, "num_levels": self.num_levels, "max_items": self.max_items,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        for name in ("items_per_jd", "words_per_phrase"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must be a non-empty range of positive ints, got {(lo, hi)}")
        if self.num_titles > self.num_skills:
            raise ConfigError("num_titles must not exceed num_skills (titles own disjoint dominant skills)")
        if self.num_users > self.num_jds:
            raise ConfigError("num_users must not exceed num_jds (one paired JD per user)")
        if not 0.0 <= self.neighbor_noise <= 1.0:
            raise ConfigError("neighbor_noise must lie in [0, 1]")
        if self.click_temperature <= 0:
            raise ConfigError("click_temperature must be positive")
        if not 0.0 <= self.dominant_mass <= 1.0:
            raise ConfigError("dominant_mass must lie in [0, 1]")
        if self.background_concentration <= 0:
            raise ConfigError("background_concentration must be positive")


@dataclass
class GenerativeTruth:
    latents: dict[str, np.ndarray]
    item_skills: dict[str, list[int]]
    title_skills: list[list[int]]
    phrases: list[list[str]]
    click_cosines: list[float] = field(default_factory=list)
    click_probs: list[float] = field(default_factory=list)

    def save(self, path) -> None:
        lines = [
            dumps_line({"jd_id": jd_id, "latent": lat.tolist(), "item_skills": self.item_skills[jd_id]})
            for jd_id, lat in self.latents.items()
        ]
        atomic_write_text(path, "".join(lines))


@dataclass
class SynthDataset:
    dataset: Dataset
    truth: GenerativeTruth
    config: SynthConfig

    @property
    def records(self):
        return self.dataset.records

    @property
    def clicks(self):
        return self.dataset.clicks

    def save(self, directory) -> Path:
        directory = save_dataset(self.dataset, directory)
        self.truth.save(directory / TRUTH_FILE)
        atomic_write_text(directory / "synth_config.json", json.dumps(asdict(self.config), sort_keys=True, indent=2) + "\n")
        return directory


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _make_phrases(rng, cfg: SynthConfig) -> list[list[str]]:
    taken = set(FILLER_WORDS)
    phrases = []
    for _ in range(cfg.num_skills):
        lo, hi = cfg.words_per_phrase
        # a small per-skill lexicon; phrases recombine it so phrases overlap within a skill
        lexicon = _make_words(rng, max(hi, cfg.phrases_per_skill + 1), taken)
        skill_phrases: list[str] = []
        while len(skill_phrases) < cfg.phrases_per_skill:
            n = int(rng.integers(lo, hi + 1))
            phrase = " ".join(rng.choice(lexicon, size=n, replace=False))
            if phrase not in skill_phrases:
                skill_phrases.append(phrase)
        phrases.append(skill_phrases)
    return phrases


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def perturb_profile(latent: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative symmetric noise ``latent * (1 + noise * U(-1, 1))``, renormalized."""
    u = rng.uniform(-1.0, 1.0, size=latent.shape)
    if noise == 0.0:
        return latent.copy()
    perturbed = latent * (1.0 + noise * u)
    return perturbed / perturbed.sum()


def generate(config: SynthConfig) -> SynthDataset:
    """Build a dataset, deterministically in ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    C = cfg.num_skills

    phrases = _make_phrases(rng, cfg)
    per_title = C // cfg.num_titles
    perm = rng.permutation(C)
    title_skills = [sorted(perm[t * per_title:(t + 1) * per_title].tolist()) for t in range(cfg.num_titles)]

    titles = rng.integers(0, cfg.num_titles, size=cfg.num_jds)
    latents, raw_jds, item_skills = [], [], []
    for i in range(cfg.num_jds):
        dom = np.zeros(C)
        dom[title_skills[titles[i]]] = rng.dirichlet(np.ones(per_title))
        background = rng.dirichlet(np.full(C, cfg.background_concentration))
        latent = cfg.dominant_mass * dom + (1.0 - cfg.dominant_mass) * background
        latent = latent / latent.sum()
        latents.append(latent)

        n_items = int(rng.integers(cfg.items_per_jd[0], cfg.items_per_jd[1] + 1))
        skills = rng.choice(C, size=n_items, p=latent)
        items = []
        for s in skills:
            words = phrases[s][rng.integers(cfg.phrases_per_skill)].split()
            n_fill = int(rng.integers(0, 3))
            fill = [FILLER_WORDS[j] for j in rng.integers(len(FILLER_WORDS), size=n_fill)]
            # fillers lead or trail the phrase
            text = fill + words if rng.random() < 0.5 else words + fill
            items.append(" ".join(text).capitalize())
        raw_jds.append(items)
        item_skills.append([int(s) for s in skills])

    vocab = Vocabulary.build(item for items in raw_jds for item in items)
    jd_ids = [f"jd{i:05d}" for i in range(cfg.num_jds)]
    jds: dict[str, JobDescription] = {
        jd_id: make_jd(jd_id, int(titles[i]), raw_jds[i], vocab, max_items=cfg.max_items)
        for i, jd_id in enumerate(jd_ids)
    }

    profiles = [perturb_profile(latents[i], cfg.neighbor_noise, rng) for i in range(cfg.num_users)]
    # position level: quantile bins of negated entropy with a little jitter
    scores = np.array([-_entropy(p) for p in profiles]) + 0.05 * rng.standard_normal(cfg.num_users)
    cuts = np.quantile(scores, np.linspace(0, 1, cfg.num_levels + 1)[1:-1]) if cfg.num_users > 1 else []
    levels = np.searchsorted(cuts, scores, side="right")

    records = []
    for i in range(cfg.num_users):
        profile = UserProfile(
            f"u{i:05d}",
            SkillDistribution(profiles[i]),
            AuxUserInfo(position_name_id=int(titles[i]), position_level=int(levels[i])),
        )
        records.append(PersonJobRecord(jds[jd_ids[i]], profile))

    by_title = [np.flatnonzero(titles == t) for t in range(cfg.num_titles)]
    pairs = []
    for i in range(cfg.num_users):
        chosen = [i]
        n_rest = min(cfg.clicks_per_user, cfg.num_jds) - 1
        same = [j for j in rng.permutation(by_title[titles[i]]).tolist() if j != i][: n_rest // 2]
        chosen += same
        others = [j for j in rng.permutation(cfg.num_jds).tolist() if j not in chosen]
        chosen += others[: n_rest - len(same)]
        pairs.extend((i, j) for j in chosen)
    cosines = np.array([_cosine(latents[j], profiles[i]) for i, j in pairs])
    probs = 1.0 / (1.0 + np.exp(-cfg.click_temperature * (cosines - cosines.mean())))
    labels = (rng.random(len(pairs)) < probs).astype(int)
    clicks = [ClickRecord(f"u{i:05d}", jd_ids[j], int(lab)) for (i, j), lab in zip(pairs, labels)]

    truth = GenerativeTruth(
        latents=dict(zip(jd_ids, latents)),
        item_skills=dict(zip(jd_ids, item_skills)),
        title_skills=title_skills,
        phrases=phrases,
        click_cosines=cosines.tolist(),
        click_probs=probs.tolist(),
    )
    return SynthDataset(Dataset(jds, records, clicks, vocab), truth, cfg)


# --------------------------------------------------------------------------
# Feature-vector + label-distribution corpora
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorLDLRecord:
    features: np.ndarray
    distribution: SkillDistribution


def load_vector_ldl(path, num_labels: int = 6, renormalize: bool = True) -> list[VectorLDLRecord]:
    """Load rows of ``F`` features followed by ``num_labels`` label degrees.

    Text files are comma- or whitespace-delimited (``#`` starts a comment).
    ``.mat`` files must hold ``features`` and ``labels`` arrays.  Label rows
    are rescaled to sum to one when ``renormalize`` is set (raw corpora often
    carry rounding drift).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(path, None, "file not found")
    if path.suffix == ".mat":
        from scipy.io import loadmat

        mat = loadmat(path)
        try:
            features, labels = np.asarray(mat["features"], float), np.asarray(mat["labels"], float)
        except KeyError as exc:
            raise DatasetParseError(path, None, f"missing array {exc}") from None
        if features.shape[0] != labels.shape[0]:
            raise DatasetParseError(path, None, "features and labels have different row counts")
        rows = [(r + 1, features[r], labels[r]) for r in range(features.shape[0])]
    else:
        rows, width = [], None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.replace(",", " ").split()
                row_idx = len(rows)
                try:
                    values = np.array([float(p) for p in parts])
                except ValueError:
                    raise DatasetParseError(path, lineno, f"row {row_idx}: non-numeric value") from None
                if width is None:
                    width = values.size
                    if width <= num_labels:
                        raise DatasetParseError(path, lineno, f"row {row_idx}: needs more than {num_labels} columns")
                elif values.size != width:
                    raise DatasetParseError(path, lineno, f"row {row_idx}: width {values.size} != {width}")
                rows.append((lineno, values[:-num_labels], values[-num_labels:]))

    out = []
    for lineno, feats, dist in rows:
        if np.any(dist < 0) or not np.all(np.isfinite(dist)) or not np.all(np.isfinite(feats)):
            raise DatasetParseError(path, lineno, "label degrees must be finite and non-negative")
        if renormalize:
            total = dist.sum()
            if total <= 0:
                raise DatasetParseError(path, lineno, "label degrees sum to zero")
            dist = dist / total
        try:
            out.append(VectorLDLRecord(np.asarray(feats, dtype=np.float64), SkillDistribution(dist)))
        except DomainError as exc:
            raise DatasetParseError(path, lineno, str(exc)) from None
    return out
