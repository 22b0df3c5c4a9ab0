"""End-to-end steps over on-disk artifacts: synth -> train/eval recall ->
train/eval rank -> recommend.  Every artifact is written atomically and
carries the run configuration fingerprint."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import torch

from .config import RunConfig
from .core import Dataset, atomic_write_text, dumps_line, load_dataset, split_records, validate
from .errors import ContractViolation, DatasetParseError, DomainError
from .model import JDStore, embed_pool
from .rank import rank_metrics
from .recall import cosine_scorer, rank_order, recall_candidates, recall_metrics, sample_recall_cases
from .synth import generate
from .training import (
    Checkpoint,
    RankTrainer,
    RecallTrainer,
    load_ranker,
    load_recall_model,
    model_config_for,
    score_groups,
    seed_everything,
)
from .transformer import cls_attention_rows

logger = logging.getLogger(__name__)

RECALL_REPORT = "recall_report.json"
CANDIDATES_FILE = "candidates.jsonl"
RANK_REPORT = "rank_report.json"
RANKED_FILE = "ranked.jsonl"


def write_json(path, obj) -> Path:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")
    return Path(path)


def synth(cfg: RunConfig, out_dir) -> Path:
    data = generate(cfg.synth_config())
    return data.save(out_dir)


def validate_dir(data_dir, max_items: int = 40):
    dataset = load_dataset(data_dir, max_items=max_items, strict=False)
    return validate(dataset, max_items=max_items)


def train_recall(cfg: RunConfig, data_dir, out_dir) -> dict[str, Path]:
    dataset = load_dataset(data_dir, max_items=cfg.get("model", "max_items"))
    mcfg = model_config_for(dataset, **cfg.model_overrides())
    trainer = RecallTrainer(
        dataset, mcfg, cfg.train_config("recall"), cfg.loss_config(), dump_dir=out_dir,
        extra_metadata={"run_fingerprint": cfg.fingerprint()},
    )
    return trainer.run().write(out_dir, "recall")


def _checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(path, None, "checkpoint not found")
    return Checkpoint.load(path)


def _check_skills(model_C: int, dataset: Dataset):
    if model_C != dataset.num_skills:
        raise ContractViolation(f"checkpoint trained for C={model_C}, dataset has C={dataset.num_skills}")


def _test_records(ckpt: Checkpoint, dataset: Dataset):
    tc = ckpt.metadata["train_config"] if ckpt.kind == "recall" else ckpt.metadata["recall_train_config"]
    return split_records(dataset.records, tc["test_fraction"], tc["seed"])


def eval_recall(
    checkpoint, data_dir, out_dir, ks: Sequence[int] = (20, 40, 60, 80, 100), negatives: int = 200,
    num_candidates: int = 100,
) -> dict:
    """Recall@K / NDCG@K over held-out users plus a candidate-set file for ranking."""
    ckpt = _checkpoint(checkpoint)
    model = load_recall_model(ckpt)
    dataset = load_dataset(data_dir, max_items=model.config.max_items)
    _check_skills(model.config.num_skills, dataset)
    seed_everything(ckpt.metadata["train_config"]["seed"])
    store = JDStore(dataset.jds, model.config.max_items)
    pool_ids = sorted(dataset.jds)
    pool = embed_pool(model, store, pool_ids, ckpt.metadata["train_jds"])
    _, test = _test_records(ckpt, dataset)
    users = {r.profile.user_id: r.profile.skills.array for r in dataset.records}
    cases = sample_recall_cases(
        {r.profile.user_id: r.jd.jd_id for r in test}, pool_ids, negatives, seed=ckpt.metadata["train_config"]["seed"]
    )
    rep = recall_metrics(cases, cosine_scorer(users, pool.pred_map()), ks)
    report = {
        "checkpoint_fingerprint": ckpt.metadata.get("fingerprint"),
        "num_users": len(cases),
        "negatives": negatives,
        **rep.to_dict(),
    }
    out_dir = Path(out_dir)
    write_json(out_dir / RECALL_REPORT, report)
    preds = pool.pred_map()
    lines = []
    for r in test:
        top = recall_candidates(r.profile.skills, [(j, preds[j]) for j in pool_ids], num_candidates)
        lines.append(dumps_line({"user_id": r.profile.user_id, "jd_ids": [j for j, _ in top], "scores": [s for _, s in top]}))
    atomic_write_text(out_dir / CANDIDATES_FILE, "".join(lines))
    return report


def train_rank(cfg: RunConfig, data_dir, recall_checkpoint, out_dir) -> dict[str, Path]:
    ckpt = _checkpoint(recall_checkpoint)
    dataset = load_dataset(data_dir, max_items=ckpt.metadata["model_config"]["max_items"])
    trainer = RankTrainer(dataset, ckpt, cfg.train_config("rank"), dump_dir=out_dir)
    return trainer.run().write(out_dir, "rank")


def read_candidates(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(path, None, "candidate file not found")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["user_id"])] = [str(j) for j in obj["jd_ids"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(path, lineno, f"bad candidate line: {exc}") from None
    return out


def eval_rank(checkpoint, candidates_path, data_dir, out_dir) -> dict:
    """AUC / MRR over labelled candidates, plus ranked lists for every candidate set.

    Only candidates with a click record for that user carry a label; the
    rest are ranked in the output lists but do not enter the metrics.
    """
    ckpt = _checkpoint(checkpoint)
    ranker, recall = load_ranker(ckpt)
    dataset = load_dataset(data_dir, max_items=recall.config.max_items)
    _check_skills(recall.config.num_skills, dataset)
    seed_everything(ckpt.metadata["train_config"]["seed"])
    candidates = read_candidates(candidates_path)
    users = {r.profile.user_id: r.profile.skills.array for r in dataset.records}
    unknown = sorted(set(candidates) - set(users))
    if unknown:
        raise DomainError(f"candidate file references unknown user_id {unknown[0]!r}")
    store = JDStore(dataset.jds, recall.config.max_items)
    needed = sorted({j for js in candidates.values() for j in js})
    missing = [j for j in needed if j not in dataset.jds]
    if missing:
        raise DomainError(f"candidate file references unknown jd_id {missing[0]!r}")
    cls_map = embed_pool(recall, store, needed, ckpt.metadata["train_jds"]).cls_map()
    labels = {(c.user_id, c.jd_id): c.label for c in dataset.clicks}

    all_groups = {u: [(j, labels.get((u, j), -1)) for j in js] for u, js in candidates.items()}
    scored = score_groups(ranker, cls_map, users, all_groups)
    lines = []
    for u in sorted(scored):
        group = scored[u]
        order = rank_order([c.jd_id for c in group], [c.score for c in group])
        lines.append(dumps_line({"user_id": u, "jd_ids": [group[i].jd_id for i in order], "scores": [group[i].score for i in order]}))
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / RANKED_FILE, "".join(lines))

    labelled = {u: [c for c in g if c.label >= 0] for u, g in scored.items()}
    labelled = {u: g for u, g in labelled.items() if g}
    rep = rank_metrics(labelled)
    report = {"checkpoint_fingerprint": ckpt.metadata.get("fingerprint"), "labelled_candidates": sum(map(len, labelled.values())), **rep.to_dict()}
    write_json(out_dir / RANK_REPORT, report)
    return report


def recommend(checkpoint, data_dir, user_id: str, k: int = 10, num_candidates: int = 100, out_path=None) -> dict:
    """Recall candidates for one user, rank them by click probability and
    export attention weights for the returned JDs."""
    ckpt = _checkpoint(checkpoint)
    ranker, recall = load_ranker(ckpt)
    dataset = load_dataset(data_dir, max_items=recall.config.max_items)
    _check_skills(recall.config.num_skills, dataset)
    users = dataset.users()
    if user_id not in users:
        raise DomainError(f"unknown user_id {user_id!r}")
    if k < 1:
        raise DomainError(f"K must be >= 1, got {k}")
    seed_everything(ckpt.metadata["train_config"]["seed"])
    store = JDStore(dataset.jds, recall.config.max_items)
    pool_ids = sorted(dataset.jds)
    pool = embed_pool(recall, store, pool_ids, ckpt.metadata["train_jds"])
    preds, cls_map = pool.pred_map(), pool.cls_map()
    profile = users[user_id]
    cands = recall_candidates(profile.skills, [(j, preds[j]) for j in pool_ids], num_candidates)
    group = {user_id: [(j, -1) for j, _ in cands]}
    scored = score_groups(ranker, cls_map, {user_id: profile.skills.array}, group)[user_id]
    order = rank_order([c.jd_id for c in scored], [c.score for c in scored])[:k]
    recall_score = dict(cands)

    results = []
    with torch.no_grad():
        dtype = next(ranker.parameters()).dtype
        skills_t = torch.as_tensor(profile.skills.array, dtype=dtype)
        for i in order:
            jd_id = scored[i].jd_id
            tup = [jd_id, *pool.neighbors[jd_id]]
            _, _, _, att, item_mask = recall.encode_tuples(store, [tup], return_attention=True)
            rows = cls_attention_rows(att, len(tup), recall.config.max_items, item_mask[0])
            cross = ranker.attention(torch.as_tensor(cls_map[jd_id], dtype=dtype), skills_t)
            results.append({
                "jd_id": jd_id,
                "click_score": scored[i].score,
                "recall_score": recall_score[jd_id],
                "neighbors": pool.neighbors[jd_id],
                "cls_item_attention": rows[0]["layers"],
                "skill_attention": cross.mean(dim=0).double().numpy().tolist(),  # mean attention row, sums to 1
                "raw_items": list(dataset.jds[jd_id].raw_items[: recall.config.max_items]),
            })
    out = {"user_id": user_id, "recommendations": results, "checkpoint_fingerprint": ckpt.metadata.get("fingerprint")}
    if out_path is not None:
        write_json(out_path, out)
    return out

