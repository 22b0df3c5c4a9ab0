"""Training harness for the recall and ranking stages.

Handles Glorot initialization, seeded tuple batching, the stepped learning
rate schedule, best/final checkpoint selection and NaN diagnostics.  Both
stages use Adam; the recall stage minimizes the combined recall loss, the
ranking stage the summed click cross-entropy on frozen recall embeddings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save as st_save
from torch import nn

from .core import Dataset, atomic_write_text, dumps_line, split_records
from .errors import ConfigError, ContractViolation, TrainingDiverged
from .model import JDStore, ModelConfig, RecallModel, assign_neighbors, embed_pool
from .rank import CrossAttentionRanker, RankReport, ScoredCandidate, ctr_loss, rank_metrics
from .recall import RecallLossConfig, RecallReport, cosine_scorer, recall_metrics, sample_recall_cases, total_recall_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "recall"
    batch_size: int = 32
    lr: float = 0.001
    lr_anneal_factor: float = 0.8
    lr_anneal_every: int = 3
    max_epochs: int = 30
    dropout: float = 0.1
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    recall_negatives: int = 200
    rank_negatives: int = 3
    test_fraction: float = 0.2
    eval_ks: tuple[int, ...] = (20, 40, 60, 80, 100)
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "eval_ks", tuple(int(k) for k in self.eval_ks))
        if self.stage not in ("recall", "rank"):
            raise ConfigError(f"stage must be 'recall' or 'rank', got {self.stage!r}")
        if self.stage == "recall" and self.batch_size < 2:
            raise ConfigError("recall-stage batches need at least 2 tuples for in-batch negatives")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr <= 0:
            raise ConfigError("batch_size, max_epochs and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-indexed ``epoch``: ``lr * factor ** (epoch // every)``."""
    return config.lr * config.lr_anneal_factor ** (epoch // config.lr_anneal_every)


def seed_everything(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def glorot_bound(n_in: int, n_out: int) -> float:
    return math.sqrt(6.0 / (n_in + n_out))


def _fans(name: str, p: torch.Tensor) -> tuple[int, int]:
    if p.dim() == 1:  # learned token vectors act as a 1 x d matrix
        return 1, p.shape[0]
    if p.dim() == 2 and name.endswith("embedding.weight"):
        return p.shape[0], p.shape[1]  # vocab -> d lookup table
    receptive = int(np.prod(p.shape[2:])) if p.dim() > 2 else 1
    return p.shape[1] * receptive, p.shape[0] * receptive


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Glorot-uniform weights, zero biases, unit norm scales; deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    norm_types = (nn.LayerNorm,)
    norm_names = set()
    for mname, sub in module.named_modules():
        if isinstance(sub, norm_types) or type(sub).__name__ == "MaskedBatchNorm1d":
            norm_names.add(mname)
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner, _, leaf = name.rpartition(".")
            if owner in norm_names:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                n_in, n_out = _fans(name, p)
                bound = glorot_bound(n_in, n_out)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        for sub in module.modules():
            if isinstance(sub, nn.Embedding) and sub.padding_idx is not None:
                sub.weight[sub.padding_idx].zero_()
    return module


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def make_recall_batches(num_tuples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a trailing batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise ContractViolation("recall batches need at least 2 tuples")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(num_tuples)
    batches = [order[s:s + batch_size] for s in range(0, num_tuples, batch_size)]
    return [b for b in batches if len(b) >= 2]


def random_neighbors(store: JDStore, central_ids: Sequence[str], pool_ids: Sequence[str], L: int, seed: int):
    """Warm-up neighbors: random same-title pool JDs, topped up with random others."""
    rng = np.random.default_rng([seed, 7919])
    pool = np.asarray(sorted(pool_ids), dtype=object)
    titles = np.array([store.jds[j].title_id for j in pool])
    out = {}
    for jd_id in central_ids:
        t = store.jds[jd_id].title_id
        same = [j for j in rng.permutation(pool[titles == t]) if j != jd_id][:L]
        if len(same) < L:
            rest = [j for j in rng.permutation(pool[titles != t]) if j != jd_id]
            same += rest[: L - len(same)]
        out[jd_id] = [str(j) for j in same]
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    kind: str
    epoch: int
    tensors: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        tensors = {k: v.detach().clone().contiguous() for k, v in self.tensors.items()}
        meta = {"kind": self.kind, "epoch": self.epoch, **self.metadata}
        return st_save(tensors, metadata={"skillrec": json.dumps(meta, sort_keys=True)})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors = {}
        with safe_open(str(path), framework="pt") as fh:
            meta = json.loads(fh.metadata()["skillrec"])
            for key in fh.keys():
                tensors[key] = fh.get_tensor(key)
        kind, epoch = meta.pop("kind"), meta.pop("epoch")
        return cls(kind, epoch, tensors, meta)

    def module_state(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"param_groups": groups}


def _restore_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    state: dict[int, dict] = {}
    for key, value in ckpt.tensors.items():
        if key.startswith("optim."):
            _, idx, name = key.split(".", 2)
            state.setdefault(int(idx), {})[name] = value
    groups = ckpt.metadata["optimizer"]["param_groups"]
    for g in groups:
        g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def make_checkpoint(kind, epoch, modules: dict[str, nn.Module], optimizer, metadata: dict) -> Checkpoint:
    tensors = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            tensors[f"{prefix}.{k}"] = v
    meta = dict(metadata)
    if optimizer is not None:
        opt_tensors, opt_meta = _optimizer_tensors(optimizer)
        tensors.update(opt_tensors)
        meta["optimizer"] = opt_meta
    return Checkpoint(kind, epoch, {k: v.detach().clone() for k, v in tensors.items()}, meta)


def load_recall_model(ckpt: Checkpoint) -> RecallModel:
    cfg = ModelConfig(**ckpt.metadata["model_config"])
    model = RecallModel(cfg)
    model.load_state_dict(ckpt.module_state("recall"))
    model.eval()
    return model


def load_ranker(ckpt: Checkpoint) -> tuple[CrossAttentionRanker, RecallModel]:
    if ckpt.kind != "rank":
        raise ContractViolation(f"expected a rank checkpoint, got {ckpt.kind!r}")
    recall = load_recall_model(ckpt)
    ranker = CrossAttentionRanker(recall.config.d, recall.config.num_skills)
    ranker.load_state_dict(ckpt.module_state("ranker"))
    ranker.eval()
    return ranker, recall


# --------------------------------------------------------------------------
# Recall stage
# --------------------------------------------------------------------------


@dataclass
class StageResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict]
    train_users: list[str]
    test_users: list[str]
    seconds: float = 0.0

    def write(self, out_dir, prefix: str) -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {
            "best": self.best.save(out_dir / f"{prefix}_best.safetensors"),
            "final": self.final.save(out_dir / f"{prefix}_final.safetensors"),
            "log": out_dir / f"{prefix}_log.jsonl",
        }
        atomic_write_text(paths["log"], "".join(dumps_line(row) for row in self.log))
        return paths


def _dump_batch(dump_dir, payload: dict) -> Path | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "nan_batch.json"
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2, default=str))
    return path


def model_config_for(dataset: Dataset, **overrides) -> ModelConfig:
    return ModelConfig(
        vocab_size=len(dataset.vocab),
        num_skills=dataset.num_skills,
        num_position_names=max(dataset.num_position_names, 1),
        max_level=max(dataset.max_position_level, 1),
        **overrides,
    )


class RecallTrainer:
    """Trains the recall model on person-job records grouped into JD tuples."""

    def __init__(
        self,
        dataset: Dataset,
        model_config: ModelConfig,
        train_config: TrainConfig,
        loss_config: RecallLossConfig = RecallLossConfig(),
        dump_dir=None,
        extra_metadata: dict | None = None,
    ):
        self.dataset = dataset
        self.mcfg = model_config
        self.tcfg = train_config
        self.lcfg = loss_config
        self.dump_dir = dump_dir
        self.extra_metadata = extra_metadata or {}
        self.train_records, self.test_records = split_records(dataset.records, train_config.test_fraction, train_config.seed)
        if len(self.train_records) < 2:
            raise ContractViolation("need at least 2 training records")
        self.store = JDStore(dataset.jds, model_config.max_items)
        self.train_ids = [r.jd.jd_id for r in self.train_records]
        if len(self.train_ids) - 1 < model_config.num_neighbors:
            raise ContractViolation("training pool too small for the requested number of neighbors")
        self.pool_ids = sorted(dataset.jds)
        self.cases = sample_recall_cases(
            {r.profile.user_id: r.jd.jd_id for r in self.test_records},
            self.pool_ids,
            min(train_config.recall_negatives, len(self.pool_ids) - 1),
            seed=train_config.seed,
        )
        self.user_skills = {r.profile.user_id: r.profile.skills.array for r in dataset.records}

    def metadata(self, fingerprint_extra=None) -> dict:
        meta = {
            "model_config": self.mcfg.to_dict(),
            "train_config": self.tcfg.to_dict(),
            "loss_config": asdict(self.lcfg),
            "vocab": list(self.dataset.vocab.tokens),
            "train_jds": self.train_ids,
            **self.extra_metadata,
        }
        meta["fingerprint"] = fingerprint(
            {k: meta[k] for k in ("model_config", "train_config", "loss_config")} | (fingerprint_extra or {})
        )
        return meta

    def _targets(self, records):
        return torch.as_tensor(np.stack([r.profile.skills.array for r in records]), dtype=torch.float32)

    def evaluate(self, model: RecallModel) -> tuple[RecallReport, object]:
        pool = embed_pool(model, self.store, self.pool_ids, self.train_ids)
        ks = [k for k in self.tcfg.eval_ks if k <= 1 + len(self.cases[0].negatives)] if self.cases else []
        report = recall_metrics(self.cases, cosine_scorer(self.user_skills, pool.pred_map()), ks) if self.cases else RecallReport({}, {})
        return report, pool

    def run(self, initial: Checkpoint | None = None) -> StageResult:
        """Train for ``max_epochs``; with ``initial`` resume after its epoch."""
        t0 = time.perf_counter()
        cfg = self.tcfg
        seed_everything(cfg.seed, cfg.threads)
        model = init_params(RecallModel(self.mcfg), cfg.seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
        L = self.mcfg.num_neighbors
        start = 0
        if initial is not None:
            model.load_state_dict(initial.module_state("recall"))
            _restore_optimizer(opt, initial)
            start = initial.epoch + 1
            neighbors = assign_neighbors(model, self.store, self.train_ids, self.train_ids, L)
        else:
            neighbors = random_neighbors(self.store, self.train_ids, self.train_ids, L, cfg.seed)
        rec = self.train_records
        aux_ids = torch.as_tensor([r.profile.aux_info.position_name_id for r in rec])
        aux_lvl = torch.as_tensor([float(r.profile.aux_info.position_level) for r in rec])
        targets = self._targets(rec)

        log, best, best_metric = [], None, -math.inf
        for epoch in range(start, cfg.max_epochs):
            if epoch == 1 and L > 0 and initial is None:
                # one refresh: neighbors from the warmed-up model, fixed afterwards
                neighbors = assign_neighbors(model, self.store, self.train_ids, self.train_ids, L)
            lr = lr_at(cfg, epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            sums = np.zeros(4)
            batches = make_recall_batches(len(rec), cfg.batch_size, cfg.seed, epoch)
            for b in batches:
                tuples = [[self.train_ids[i], *neighbors[self.train_ids[i]]] for i in b]
                cls, preds, _ = model.encode_tuples(self.store, tuples)
                aui = model.aux_encoder(aux_ids[b], aux_lvl[b])
                loss = total_recall_loss(targets[b], preds, cls, aui, self.lcfg)
                if not torch.isfinite(loss.total):
                    path = _dump_batch(self.dump_dir, {"epoch": epoch, "tuples": tuples, "kl": loss.kl.item(),
                                                       "margin": loss.margin.item(), "relation": loss.relation.item()})
                    raise TrainingDiverged(f"non-finite recall loss at epoch {epoch}", path)
                opt.zero_grad()
                loss.total.backward()
                opt.step()
                sums += [loss.total.item(), loss.kl.item(), loss.margin.item(), loss.relation.item()]
            report, _ = self.evaluate(model)
            n = max(len(batches), 1)
            row = {
                "epoch": epoch, "lr": lr, "train_loss": sums[0] / n, "kl": sums[1] / n,
                "margin": sums[2] / n, "relation": sums[3] / n,
                "recall": {str(k): v for k, v in report.recall.items()},
                "ndcg": {str(k): v for k, v in report.ndcg.items()},
            }
            log.append(row)
            logger.info("recall epoch %d lr=%.6g loss=%.4f R@20=%s", epoch, lr, row["train_loss"], report.recall.get(20))
            metric = report.recall.get(20, next(iter(report.recall.values()), 0.0))
            if metric > best_metric:
                best_metric = metric
                best = make_checkpoint("recall", epoch, {"recall": model}, opt, self.metadata())
        final = make_checkpoint("recall", max(cfg.max_epochs - 1, start - 1), {"recall": model}, opt, self.metadata())
        self.model = model
        best = best or final
        return StageResult(
            best, final, log,
            [r.profile.user_id for r in self.train_records], [r.profile.user_id for r in self.test_records],
            time.perf_counter() - t0,
        )


def train_recall(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig, **kwargs) -> StageResult:
    return RecallTrainer(dataset, model_config, train_config, **kwargs).run()


# --------------------------------------------------------------------------
# Ranking stage
# --------------------------------------------------------------------------


def click_groups(dataset: Dataset, users: Sequence[str]) -> dict[str, list[tuple[str, int]]]:
    wanted = set(users)
    groups: dict[str, list[tuple[str, int]]] = {}
    for c in dataset.clicks:
        if c.user_id in wanted:
            groups.setdefault(c.user_id, []).append((c.jd_id, c.label))
    return groups


def sample_rank_examples(groups, num_negatives: int, pool_ids: Sequence[str], rng) -> list[tuple[str, str, int]]:
    """Each positive click with ``num_negatives`` negatives of the same user.

    Negatives come from the user's unclicked records (with replacement when
    short); users without any fall back to random pool JDs they never clicked.
    """
    out = []
    for user_id in sorted(groups):
        recs = groups[user_id]
        pos = [j for j, lab in recs if lab == 1]
        neg = [j for j, lab in recs if lab == 0]
        for j in pos:
            out.append((user_id, j, 1))
            if neg:
                picks = rng.choice(len(neg), size=num_negatives, replace=len(neg) < num_negatives)
                out.extend((user_id, neg[k], 0) for k in picks)
            else:
                clicked = set(pos)
                cands = [p for p in pool_ids if p not in clicked]
                picks = rng.choice(len(cands), size=num_negatives, replace=False)
                out.extend((user_id, cands[k], 0) for k in picks)
    return out


def score_groups(ranker, cls_map, user_skills, groups) -> dict[str, list[ScoredCandidate]]:
    scored = {}
    dtype = next(ranker.parameters()).dtype
    with torch.no_grad():
        for user_id in sorted(groups):
            recs = groups[user_id]
            jd = torch.as_tensor(np.stack([cls_map[j] for j, _ in recs]), dtype=dtype)
            us = torch.as_tensor(np.asarray(user_skills[user_id]), dtype=dtype).expand(len(recs), -1)
            probs = ranker(jd, us).double().numpy()
            scored[user_id] = [ScoredCandidate(j, float(p), int(lab)) for (j, lab), p in zip(recs, probs)]
    return scored


class RankTrainer:
    """Trains the click predictor on embeddings from a frozen recall model."""

    def __init__(self, dataset: Dataset, recall_ckpt: Checkpoint, train_config: TrainConfig, dump_dir=None):
        if recall_ckpt.kind != "recall":
            raise ContractViolation(f"expected a recall checkpoint, got {recall_ckpt.kind!r}")
        self.dataset = dataset
        self.recall_ckpt = recall_ckpt
        self.tcfg = train_config
        self.dump_dir = dump_dir
        self.recall = load_recall_model(recall_ckpt)
        if self.recall.config.num_skills != dataset.num_skills:
            raise ContractViolation(
                f"checkpoint trained for C={self.recall.config.num_skills}, dataset has C={dataset.num_skills}"
            )
        rtc = recall_ckpt.metadata["train_config"]
        train_recs, test_recs = split_records(dataset.records, rtc["test_fraction"], rtc["seed"])
        self.train_users = [r.profile.user_id for r in train_recs]
        self.test_users = [r.profile.user_id for r in test_recs]
        self.train_ids = recall_ckpt.metadata["train_jds"]
        self.store = JDStore(dataset.jds, self.recall.config.max_items)
        self.pool_ids = sorted(dataset.jds)
        self.user_skills = {r.profile.user_id: r.profile.skills.array for r in dataset.records}

    def run(self) -> StageResult:
        t0 = time.perf_counter()
        cfg = self.tcfg
        seed_everything(cfg.seed, cfg.threads)
        pool = embed_pool(self.recall, self.store, self.pool_ids, self.train_ids)
        cls_map = pool.cls_map()
        self.cls_map = cls_map
        ranker = init_params(CrossAttentionRanker(self.recall.config.d, self.recall.config.num_skills), cfg.seed)
        opt = torch.optim.Adam(ranker.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
        train_groups = click_groups(self.dataset, self.train_users)
        test_groups = click_groups(self.dataset, self.test_users)
        meta = {
            "model_config": self.recall.config.to_dict(),
            "train_config": cfg.to_dict(),
            "recall_train_config": self.recall_ckpt.metadata["train_config"],
            "recall_fingerprint": self.recall_ckpt.metadata.get("fingerprint"),
            "vocab": self.recall_ckpt.metadata.get("vocab", []),
            "train_jds": self.train_ids,
        }
        meta["fingerprint"] = fingerprint({"rank": cfg.to_dict(), "recall": meta["recall_fingerprint"]})
        modules = {"recall": self.recall, "ranker": ranker}

        log, best, best_metric = [], None, -math.inf
        for epoch in range(cfg.max_epochs):
            lr = lr_at(cfg, epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            ranker.train()
            rng = np.random.default_rng([cfg.seed, epoch])
            examples = sample_rank_examples(train_groups, cfg.rank_negatives, self.pool_ids, rng)
            order = rng.permutation(len(examples))
            total, n_batches = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                batch = [examples[i] for i in order[s:s + cfg.batch_size]]
                jd = torch.as_tensor(np.stack([cls_map[j] for _, j, _ in batch]), dtype=torch.float32)
                us = torch.as_tensor(np.stack([self.user_skills[u] for u, _, _ in batch]), dtype=torch.float32)
                labels = torch.as_tensor([lab for _, _, lab in batch], dtype=torch.float32)
                loss = ctr_loss(ranker(jd, us), labels)
                if not torch.isfinite(loss):
                    path = _dump_batch(self.dump_dir, {"epoch": epoch, "batch": batch})
                    raise TrainingDiverged(f"non-finite click loss at epoch {epoch}", path)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                n_batches += 1
            ranker.eval()
            report = rank_metrics(score_groups(ranker, cls_map, self.user_skills, test_groups))
            row = {"epoch": epoch, "lr": lr, "train_loss": total / max(n_batches, 1), "auc": report.auc, "mrr": report.mrr}
            log.append(row)
            logger.info("rank epoch %d lr=%.6g loss=%.4f AUC=%.4f MRR=%.4f", epoch, lr, row["train_loss"], report.auc, report.mrr)
            metric = report.auc if not math.isnan(report.auc) else -math.inf
            if best is None or metric > best_metric:
                best_metric = metric
                best = make_checkpoint("rank", epoch, modules, opt, meta)
        final = make_checkpoint("rank", cfg.max_epochs - 1, modules, opt, meta)
        self.ranker = ranker
        return StageResult(best, final, log, self.train_users, self.test_users, time.perf_counter() - t0)


def train_rank(dataset: Dataset, recall_ckpt: Checkpoint, train_config: TrainConfig, **kwargs) -> StageResult:
    return RankTrainer(dataset, recall_ckpt, train_config, **kwargs).run()


def evaluate_rank(ranker, cls_map, user_skills, groups) -> RankReport:
    ranker.eval()
    return rank_metrics(score_groups(ranker, cls_map, user_skills, groups))

