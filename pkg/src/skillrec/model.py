"""Recall model assembly and pool-level embedding with test-time neighbors."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import DEFAULT_MAX_ITEMS, JobDescription
from .errors import ConfigError
from .item_encoder import ItemEncoder, collate_items
from .recall import AuxInfoEncoder, NeighborIndex, SkillClassifier
from .transformer import SETransformer


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_skills: int
    num_position_names: int
    max_level: int = 1
    d: int = 512
    num_layers: int = 4
    n_local: int = 6
    n_global: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    max_items: int = DEFAULT_MAX_ITEMS
    num_neighbors: int = 2

    def __post_init__(self):
        n = self.n_local + self.n_global
        if n < 1 or self.d % n:
            raise ConfigError(f"d={self.d} must be divisible by n_local + n_global = {n}")
        if self.n_local < 0 or self.n_global < 0:
            raise ConfigError("head counts must be non-negative")
        if self.num_neighbors < 0 or self.max_items < 1:
            raise ConfigError("num_neighbors must be >= 0 and max_items >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class JDStore:
    """Token ids of every JD, truncated to ``max_items``, keyed by jd_id."""

    def __init__(self, jds: Mapping[str, JobDescription], max_items: int):
        self.max_items = max_items
        self.jds = dict(jds)
        self.items = {jd_id: [it.token_ids for it in jd.items[:max_items]] for jd_id, jd in self.jds.items()}

    def __contains__(self, jd_id):
        return jd_id in self.items

    def item_matrices(self, encoder: ItemEncoder, jd_ids: Sequence[str]):
        """Encode the items of ``jd_ids`` in one batch; returns ``(n, M, d)`` and ``(n, M)`` mask."""
        flat, counts = [], []
        for jd_id in jd_ids:
            its = self.items[jd_id]
            flat.extend(its)
            counts.append(len(its))
        enc = encoder(collate_items(flat, encoder.windows))
        n, M = len(jd_ids), self.max_items
        out = enc.new_zeros(n, M, enc.shape[-1])
        mask = torch.zeros(n, M, dtype=torch.bool)
        rows = torch.repeat_interleave(torch.arange(n), torch.as_tensor(counts))
        cols = torch.cat([torch.arange(c) for c in counts])
        out = out.index_put((rows, cols), enc)
        mask[rows, cols] = True
        return out, mask


class RecallModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.item_encoder = ItemEncoder(config.vocab_size, config.d)
        self.transformer = SETransformer(
            config.d, config.num_layers, config.n_local, config.n_global, config.d_ff, config.dropout
        )
        self.classifier = SkillClassifier(config.d, config.num_skills)
        self.aux_encoder = AuxInfoEncoder(config.num_position_names, config.d, config.max_level)

    def encode_tuples(self, store: JDStore, tuples: Sequence[Sequence[str]], return_attention: bool = False):
        """Encode a batch of equal-size tuples (central first).

        Returns ``(cls (B, J, d), preds (B, J, C), reps (B, J, M+1, d))`` and
        optionally the per-layer attention weights.
        """
        J = len(tuples[0])
        uniq = list(dict.fromkeys(j for t in tuples for j in t))
        pos = {j: i for i, j in enumerate(uniq)}
        mats, mask = store.item_matrices(self.item_encoder, uniq)
        idx = torch.as_tensor([[pos[j] for j in t] for t in tuples])
        item_mats, item_mask = mats[idx], mask[idx]
        result = self.transformer(item_mats, item_mask, return_attention=return_attention)
        reps, att = result if return_attention else (result, None)
        cls = reps[:, :, 0]
        preds = self.classifier(cls)
        assert preds.shape[1] == J
        if return_attention:
            return cls, preds, reps, att, item_mask
        return cls, preds, reps


@dataclass
class PoolEmbedding:
    """Eval-mode [CLS] embeddings and skill predictions for a JD pool."""

    jd_ids: list[str]
    cls: np.ndarray
    preds: np.ndarray
    neighbors: dict[str, list[str]]

    def pred_map(self) -> dict[str, np.ndarray]:
        return dict(zip(self.jd_ids, self.preds))

    def cls_map(self) -> dict[str, np.ndarray]:
        return dict(zip(self.jd_ids, self.cls))


@torch.no_grad()
def standalone_embeddings(model: RecallModel, store: JDStore, jd_ids: Sequence[str], chunk: int = 256) -> np.ndarray:
    """[CLS] embeddings of JDs encoded alone (single-member tuples); used for neighbor search."""
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(jd_ids), chunk):
        cls, _, _ = model.encode_tuples(store, [[j] for j in jd_ids[s:s + chunk]])
        out.append(cls[:, 0].double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.d))


def build_neighbor_index(model: RecallModel, store: JDStore, train_ids: Sequence[str]) -> tuple[NeighborIndex, dict]:
    vecs = standalone_embeddings(model, store, list(train_ids))
    index = NeighborIndex(list(train_ids), [store.jds[j].title_id for j in train_ids], vecs)
    return index, dict(zip(train_ids, vecs))


def assign_neighbors(
    model: RecallModel, store: JDStore, query_ids: Sequence[str], train_ids: Sequence[str], L: int
) -> dict[str, list[str]]:
    """Neighbors from ``train_ids`` for every query JD (never the JD itself)."""
    if L == 0:
        return {j: [] for j in query_ids}
    index, known = build_neighbor_index(model, store, train_ids)
    missing = [j for j in query_ids if j not in known]
    if missing:
        known.update(zip(missing, standalone_embeddings(model, store, missing)))
    return {j: index.query(store.jds[j].title_id, known[j], L, exclude=j) for j in query_ids}


@torch.no_grad()
def embed_pool(
    model: RecallModel,
    store: JDStore,
    jd_ids: Sequence[str],
    train_ids: Sequence[str],
    chunk: int = 256,
    neighbors: dict[str, list[str]] | None = None,
) -> PoolEmbedding:
    """Encode every JD as the center of a tuple whose neighbors come from ``train_ids``."""
    was_training = model.training
    model.eval()
    jd_ids = list(jd_ids)
    if neighbors is None:
        neighbors = assign_neighbors(model, store, jd_ids, train_ids, model.config.num_neighbors)
    cls_out, pred_out = [], []
    for s in range(0, len(jd_ids), chunk):
        tuples = [[j, *neighbors[j]] for j in jd_ids[s:s + chunk]]
        cls, preds, _ = model.encode_tuples(store, tuples)
        cls_out.append(cls[:, 0].double().numpy())
        pred_out.append(preds[:, 0].double().numpy())
    model.train(was_training)
    return PoolEmbedding(jd_ids, np.concatenate(cls_out), np.concatenate(pred_out), neighbors)
