"""Recall stage: skill-distribution head, training losses, neighbor search,
cosine candidate recall and Recall@K / NDCG@K evaluation.

The recall objective per batch is::

    sum_j KL(y_j || g(u_j)) + lam * M + mu * sum_j R(tuple_j)

with ``M`` the bidirectional hardest-negative margin loss between the
auxiliary-user embedding and the JD [CLS] embedding, and ``R`` the
relation-consistency KL between pairwise "relation energy" vectors computed
on predictions and on [CLS] embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, DomainError

KL_EPS = 1e-12


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "probs"):
        x = x.probs
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


# --------------------------------------------------------------------------
# Heads
# --------------------------------------------------------------------------


class SkillClassifier(nn.Module):
    """``g``: two fully connected layers ``d -> d -> C`` with a softmax output."""

    def __init__(self, d: int, num_skills: int):
        super().__init__()
        self.hidden = nn.Linear(d, d)
        self.out = nn.Linear(d, num_skills)

    def logits(self, x):
        return self.out(torch.relu(self.hidden(x)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=-1)


class AuxInfoEncoder(nn.Module):
    """One linear layer over ``[one-hot position name, level / max_level]``."""

    def __init__(self, num_position_names: int, d: int, max_level: int = 1):
        super().__init__()
        self.num_position_names = num_position_names
        self.max_level = max(int(max_level), 1)
        self.fc = nn.Linear(num_position_names + 1, d)

    def features(self, position_name_ids, position_levels) -> torch.Tensor:
        ids = torch.as_tensor(position_name_ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.num_position_names):
            raise DomainError("position_name_id outside the position-name vocabulary")
        onehot = F.one_hot(ids, self.num_position_names).to(self.fc.weight.dtype)
        level = torch.as_tensor(position_levels, dtype=self.fc.weight.dtype).unsqueeze(-1) / self.max_level
        return torch.cat([onehot, level], dim=-1)

    def forward(self, position_name_ids, position_levels):
        return self.fc(self.features(position_name_ids, position_levels))


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def kl_distribution_loss(y, p, eps: float = KL_EPS) -> torch.Tensor:
    """``sum_c y_c log(y_c / p_c)`` along the last axis; ``0 log 0 = 0``."""
    p = _t(p)
    y = _t(y, p)
    if y.shape[-1] != p.shape[-1]:
        raise DomainError(f"distribution lengths differ: {y.shape[-1]} vs {p.shape[-1]}")
    log_ratio = torch.log(torch.where(y > 0, y, torch.ones_like(y))) - torch.log(p.clamp_min(eps))
    return torch.where(y > 0, y * log_ratio, torch.zeros_like(y)).sum(dim=-1)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    return an @ bn.transpose(-2, -1)


def skill_correlation_loss(aui, cls, alpha: float = 0.2) -> torch.Tensor:
    """Bidirectional margin loss with the hardest in-batch negative per direction.

    Row ``i`` of ``aui`` matches row ``i`` of ``cls``.  Summed over the batch.
    """
    aui, cls = _t(aui), _t(cls)
    B = aui.shape[0]
    if B < 2:
        raise ContractViolation("skill correlation loss needs a batch of at least 2 pairs")
    sim = cosine_matrix(aui, cls)  # sim[i, j] = s(aui_i, cls_j)
    pos = sim.diagonal()
    off = torch.eye(B, dtype=torch.bool, device=sim.device)
    masked = sim.masked_fill(off, float("-inf"))
    hardest_cls = masked.max(dim=1).values  # s(aui_i, cls_*)
    hardest_aui = masked.max(dim=0).values  # s(aui_*, cls_i)
    return (F.relu(alpha - pos + hardest_cls) + F.relu(alpha - pos + hardest_aui)).sum()


def pairwise_distances(vectors: torch.Tensor, distance: str) -> torch.Tensor:
    """All ordered-pair distances ``(..., n, n)`` for ``vectors`` of shape ``(..., n, k)``."""
    if distance == "kl":
        a, b = torch.broadcast_tensors(vectors.unsqueeze(-2), vectors.unsqueeze(-3))
        return kl_distribution_loss(a, b)  # d[n1, n2] = KL(v_n1 || v_n2)
    if distance == "euclid":
        diff = vectors.unsqueeze(-2) - vectors.unsqueeze(-3)
        return torch.linalg.vector_norm(diff, dim=-1)
    raise DomainError(f"unknown distance {distance!r}")


def relation_energy(vectors, distance: str = "euclid", sign: float = 1.0) -> torch.Tensor:
    """Flat softmax of ``sign * d(n1, n2)`` over all ordered pairs ``n1 != n2``.

    Pairs are ordered row-major: (0,1), (0,2), .., (1,0), (1,2), ...  The
    default ``sign=+1`` weights distant pairs more; ``sign=-1`` gives the
    similarity-style reading.
    """
    vectors = _t(vectors)
    n = vectors.shape[-2]
    if n < 2:
        raise ContractViolation("relation energy needs at least 2 vectors")
    d = pairwise_distances(vectors, distance)
    off = ~torch.eye(n, dtype=torch.bool, device=d.device)
    flat = d[..., off]  # row-major off-diagonal entries
    return torch.softmax(sign * flat, dim=-1)


def relation_consistency_loss(preds, reps, sign: float = 1.0) -> torch.Tensor:
    """KL between relation energies of predictions (KL distance) and representations (euclid)."""
    preds, reps = _t(preds), _t(reps)
    if preds.shape[-2] != reps.shape[-2]:
        raise DomainError(f"tuple sizes differ: {preds.shape[-2]} vs {reps.shape[-2]}")
    q_pred = relation_energy(preds, "kl", sign)
    q_rep = relation_energy(reps, "euclid", sign)
    return kl_distribution_loss(q_pred, q_rep)


@dataclass(frozen=True)
class RecallLossConfig:
    lam: float = 0.2
    mu: float = 0.4
    alpha: float = 0.2
    energy_sign: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise DomainError("lambda and mu must be non-negative")
        if self.alpha <= 0:
            raise DomainError("margin alpha must be positive")


@dataclass
class RecallLoss:
    total: torch.Tensor
    kl: torch.Tensor
    margin: torch.Tensor
    relation: torch.Tensor


def total_recall_loss(targets, preds, cls, aui, config: RecallLossConfig = RecallLossConfig()) -> RecallLoss:
    """Combine the three recall terms for a batch of tuples.

    ``targets`` ``(B, C)``: central ground-truth distributions.
    ``preds`` ``(B, L+1, C)``: predictions for every tuple member (central first).
    ``cls`` ``(B, L+1, d)``: [CLS] embeddings.  ``aui`` ``(B, d)``: aux-info embeddings.
    """
    preds = _t(preds)
    targets, cls, aui = _t(targets, preds), _t(cls, preds), _t(aui, preds)
    kl = kl_distribution_loss(targets, preds[:, 0]).sum()
    zero = kl.new_zeros(())
    margin = skill_correlation_loss(aui, cls[:, 0], config.alpha)
    relation = (
        relation_consistency_loss(preds, cls, config.energy_sign).sum()
        if preds.shape[1] >= 2
        else zero
    )
    total = kl + config.lam * margin + config.mu * relation
    return RecallLoss(total, kl, margin, relation)


# --------------------------------------------------------------------------
# Neighbor selection
# --------------------------------------------------------------------------


class NeighborIndex:
    """Exact same-title nearest-neighbor search over [CLS] embeddings."""

    def __init__(self, jd_ids: Sequence[str], title_ids: Sequence[int], vectors):
        order = np.argsort(np.asarray(jd_ids, dtype=object).astype(str), kind="stable")
        self.ids = np.asarray(jd_ids, dtype=object)[order]
        self.titles = np.asarray(title_ids, dtype=np.int64)[order]
        self.vectors = np.asarray(vectors, dtype=np.float64)[order]
        self._row = {jd_id: i for i, jd_id in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def query(self, title_id: int, vector, L: int, exclude: str | None = None) -> list[str]:
        if len(self.ids) == 0 or (len(self.ids) == 1 and exclude in self._row):
            raise ContractViolation("neighbor pool is empty")
        dist = np.linalg.norm(self.vectors - np.asarray(vector, dtype=np.float64), axis=1)
        other_title = (self.titles != title_id).astype(np.int8)
        # ids are pre-sorted, so the stable lexsort breaks ties by ascending jd_id
        ranking = np.lexsort((dist, other_title))
        if exclude is not None and exclude in self._row:
            ranking = ranking[ranking != self._row[exclude]]
        return [str(x) for x in self.ids[ranking[:L]]]


def select_neighbors(query_title: int, query_vector, pool: Sequence[tuple[str, int, Sequence[float]]], L: int) -> list[str]:
    """The ``L`` nearest same-title entries of ``pool``; shortfalls are filled
    with the nearest other-title entries.  Ties go to the smaller ``jd_id``."""
    if not pool:
        raise ContractViolation("neighbor pool is empty")
    ids, titles, vecs = zip(*pool)
    return NeighborIndex(ids, titles, np.stack([np.asarray(v, dtype=np.float64) for v in vecs])).query(
        query_title, query_vector, L
    )


# --------------------------------------------------------------------------
# Candidate recall and metrics
# --------------------------------------------------------------------------


def cosine_scores(user, preds) -> np.ndarray:
    u = np.asarray(getattr(user, "probs", user), dtype=np.float64)
    P = np.asarray(preds, dtype=np.float64)
    denom = np.linalg.norm(P, axis=-1) * np.linalg.norm(u)
    return (P @ u) / np.maximum(denom, 1e-300)


def rank_order(jd_ids: Sequence[str], scores) -> np.ndarray:
    """Indices sorting by descending score, ties by ascending jd_id."""
    return np.lexsort((np.asarray(jd_ids, dtype=str), -np.asarray(scores, dtype=np.float64)))


def recall_candidates(user, jd_pool_preds: Sequence[tuple[str, object]], K: int) -> list[tuple[str, float]]:
    """Top-``K`` pool JDs by cosine between predicted and user skill distributions."""
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if not jd_pool_preds:
        raise ContractViolation("JD pool is empty")
    ids = [jd_id for jd_id, _ in jd_pool_preds]
    preds = np.stack([np.asarray(getattr(p, "probs", p), dtype=np.float64) for _, p in jd_pool_preds])
    scores = cosine_scores(user, preds)
    order = rank_order(ids, scores)[:K]
    return [(ids[i], float(scores[i])) for i in order]


@dataclass(frozen=True)
class RecallCase:
    user_id: str
    positive: str
    negatives: tuple[str, ...]


@dataclass
class RecallReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    ranks: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "ranks": dict(self.ranks),
        }


def recall_metrics(
    cases: Sequence[RecallCase],
    score_fn: Callable[[str, list[str]], Sequence[float]],
    ks: Sequence[int] = (20, 40, 60, 80, 100),
) -> RecallReport:
    """Recall@K and NDCG@K with a single relevant item per user.

    ``score_fn(user_id, jd_ids)`` returns a score per candidate; candidates
    are ranked by descending score, ties by ascending jd_id.
    """
    ranks = {}
    for case in cases:
        cand = [case.positive, *case.negatives]
        n = len(cand)
        if max(ks) > n:
            raise DomainError(f"K={max(ks)} exceeds the candidate list size {n}")
        order = rank_order(cand, score_fn(case.user_id, cand))
        ranks[case.user_id] = int(np.flatnonzero(order == 0)[0]) + 1
    r = np.array(list(ranks.values()), dtype=np.float64)
    recall, ndcg = {}, {}
    for k in ks:
        hit = r <= k
        recall[k] = float(hit.mean()) if r.size else 0.0
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(1.0 + r), 0.0).mean()) if r.size else 0.0
    return RecallReport(recall, ndcg, ranks)


def cosine_scorer(user_skills: Mapping[str, object], jd_preds: Mapping[str, object]):
    """Score function for :func:`recall_metrics` backed by predicted distributions."""

    def score(user_id, jd_ids):
        preds = np.stack([np.asarray(getattr(jd_preds[j], "probs", jd_preds[j]), dtype=np.float64) for j in jd_ids])
        return cosine_scores(user_skills[user_id], preds)

    return score


def sample_recall_cases(
    positives: Mapping[str, str], pool_ids: Sequence[str], num_negatives: int = 200, seed: int = 0
) -> list[RecallCase]:
    """One case per user: its paired JD plus ``num_negatives`` other pool JDs."""
    pool = np.asarray(sorted(pool_ids), dtype=object)
    if len(pool) - 1 < num_negatives:
        raise DomainError(f"pool of {len(pool)} JDs cannot supply {num_negatives} negatives")
    rng = np.random.default_rng(seed)
    cases = []
    for user_id in sorted(positives):
        pos = positives[user_id]
        picks = rng.choice(len(pool) - 1, size=num_negatives, replace=False)
        others = pool[pool != pos]
        cases.append(RecallCase(user_id, pos, tuple(str(x) for x in others[np.sort(picks)])))
    return cases

