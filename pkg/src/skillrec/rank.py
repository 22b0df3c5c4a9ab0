"""Ranking stage: cross-attention click predictor and AUC / MRR evaluation.

The joint embedding of a JD [CLS] vector ``u`` (width ``d``) and a user
skill vector ``s`` (width ``n``) is::

    Q = u W_Q  (1 x d),  K = s W_K  (1 x n),  V = s W_V  (1 x n)
    A = Q^T K  (d x n),  e = softmax_rows(A) V^T  (d)

with no temperature scaling.  A two-layer head with a sigmoid maps ``e`` to
a click probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from .errors import DomainError

CTR_EPS = 1e-7


class CrossAttentionRanker(nn.Module):
    def __init__(self, d: int, num_skills: int):
        super().__init__()
        self.d = d
        self.num_skills = num_skills
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(num_skills, num_skills, bias=False)
        self.w_v = nn.Linear(num_skills, num_skills, bias=False)
        self.hidden = nn.Linear(d, d)
        self.out = nn.Linear(d, 1)

    def _check(self, jd_cls, user):
        if jd_cls.shape[-1] != self.d:
            raise DomainError(f"JD embedding width {jd_cls.shape[-1]} != {self.d}")
        if user.shape[-1] != self.num_skills:
            raise DomainError(f"user skill vector length {user.shape[-1]} != trained C={self.num_skills}")

    def attention(self, jd_cls, user):
        """``softmax(A_c)`` of shape ``(..., d, n)``."""
        self._check(jd_cls, user)
        q = self.w_q(jd_cls)
        k = self.w_k(user)
        return torch.softmax(q.unsqueeze(-1) * k.unsqueeze(-2), dim=-1)

    def joint_embedding(self, jd_cls, user):
        self._check(jd_cls, user)
        v = self.w_v(user)
        return (self.attention(jd_cls, user) @ v.unsqueeze(-1)).squeeze(-1)

    def logit(self, jd_cls, user):
        e = self.joint_embedding(jd_cls, user)
        return self.out(torch.relu(self.hidden(e))).squeeze(-1)

    def forward(self, jd_cls, user):
        return torch.sigmoid(self.logit(jd_cls, user))


def _as(x, model: nn.Module) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(getattr(x, "probs", x), dtype=np.float64), dtype=dtype)


def joint_embedding(model: CrossAttentionRanker, jd_cls, user) -> torch.Tensor:
    return model.joint_embedding(_as(jd_cls, model), _as(user, model))


def click_probability(model: CrossAttentionRanker, jd_cls, user) -> torch.Tensor:
    return model(_as(jd_cls, model), _as(user, model))


def ctr_loss(probs, labels, eps: float = CTR_EPS) -> torch.Tensor:
    """Summed binary cross-entropy with predictions clamped to ``[eps, 1-eps]``."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=probs.dtype)
    p = probs.clamp(eps, 1.0 - eps)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p)).sum()


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoredCandidate:
    jd_id: str
    score: float
    label: int


@dataclass
class RankReport:
    auc: float
    mrr: float
    per_user_auc: dict[str, float] = field(default_factory=dict)
    excluded_from_mrr: list[str] = field(default_factory=list)
    num_users: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mrr": self.mrr,
            "num_users": self.num_users,
            "per_user_auc": dict(self.per_user_auc),
            "excluded_from_mrr": list(self.excluded_from_mrr),
        }


def pairwise_auc(scores, labels) -> float:
    """Probability a positive outscores a negative; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks implement the half-credit tie rule
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def first_positive_rank(group: Sequence[ScoredCandidate]) -> int | None:
    ids = [c.jd_id for c in group]
    order = np.lexsort((np.asarray(ids, dtype=str), -np.asarray([c.score for c in group], dtype=np.float64)))
    for pos, idx in enumerate(order, 1):
        if group[idx].label == 1:
            return pos
    return None


def rank_metrics(groups: Mapping[str, Sequence[ScoredCandidate]]) -> RankReport:
    """Pooled AUC over every (positive, negative) pair across users, and MRR
    of the first positive per user (descending score, ties by jd_id)."""
    all_scores, all_labels = [], []
    per_user, rr, excluded = {}, [], []
    for user_id in sorted(groups):
        group = list(groups[user_id])
        scores = [c.score for c in group]
        labels = [c.label for c in group]
        all_scores += scores
        all_labels += labels
        auc_u = pairwise_auc(scores, labels)
        if not np.isnan(auc_u):
            per_user[user_id] = auc_u
        r = first_positive_rank(group)
        if r is None:
            excluded.append(user_id)
        else:
            rr.append(1.0 / r)
    return RankReport(
        auc=pairwise_auc(all_scores, all_labels),
        mrr=float(np.mean(rr)) if rr else float("nan"),
        per_user_auc=per_user,
        excluded_from_mrr=excluded,
        num_users=len(groups),
    )


def expected_random_mrr(group_sizes: Iterable[tuple[int, int]]) -> float:
    """Mean over groups of E[1 / rank of first positive] under a uniformly random order.

    ``group_sizes`` yields ``(n_candidates, n_positives)``.  For one group,
    ``P(first positive at r) = C(n - r, k - 1) / C(n, k)``.
    """
    from math import comb

    vals = []
    for n, k in group_sizes:
        if k < 1:
            continue
        total = comb(n, k)
        vals.append(sum(comb(n - r, k - 1) / total / r for r in range(1, n - k + 2)))
    return float(np.mean(vals)) if vals else float("nan")
