"""Invariant and gradient checks shared by the module tests and the
acceptance summary.  Each check returns a small result object; module tests
assert on it, the acceptance suite aggregates them."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from skillrec.core import TokenizedItem, normalize_ratings
from skillrec.item_encoder import ItemEncoder, collate_items
from skillrec.rank import CrossAttentionRanker, ScoredCandidate, ctr_loss, rank_metrics
from skillrec.recall import (
    AuxInfoEncoder,
    RecallCase,
    RecallLossConfig,
    SkillClassifier,
    kl_distribution_loss,
    recall_metrics,
    relation_energy,
    select_neighbors,
    skill_correlation_loss,
    total_recall_loss,
)
from skillrec.training import init_params
from skillrec.transformer import SETransformer

from conftest import fd_max_rel_error


@dataclass
class Result:
    name: str
    ok: bool
    value: float
    seconds: float = 0.0

    def __str__(self):
        return f"{self.name}: {'ok' if self.ok else 'FAILED'} (value={self.value:.3g}, {self.seconds:.2f}s)"


def _timed(name, fn, tol, *, at_least=False):
    t0 = time.perf_counter()
    value = float(fn())
    ok = value >= tol if at_least else value <= tol
    return Result(name, ok, value, time.perf_counter() - t0)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def toy_tuple(B=2, J=3, M=4, d=8, seed=0, dtype=torch.float64):
    g = _gen(seed)
    mats = torch.randn(B, J, M, d, generator=g, dtype=dtype)
    lengths = torch.randint(1, M + 1, (B, J), generator=g)
    mask = torch.arange(M)[None, None, :] < lengths[..., None]
    return mats * mask[..., None], mask


def toy_transformer(d=8, n_local=1, n_global=1, layers=2, seed=0):
    return init_params(SETransformer(d, layers, n_local, n_global, dropout=0.0), seed).double().eval()


# --------------------------------------------------------------------------
# softmax normalization
# --------------------------------------------------------------------------


def attention_rows_sum_deviation(d=8):
    tr = toy_transformer(d)
    mats, mask = toy_tuple(d=d)
    _, atts = tr(mats, mask, return_attention=True)
    return max((w.sum(-1) - 1).abs().max().item() for w in atts)


def relation_energy_sum_deviation(d=8, seed=0):
    g = _gen(seed)
    worst = 0.0
    for n in (2, 3, 5):
        v = torch.randn(n, d, generator=g, dtype=torch.float64)
        p = torch.softmax(torch.randn(n, 6, generator=g, dtype=torch.float64), -1)
        worst = max(worst, abs(relation_energy(v, "euclid").sum().item() - 1), abs(relation_energy(p, "kl").sum().item() - 1))
    return worst


def ranker_attention_sum_deviation(d=8, n=5, seed=0):
    r = init_params(CrossAttentionRanker(d, n), seed).double()
    g = _gen(seed)
    a = r.attention(torch.randn(7, d, generator=g, dtype=torch.float64), torch.rand(7, n, generator=g, dtype=torch.float64))
    return (a.sum(-1) - 1).abs().max().item()


def classifier_sum_deviation(d=8, C=6, seed=0):
    g = init_params(SkillClassifier(d, C), seed).double()
    x = torch.randn(10, d, generator=_gen(seed), dtype=torch.float64)
    return (g(x).sum(-1) - 1).abs().max().item()


def normalize_ratings_sum_deviation(seed=0):
    r = np.random.default_rng(seed)
    return max(abs(normalize_ratings(r.uniform(-50, 50, size=int(r.integers(1, 40)))).array.sum() - 1) for _ in range(500))


# --------------------------------------------------------------------------
# masking isolation and padding invariance
# --------------------------------------------------------------------------


def local_isolation_deviation(d=8):
    """With no global heads the central [CLS] must ignore neighbor contents."""
    tr = toy_transformer(d, n_local=2, n_global=0)
    mats, mask = toy_tuple(d=d)
    base = tr(mats, mask)[:, 0, 0]
    other = mats.clone()
    other[:, 1:] = torch.randn(other[:, 1:].shape, generator=_gen(9), dtype=torch.float64) * 5
    other = other * mask[..., None]
    return (tr(other, mask)[:, 0, 0] - base).abs().max().item()  # expected bit-identical: 0.0


def padded_keys_weight(d=8):
    tr = toy_transformer(d)
    mats, mask = toy_tuple(d=d)
    _, atts = tr(mats, mask, return_attention=True)
    B, J, M = mask.shape
    valid = torch.cat([torch.ones(B, J, 1, dtype=torch.bool), mask, torch.ones(B, J, 1, dtype=torch.bool)], 2).reshape(B, -1)
    return max(w[..., ~valid[0]][0].abs().max().item() if (~valid[0]).any() else 0.0 for w in atts)


def transformer_padding_deviation(d=8):
    """Extra all-padding item rows leave every real position's output unchanged."""
    tr = toy_transformer(d)
    mats, mask = toy_tuple(d=d, M=3)
    B, J, M, _ = mats.shape
    out = tr(mats, mask)
    extra = torch.cat([mats, torch.randn(B, J, 4, d, dtype=torch.float64)], 2)
    extra_mask = torch.cat([mask, torch.zeros(B, J, 4, dtype=torch.bool)], 2)
    out2 = tr(extra, extra_mask)[:, :, : M + 1]
    keep = torch.cat([torch.ones(B, J, 1, dtype=torch.bool), mask], 2)
    return (out - out2)[keep].abs().max().item()


def _frozen_encoder(d=8, vocab=20, seed=0):
    enc = init_params(ItemEncoder(vocab, d), seed).double()
    with torch.no_grad():
        for norm in enc.norms:
            norm.running_mean.normal_(0, 0.1, generator=_gen(seed + 1))
            norm.running_var.uniform_(0.5, 1.5, generator=_gen(seed + 2))
    return enc.eval()


def repeated_token_length_deviation(d=8, vocab=20):
    enc = _frozen_encoder(d, vocab)
    worst = 0.0
    with torch.no_grad():
        for tok in range(2, vocab):
            outs = enc.encode_items([TokenizedItem((tok,) * n) for n in range(3, 9)])
            worst = max(worst, (outs - outs[0]).abs().max().item())
    return worst


def maxpool_monotonicity_violation(d=8, vocab=20, trials=200, seed=0):
    """Largest decrease of any pooled activation when a token is appended (batch norm frozen)."""
    enc = _frozen_encoder(d, vocab, seed)
    r = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(trials):
            base = tuple(int(t) for t in r.integers(1, vocab, size=int(r.integers(1, 6))))
            longer = base + (int(r.integers(1, vocab)),)
            p = enc.pooled(collate_items([base, longer]))
            worst = max(worst, (p[0] - p[1]).clamp_min(0).max().item())
    return worst


# --------------------------------------------------------------------------
# permutation equivariance
# --------------------------------------------------------------------------


def neighbor_permutation_deviation(d=8):
    tr = toy_transformer(d, n_local=1, n_global=1)
    mats, mask = toy_tuple(J=4, d=d)
    out = tr(mats, mask)
    perm = [0, 3, 1, 2]
    out_p = tr(mats[:, perm], mask[:, perm])
    return (out_p - out[:, perm]).abs().max().item()


def relation_energy_permutation_deviation(d=8, seed=0):
    g = _gen(seed)
    n = 4
    v = torch.randn(n, d, generator=g, dtype=torch.float64)
    perm = [2, 0, 3, 1]
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    idx = {p: i for i, p in enumerate(pairs)}
    q = relation_energy(v, "euclid")
    q_p = relation_energy(v[perm], "euclid")
    # pair (i, j) of the permuted input is pair (perm[i], perm[j]) of the original
    expected = torch.stack([q[idx[(perm[a], perm[b])]] for a, b in pairs])
    return (q_p - expected).abs().max().item()


def neighbor_pool_order_mismatches(trials=200, seed=0):
    r = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n = int(r.integers(2, 9))
        pool = [(f"j{i}", int(r.integers(0, 2)), r.integers(-3, 4, size=2).astype(float)) for i in range(n)]
        q = r.integers(-3, 4, size=2).astype(float)
        L = int(r.integers(1, n + 1))
        a = select_neighbors(0, q, pool, L)
        b = select_neighbors(0, q, [pool[i] for i in r.permutation(n)], L)
        bad += a != b
    return bad


# --------------------------------------------------------------------------
# metric monotonicity and score-transform invariance
# --------------------------------------------------------------------------


def recall_k_monotonicity_violations(trials=100, seed=0):
    r = np.random.default_rng(seed)
    bad = 0
    ks = list(range(1, 21))
    for _ in range(trials):
        cases = [RecallCase(f"u{u}", "p", tuple(f"n{i:02d}" for i in range(19))) for u in range(5)]
        table = {c.user_id: r.integers(0, 5, size=20).astype(float) for c in cases}
        rep = recall_metrics(cases, lambda u, ids: table[u], ks)
        rec = [rep.recall[k] for k in ks]
        nd = [rep.ndcg[k] for k in ks]
        bad += int(np.any(np.diff(rec) < 0) or np.any(np.diff(nd) < -1e-15))
    return bad


def rank_transform_deviation(trials=100, seed=0):
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        groups = {}
        for u in range(4):
            n = int(r.integers(2, 8))
            labels = r.integers(0, 2, size=n)
            labels[0], labels[1] = 1, 0
            scores = r.integers(0, 4, size=n) / 4.0
            groups[f"u{u}"] = [ScoredCandidate(f"j{i}", float(s), int(lab)) for i, (s, lab) in enumerate(zip(scores, labels))]
        base = rank_metrics(groups)
        warped = {u: [ScoredCandidate(c.jd_id, float(np.exp(3 * c.score) - 7), c.label) for c in g] for u, g in groups.items()}
        other = rank_metrics(warped)
        worst = max(worst, abs(base.auc - other.auc), abs(base.mrr - other.mrr))
    return worst


# --------------------------------------------------------------------------
# loss reduction
# --------------------------------------------------------------------------


def _toy_loss_inputs(B=3, J=3, C=5, d=6, seed=0):
    g = _gen(seed)
    targets = torch.softmax(torch.randn(B, C, generator=g, dtype=torch.float64), -1)
    preds = torch.softmax(torch.randn(B, J, C, generator=g, dtype=torch.float64), -1)
    cls = torch.randn(B, J, d, generator=g, dtype=torch.float64)
    aui = torch.randn(B, d, generator=g, dtype=torch.float64)
    return targets, preds, cls, aui


def loss_reduction_deviation(seed=0):
    targets, preds, cls, aui = _toy_loss_inputs(seed=seed)
    total = total_recall_loss(targets, preds, cls, aui, RecallLossConfig(lam=0.0, mu=0.0)).total
    expected = sum(kl_distribution_loss(targets[b], preds[b, 0]) for b in range(targets.shape[0]))
    return abs(total.item() - expected.item())


def correlation_scale_deviation(seed=0):
    g = _gen(seed)
    aui, cls = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
    scale = torch.rand(4, 1, generator=g, dtype=torch.float64) * 10 + 0.1
    base = skill_correlation_loss(aui, cls, 0.2).item()
    return max(
        abs(skill_correlation_loss(aui * scale, cls, 0.2).item() - base),
        abs(skill_correlation_loss(aui, cls * scale, 0.2).item() - base),
    )


INVARIANTS = {
    # name -> (function, tolerance)
    "softmax: attention rows": (attention_rows_sum_deviation, 1e-6),
    "softmax: relation energy": (relation_energy_sum_deviation, 1e-6),
    "softmax: ranker cross-attention rows": (ranker_attention_sum_deviation, 1e-6),
    "softmax: skill classifier": (classifier_sum_deviation, 1e-9),
    "softmax: normalized ratings": (normalize_ratings_sum_deviation, 1e-9),
    "masking: local heads isolate the central JD": (local_isolation_deviation, 0.0),
    "masking: padded keys get zero weight": (padded_keys_weight, 0.0),
    "padding: extra padded items": (transformer_padding_deviation, 1e-6),
    "padding: repeated-token item length >= 3": (repeated_token_length_deviation, 1e-6),
    "padding: max-pool monotone under appending": (maxpool_monotonicity_violation, 1e-6),
    "permutation: neighbor order": (neighbor_permutation_deviation, 1e-6),
    "permutation: relation energy pairs": (relation_energy_permutation_deviation, 1e-12),
    "permutation: neighbor pool order": (neighbor_pool_order_mismatches, 0),
    "metric: Recall/NDCG monotone in K": (recall_k_monotonicity_violations, 0),
    "metric: AUC/MRR under increasing transforms": (rank_transform_deviation, 1e-12),
    "loss: lambda=mu=0 reduces to KL sum": (loss_reduction_deviation, 0.0),
    "loss: margin loss row-scale invariance": (correlation_scale_deviation, 1e-6),
}


def run_invariant(name, d=8):
    fn, tol = INVARIANTS[name]
    kwargs = {"d": d} if "d" in fn.__code__.co_varnames[: fn.__code__.co_argcount] else {}
    return _timed(name, lambda: fn(**kwargs), tol)


# --------------------------------------------------------------------------
# gradient checks (float64, central differences)
# --------------------------------------------------------------------------

GRAD_TOL = 1e-4


def grad_item_encoder(n_coords=50):
    """d=8, vocab=20, step 1e-3; train-mode batch norm."""
    enc = init_params(ItemEncoder(20, 8), 3).double().train()
    items = [(2, 5, 7), (9,), (3, 3, 11, 4, 18), (6, 15)]
    batch = collate_items(items)
    w = torch.randn(len(items), 8, generator=_gen(4), dtype=torch.float64)

    def loss():
        return (enc(batch) * w).sum()

    def pattern():
        acts = enc.branch_activations(batch)
        return [t for h in acts for t in (h > 0, h.argmax(dim=2))]

    params = list(enc.parameters())
    pad_row = [(0, i) for i in range(8)]  # embedding row 0 is the fixed padding vector
    assert params[0] is enc.embedding.weight
    return fd_max_rel_error(loss, params, n_coords, step=1e-3, seed=0, frozen=pad_row, pattern_fn=pattern)


def grad_transformer(n_coords=50):
    """d=8, one local + one global head, 1 layer, M=3, L=1."""
    tr = toy_transformer(d=8, n_local=1, n_global=1, layers=1, seed=5)
    mats, mask = toy_tuple(B=2, J=2, M=3, d=8, seed=6)
    mats.requires_grad_(True)
    w = torch.randn(2, 2, 4, 8, generator=_gen(7), dtype=torch.float64)

    def loss():
        return (tr(mats, mask) * w).sum()

    return fd_max_rel_error(loss, [*tr.parameters(), mats], n_coords, step=1e-6, seed=1)


def grad_recall_loss(n_coords=50):
    """All three recall terms through the classifier g and the aux-info encoder."""
    B, J, C, d = 3, 3, 4, 6
    g = init_params(SkillClassifier(d, C), 8).double()
    aux = init_params(AuxInfoEncoder(3, d, 2), 9).double()
    gen = _gen(10)
    cls = torch.randn(B, J, d, generator=gen, dtype=torch.float64, requires_grad=True)
    targets = torch.softmax(torch.randn(B, C, generator=gen, dtype=torch.float64), -1)
    ids, lvls = torch.tensor([0, 2, 1]), torch.tensor([0.0, 1.0, 2.0])
    cfg = RecallLossConfig(lam=0.2, mu=0.4, alpha=0.2)

    def loss():
        return total_recall_loss(targets, g(cls), cls, aux(ids, lvls), cfg).total

    return fd_max_rel_error(loss, [*g.parameters(), *aux.parameters(), cls], n_coords, step=1e-6, seed=2)


def grad_recall_terms(n_coords=50):
    """Each of the three terms separately, so none can hide behind another."""
    B, J, C, d = 3, 3, 4, 6
    g = init_params(SkillClassifier(d, C), 11).double()
    aux = init_params(AuxInfoEncoder(3, d, 2), 12).double()
    gen = _gen(13)
    cls = torch.randn(B, J, d, generator=gen, dtype=torch.float64, requires_grad=True)
    targets = torch.softmax(torch.randn(B, C, generator=gen, dtype=torch.float64), -1)
    ids, lvls = torch.tensor([0, 2, 1]), torch.tensor([0.0, 1.0, 2.0])
    params = [*g.parameters(), *aux.parameters(), cls]
    out = {}
    for term in ("kl", "margin", "relation"):
        def loss(term=term):
            return getattr(total_recall_loss(targets, g(cls), cls, aux(ids, lvls)), term)

        out[term] = fd_max_rel_error(loss, params, n_coords, step=1e-6, seed=3)
    return out


def grad_ranker(n_coords=50):
    """d=6, n=4, through the joint embedding, click head and summed BCE."""
    r = init_params(CrossAttentionRanker(6, 4), 14).double()
    gen = _gen(15)
    u = torch.randn(5, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    s = torch.softmax(torch.randn(5, 4, generator=gen, dtype=torch.float64), -1)
    labels = torch.tensor([1.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)

    def loss():
        return ctr_loss(r(u, s), labels)

    return fd_max_rel_error(loss, [*r.parameters(), u], n_coords, step=1e-6, seed=4)



# --------------------------------------------------------------------------
# brute-force metric oracles
# --------------------------------------------------------------------------


def _brute_rank(pos_id, pos_score, others):
    """1 + number of candidates placed before the positive (higher score, or tie with smaller id)."""
    return 1 + sum(1 for j, s in others if s > pos_score or (s == pos_score and j < pos_id))


def recall_oracle_mismatches(trials=1000, seed=0):
    """Recall@K / NDCG@K against direct enumeration on <= 10 users x <= 10 candidates."""
    r = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        n_users, n_cand = int(r.integers(1, 11)), int(r.integers(2, 11))
        ids = [f"j{i}" for i in r.permutation(n_cand)]
        cases, table = [], {}
        for u in range(n_users):
            pos = ids[int(r.integers(n_cand))]
            negs = tuple(j for j in ids if j != pos)
            cases.append(RecallCase(f"u{u}", pos, negs))
            table[f"u{u}"] = dict(zip(ids, r.integers(0, 4, size=n_cand) / 2.0))
        ks = sorted({int(k) for k in r.integers(1, n_cand + 1, size=3)})
        rep = recall_metrics(cases, lambda u, cand: [table[u][j] for j in cand], ks)
        ranks = {
            c.user_id: _brute_rank(c.positive, table[c.user_id][c.positive], [(j, table[c.user_id][j]) for j in c.negatives])
            for c in cases
        }
        ok = rep.ranks == ranks
        for k in ks:
            hits = [1.0 if ranks[c.user_id] <= k else 0.0 for c in cases]
            gains = [1.0 / np.log2(1.0 + ranks[c.user_id]) if ranks[c.user_id] <= k else 0.0 for c in cases]
            ok &= abs(rep.recall[k] - sum(hits) / len(cases)) <= 1e-12
            ok &= abs(rep.ndcg[k] - sum(gains) / len(cases)) <= 1e-12
        bad += not ok
    return bad


def rank_oracle_mismatches(trials=1000, seed=0):
    """Pooled AUC (ties count 1/2) and first-positive MRR against direct enumeration."""
    r = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        groups = {}
        for u in range(int(r.integers(1, 11))):
            n = int(r.integers(2, 11))
            labels = r.integers(0, 2, size=n)
            labels[r.integers(n)] = 1
            if labels.all():
                labels[(np.flatnonzero(labels)[0] + 1) % n] = 0
            scores = r.integers(0, 5, size=n) / 4.0
            ids = [f"j{i}" for i in r.permutation(n)]
            groups[f"u{u}"] = [ScoredCandidate(j, float(s), int(lab)) for j, s, lab in zip(ids, scores, labels)]
        rep = rank_metrics(groups)
        pooled = [c for g in groups.values() for c in g]
        pos = [c.score for c in pooled if c.label == 1]
        neg = [c.score for c in pooled if c.label == 0]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        auc = wins / (len(pos) * len(neg))
        rr = []
        for g in groups.values():
            ordered = sorted(g, key=lambda c: (-c.score, c.jd_id))
            rr.append(1.0 / next(i for i, c in enumerate(ordered, 1) if c.label == 1))
        mrr = sum(rr) / len(rr)
        bad += not (rep.auc == auc and abs(rep.mrr - mrr) <= 1e-12)
    return bad
