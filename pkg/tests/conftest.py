"""Shared fixtures and the acceptance-criteria summary.

Acceptance tests call ``acceptance(name, passed, detail)``; every recorded
criterion is printed as one PASS/FAIL line at the end of the session.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from skillrec.core import AuxUserInfo, PersonJobRecord, SkillDistribution, UserProfile, Vocabulary, make_jd
from skillrec.training import seed_everything

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(autouse=True)
def _deterministic():
    seed_everything(0, threads=1)
    yield


@pytest.fixture
def acceptance():
    def record(name: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_records(n: int = 6, C: int = 4, seed: int = 0):
    """Small hand-made records: two titles, a few items per JD."""
    r = np.random.default_rng(seed)
    texts = [f"skill{c} tool{c} practice" for c in range(C)]
    vocab = Vocabulary.build(texts)
    records = []
    for i in range(n):
        raw = [texts[int(k)] for k in r.integers(0, C, size=int(r.integers(1, 4)))]
        jd = make_jd(f"jd{i:02d}", i % 2, raw, vocab)
        probs = r.dirichlet(np.ones(C))
        profile = UserProfile(f"u{i:02d}", SkillDistribution(probs), AuxUserInfo(i % 2, int(r.integers(0, 3))))
        records.append(PersonJobRecord(jd, profile))
    return records, vocab


def fd_max_rel_error(
    loss_fn, params, n_coords: int = 50, step: float = 1e-6, seed: int = 0, floor: float = 1e-8, frozen=(),
    pattern_fn=None,
):
    """Largest relative error between autograd and central differences.

    ``params`` is a list of float64 tensors with ``requires_grad``; ``n_coords``
    coordinates are drawn uniformly over all of them, skipping the
    ``(param_index, flat_index)`` pairs in ``frozen`` (entries whose gradient
    is zeroed by design, such as the padding embedding).

    ``pattern_fn`` returns the discrete activation pattern (ReLU signs,
    max-pool winners) of a piecewise-smooth model.  A coordinate whose
    ``+-step`` stencil changes the pattern straddles a kink where central
    differences are meaningless; it is replaced by the next random
    coordinate.  Returns ``(max_rel_error, n_checked, n_resampled)``.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
    sizes = np.array([p.numel() for p in params])
    gen = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    skip = {int(offsets[k] + i) for k, i in frozen}
    allowed = np.setdiff1d(np.arange(int(sizes.sum())), np.fromiter(skip, dtype=np.int64, count=len(skip)))
    candidates = gen.permutation(allowed)
    worst, checked, resampled = 0.0, 0, 0
    with torch.no_grad():
        for fid in candidates:
            if checked == n_coords:
                break
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[k])
            p = params[k].view(-1)  # params are contiguous leaves
            orig = p[idx].item()
            base = pattern_fn() if pattern_fn else None
            p[idx] = orig + step
            up = loss_fn().item()
            kink = pattern_fn is not None and not _same_pattern(base, pattern_fn())
            p[idx] = orig - step
            down = loss_fn().item()
            kink = kink or (pattern_fn is not None and not _same_pattern(base, pattern_fn()))
            p[idx] = orig
            if kink:
                resampled += 1
                continue
            numeric = (up - down) / (2 * step)
            analytic = grads[k].reshape(-1)[idx].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked, resampled


def _same_pattern(a, b) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))
