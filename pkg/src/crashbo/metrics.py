"""Benchmark metrics: regret, quantiles, average rank and a one-sided rank-sum test.

Best-so-far curves are ``inf`` until the first successful evaluation, so
regrets of runs that never succeeded stay infinite and rank last.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from scipy.stats import mannwhitneyu, rankdata

EXACT_LIMIT = 16


class DegenerateProblem(ValueError):
    """Scaled regret is undefined (random search already at the known best)."""


def best_so_far(values, crashed=None) -> np.ndarray:
    """Running minimum of successful objectives (``inf`` before the first)."""
    v = np.asarray(values, dtype=float).copy()
    if crashed is not None:
        v[np.asarray(crashed, dtype=bool)] = np.inf
    v[np.isnan(v)] = np.inf
    return np.minimum.accumulate(v) if v.size else v


def simple_regret(curve, known_best: float) -> np.ndarray:
    return np.asarray(curve, dtype=float) - known_best


def rand_reference(curves: dict, known_best: float, k: int, rand_id: str = "Rand") -> float:
    """Median random-search regret after ``k`` evaluations."""
    rand = [c for (opt, _), c in curves.items() if opt == rand_id]
    if not rand:
        raise ValueError(f"no {rand_id} traces to normalize by")
    if any(len(c) < k for c in rand):
        raise ValueError(f"{rand_id} traces shorter than {k} evaluations")
    regrets = [simple_regret(c, known_best)[k - 1] for c in rand]
    ref = float(np.median(regrets))
    if not (ref > 0 and math.isfinite(ref)):
        raise DegenerateProblem(f"median random-search regret at k={k} is {ref}")
    return ref


def scaled_regret(curves: dict, known_best: float, d: int, budget_multiplier: int = 25,
                  rand_id: str = "Rand") -> dict:
    """Scale every best-so-far curve by the median random-search regret at ``m d``.

    ``curves`` maps ``(optimizer, seed)`` to best-so-far arrays of one problem.
    """
    ref = rand_reference(curves, known_best, budget_multiplier * d, rand_id)
    return {key: simple_regret(c, known_best) / ref for key, c in curves.items()}


def quantile(values, q: float) -> float:
    """Linear interpolation between order statistics at position ``(n - 1) q``."""
    x = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    h = (x.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, x.size - 1)
    frac = h - lo
    if frac == 0.0 or x[lo] == x[hi]:
        return float(x[lo])
    if math.isinf(x[hi]):
        return float(x[hi])
    return float(x[lo] + frac * (x[hi] - x[lo]))


def average_rank(best_at_budget: dict) -> dict:
    """Mean rank per optimizer; ``best_at_budget[(problem, optimizer, seed)]``.

    Ranks are assigned per (problem, seed) with ties sharing their mean rank,
    averaged over seeds and then over problems.
    """
    problems = sorted({p for p, _, _ in best_at_budget})
    optimizers = sorted({o for _, o, _ in best_at_budget})
    missing = []
    per_problem = defaultdict(list)
    for p in problems:
        seeds = sorted({s for q, _, s in best_at_budget if q == p})
        for s in seeds:
            cell = []
            for o in optimizers:
                if (p, o, s) not in best_at_budget:
                    missing.append((p, o, s))
                else:
                    cell.append(best_at_budget[(p, o, s)])
            if len(cell) == len(optimizers):
                per_problem[p].append(rankdata(np.asarray(cell, dtype=float), method="average"))
    if missing:
        raise ValueError(f"missing cells: {missing}")
    if not per_problem:
        raise ValueError("no results to rank")
    by_problem = np.array([np.mean(per_problem[p], axis=0) for p in problems])
    return dict(zip(optimizers, by_problem.mean(axis=0)))


def wilcoxon_one_sided(a, b, method: str = "auto") -> float:
    """p-value for "a tends to be smaller than b" (unpaired rank-sum test).

    ``method`` is ``"auto"``, ``"exact"`` or ``"normal"``.  Exact enumeration is
    used automatically for at most 16 observations without ties.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size < 3 or b.size < 3:
        raise ValueError("need at least three observations per sample")
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("samples contain NaN")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 0.5
    ties = np.unique(pooled).size < pooled.size
    if method == "exact" or (method == "auto" and pooled.size <= EXACT_LIMIT and not ties):
        if ties:
            raise ValueError("exact test requires untied samples")
        method = "exact"
    elif method in ("auto", "normal"):
        method = "asymptotic"
    else:
        raise ValueError(f"unknown method {method!r}")
    # continuity- and tie-corrected normal approximation in the asymptotic case
    res = mannwhitneyu(a, b, alternative="less", method=method, use_continuity=True)
    return float(min(1.0, max(0.0, res.pvalue)))
