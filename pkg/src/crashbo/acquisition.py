"""Acquisition functions (EI, UCB, MES) for minimization and their maximization.

Every acquisition is exposed to the optimizer as a *utility* to be maximized:
EI and MES directly, UCB through the negated lower confidence bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, log_ndtr, ndtr
from scipy.stats import qmc

from .gpr import GpModel

EI = "EI"
UCB = "UCB"
MES = "MES"

N_CAND_PER_DIM = 2000
N_TOP = 5
MAX_ASCENT_STEPS = 50
FD_STEP = 1e-5
N_MES_GRID = 1000
BISECTION_TOL = 1e-6
ASCENT_RTOL = 1e-4

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = MES
    beta: float = 3.0
    mes_samples: int = 10

    def __post_init__(self):
        if self.kind not in (EI, UCB, MES):
            raise ValueError(f"unknown acquisition {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.mes_samples < 1:
            raise ValueError("MES needs at least one min-value sample")


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def ei(mu, sigma, j_best):
    """Expected improvement below ``j_best``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    improvement = j_best - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = improvement / sigma
        out = improvement * ndtr(z) + sigma * _pdf(z)
    out = np.where(sigma > 0, out, np.maximum(improvement, 0.0))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def ucb(mu, sigma, beta):
    """Lower confidence bound ``mu - beta * sigma`` (to be minimized)."""
    out = np.asarray(mu, dtype=float) - beta * np.asarray(sigma, dtype=float)
    return float(out) if out.ndim == 0 else out


def _mes_from_gamma(gamma):
    # a tiny sigma sends gamma to +-inf; the utility only grows like log|gamma|
    gamma = np.clip(gamma, -1e6, 1e6)
    g2 = 0.5 * gamma * gamma
    # left tail through erfcx: log_ndtr alone loses digits once gamma < -100
    scaled = erfcx(-np.minimum(gamma, 0.0) / math.sqrt(2.0))
    left = gamma < 0
    logcdf = np.where(left, np.log(0.5 * scaled) - g2, log_ndtr(gamma))
    ratio = np.where(left, 2.0 * _INV_SQRT_2PI / scaled,
                     np.exp(-g2 - np.where(left, 0.0, logcdf)) * _INV_SQRT_2PI)
    return 0.5 * gamma * ratio + g2 * left - np.where(left, np.log(0.5 * scaled), logcdf)


def mes_values(mu, sigma, min_samples):
    """MES utility from predictions; zero where the prediction is certain."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    samples = np.asarray(min_samples, dtype=float).reshape(-1)
    out = np.zeros(mu.shape)
    ok = sigma > 0
    if ok.any():
        with np.errstate(over="ignore"):
            gamma = (mu[ok, None] - samples[None, :]) / sigma[ok, None]
        out[ok] = _mes_from_gamma(gamma).mean(axis=1)
    return np.maximum(out, 0.0)


def mes(model: GpModel, x, min_samples) -> float:
    """Max-value entropy search utility at a single normalized point."""
    mu, sigma = model.predict(np.asarray(x, dtype=float))
    return float(mes_values(mu, sigma, min_samples)[0])


def _dim(domain) -> int:
    """Accept either a Domain or a plain dimension."""
    return int(getattr(domain, "dim", domain))


def _candidate_grid(d: int, n: int, rng) -> np.ndarray:
    seed = int(rng.integers(2**32))
    sampler = qmc.Sobol(d, scramble=True, seed=seed)
    m = int(math.ceil(math.log2(n)))
    return sampler.random_base2(m)[:n]


def sample_min_values(model: GpModel, domain, K: int, rng, n_grid: int = N_MES_GRID):
    """Approximate samples of the minimum objective value (Gumbel fit).

    ``Pr(min > y)`` is approximated by ``prod_c Phi((mu_c - y) / sigma_c)`` over a
    quasi-random grid plus the training inputs; a Gumbel distribution is matched
    to its quartiles and sampled by inverse CDF.  Samples never exceed the best
    posterior mean on the grid.
    """
    grid = _candidate_grid(_dim(domain), n_grid, rng)
    if model.n:
        grid = np.vstack([model.X, grid])
    mu, sigma = model.predict(grid)
    best_mean = float(mu.min())
    u = np.clip(rng.random(K), 1e-12, 1.0 - 1e-12)
    spread = float(sigma.max())
    if not spread > 1e-12 * max(1.0, abs(best_mean)):
        offsets = 1e-6 * max(1.0, abs(best_mean)) * (1.0 + np.arange(K))
        return best_mean - offsets

    s = np.maximum(sigma, 1e-300)

    def prob_min_below(y):
        # 1 - prod Phi((mu - y)/sigma), evaluated in log space
        logp = log_ndtr((mu[None, :] - y[:, None]) / s[None, :]).sum(axis=1)
        return -np.expm1(logp)

    quartiles = np.array([0.25, 0.5, 0.75])
    lo = np.full(3, best_mean - 10.0 * spread)
    while np.any(prob_min_below(lo) > quartiles):
        lo = np.where(prob_min_below(lo) > quartiles, lo - 10.0 * spread, lo)
    hi = np.full(3, best_mean + 5.0 * spread)
    for _ in range(100):
        if np.max(hi - lo) <= BISECTION_TOL * spread:
            break
        mid = 0.5 * (lo + hi)
        below = prob_min_below(mid) < quartiles
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    q25, q50, q75 = 0.5 * (lo + hi)
    # min ~ reversed Gumbel: Pr(min < y) = 1 - exp(-exp((y - a) / b))
    denom = math.log(-math.log(0.25)) - math.log(-math.log(0.75))
    b = max((q75 - q25) / denom, 1e-12 * spread)
    a = q50 - b * math.log(math.log(2.0))
    samples = a + b * np.log(-np.log1p(-u))
    return np.minimum(samples, best_mean)


def utility_function(model: GpModel, spec: AcquisitionSpec, j_best: float, min_samples=None):
    """Vectorized utility over rows of normalized points (larger is better)."""
    if spec.kind == EI:

        def utility(X):
            mu, sigma = model.predict(X)
            return ei(mu, sigma, j_best)

    elif spec.kind == UCB:

        def utility(X):
            mu, sigma = model.predict(X)
            return -ucb(mu, sigma, spec.beta)

    else:
        if min_samples is None:
            raise ValueError("MES utility needs min-value samples")

        def utility(X):
            mu, sigma = model.predict(X)
            return mes_values(mu, sigma, min_samples)

    return utility


def _ascend(utility, starts, values, d):
    """Projected finite-difference gradient ascent; each step takes the best of a halving step ladder."""
    x = starts.copy()
    f = values.copy()
    active = np.ones(len(x), dtype=bool)
    steps = 0.1 * 0.5 ** np.arange(12)
    eye = np.eye(d) * FD_STEP
    for _ in range(MAX_ASCENT_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        plus = np.clip(xa[:, None, :] + eye[None], 0.0, 1.0)
        minus = np.clip(xa[:, None, :] - eye[None], 0.0, 1.0)
        both = utility(np.concatenate([plus, minus]).reshape(-1, d)).reshape(2, idx.size, d)
        fp, fm = both[0], both[1]
        width = (plus - minus)[:, np.arange(d), np.arange(d)]
        grad = np.where(width > 0, (fp - fm) / np.where(width > 0, width, 1.0), 0.0)
        norm = np.linalg.norm(grad, axis=1)
        moving = norm > 0
        if not moving.any():
            active[idx] = False
            break
        direction = grad / np.where(moving, norm, 1.0)[:, None]
        trial = np.clip(
            xa[:, None, :] + steps[None, :, None] * direction[:, None, :], 0.0, 1.0
        )
        ft = utility(trial.reshape(-1, d)).reshape(idx.size, steps.size)
        pick = np.argmax(ft, axis=1)
        top = ft[np.arange(idx.size), pick]
        improved = (top > f[idx] + ASCENT_RTOL * np.abs(f[idx])) & moving
        for j, i in enumerate(idx):
            if improved[j]:
                x[i] = trial[j, pick[j]]
                f[i] = top[j]
            else:
                active[i] = False
    return x, f


def maximize_acquisition(
    model: GpModel,
    spec: AcquisitionSpec,
    domain,
    rng,
    j_best: float | None = None,
    min_samples=None,
) -> np.ndarray:
    """Maximize the acquisition utility over the unit cube.

    Random candidates are scored, the best few refined by gradient ascent.
    A completely flat utility yields a uniform random point.  Returns a
    normalized point.
    """
    d = _dim(domain)
    if spec.kind == EI and j_best is None:
        j_best = float(np.min(model.output_shift + model.output_scale * model.y)) if model.n else 0.0
    if spec.kind == MES and min_samples is None:
        min_samples = sample_min_values(model, d, spec.mes_samples, rng)
    utility = utility_function(model, spec, j_best, min_samples)

    cand = rng.random((N_CAND_PER_DIM * d, d))
    values = utility(cand)
    top = values.max()
    if not np.isfinite(top) or top - values.min() <= 1e-300 + 1e-14 * abs(top):
        return rng.random(d)
    order = np.argsort(-values, kind="stable")[:N_TOP]
    x, f = _ascend(utility, cand[order], values[order], d)
    best = int(np.argmax(f))
    return np.clip(x[best], 0.0, 1.0)
