"""Gaussian-process regression with ARD kernels, parametric prior means and
hyperprior-regularized (MAP) hyperparameter fitting.

Hyperparameters are handled as one flat vector::

    [log l_1, ..., log l_d, log sf2, mean coefficients...]

where the mean coefficients are ``[c]`` for a constant mean and
``[c, a_1..a_d, b_1..b_d]`` for the axis-aligned quadratic mean
``c + sum a_i x_i + sum b_i x_i**2``.  Fitting works on standardized outputs;
predictions are returned in raw units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit

SE = "SE"
MATERN52 = "Matern52"
CONSTANT = "Constant"
QUADRATIC = "Quadratic"
SMOOTHBOX = "SmoothBox"
GAMMA = "Gamma"

#: Fixed regularization term added (squared) to the covariance diagonal.
SIGMA_N = 4.5400e-05

N_RANDOM_DRAWS = 50
N_REFINE = 2
MAX_REFINE_ITER = 100
REFINE_FTOL = 1e-6
REFINE_GTOL = 1e-3

LOG_LS_BOUNDS = (math.log(1e-3), math.log(1e2))
LOG_SF2_BOUNDS = (math.log(1e-6), math.log(1e6))

_SQRT5 = math.sqrt(5.0)
_potrf = linalg.get_lapack_funcs("potrf", dtype=np.float64)
_potri = linalg.get_lapack_funcs("potri", dtype=np.float64)
_trtri = linalg.get_lapack_funcs("trtri", dtype=np.float64)
_LOG_2PI = math.log(2.0 * math.pi)


class GpNumericalError(RuntimeError):
    """Covariance factorization failed even after raising the jitter."""

    def __init__(self, message, hyperparameters=None):
        super().__init__(message)
        self.hyperparameters = hyperparameters


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    length_scales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        if self.kind not in (SE, MATERN52):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        ls = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if np.any(~np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError(f"length scales must be positive and finite, got {ls}")
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError("signal variance must be positive and finite")
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))


@dataclass(frozen=True)
class MeanSpec:
    kind: str
    coefficients: np.ndarray

    def __post_init__(self):
        if self.kind not in (CONSTANT, QUADRATIC):
            raise ValueError(f"unknown mean kind {self.kind!r}")
        coef = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        if self.kind == CONSTANT and coef.size != 1:
            raise ValueError("constant mean takes exactly one coefficient")
        if self.kind == QUADRATIC and (coef.size < 3 or coef.size % 2 != 1):
            raise ValueError("quadratic mean takes 2d+1 coefficients")
        object.__setattr__(self, "coefficients", coef)


@dataclass(frozen=True)
class HyperpriorSpec:
    """Prior on the kernel length scales.

    SmoothBox is uniform in log length scale on ``[lower, upper]`` with
    logistic edges of width ``width``.  Gamma puts a Gamma(shape, scale)
    density on each length scale.
    """

    kind: str = SMOOTHBOX
    lower: float = math.log(0.01)
    upper: float = math.log(10.0)
    width: float = 0.1
    shape: float = 2.0
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in (SMOOTHBOX, GAMMA):
            raise ValueError(f"unknown hyperprior kind {self.kind!r}")
        if not self.lower < self.upper:
            raise ValueError("smooth-box bounds must be ordered")
        if self.width <= 0 or self.shape <= 0 or self.scale <= 0:
            raise ValueError("width, shape and scale must be positive")


@dataclass(frozen=True)
class GpConfig:
    kernel_kind: str = SE
    mean_kind: str = CONSTANT
    prior_kind: str = SMOOTHBOX

    @property
    def prior(self) -> HyperpriorSpec:
        return HyperpriorSpec(kind=self.prior_kind)


# ---------------------------------------------------------------------------
# kernels and means


def _sq_dists(X1, X2):
    """Per-dimension squared differences, shape (d, n1, n2)."""
    diff = X1.T[:, :, None] - X2.T[:, None, :]
    return diff * diff


def _kernel_from_r2(kind, r2, sf2):
    if kind == SE:
        return sf2 * np.exp(-0.5 * r2)
    r = np.sqrt(np.maximum(r2, 0.0))
    return sf2 * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)


def kernel_matrix(spec: KernelSpec, X1, X2) -> np.ndarray:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    ls = spec.length_scales
    if X1.shape[1] != ls.size or X2.shape[1] != ls.size:
        raise ValueError("input dimension does not match the number of length scales")
    A = X1 / ls
    B = X2 / ls
    r2 = A @ B.T
    r2 *= -2.0
    r2 += (A * A).sum(1)[:, None]
    r2 += (B * B).sum(1)[None, :]
    np.maximum(r2, 0.0, out=r2)
    if spec.kind == SE:
        r2 *= -0.5
        np.exp(r2, out=r2)
        r2 *= spec.signal_variance
        return r2
    # Matern 5/2 with t = sqrt(5) r: sf2 (1 + t + t^2 / 3) exp(-t)
    t = np.sqrt(r2, out=r2)
    t *= _SQRT5
    out = np.exp(-t)
    poly = t * t
    poly *= 1.0 / 3.0
    poly += t
    poly += 1.0
    out *= poly
    out *= spec.signal_variance
    return out


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.size != spec.length_scales.size or x2.size != spec.length_scales.size:
        raise ValueError("input dimension does not match the number of length scales")
    r2 = float(np.sum(((x - x2) / spec.length_scales) ** 2))
    return float(_kernel_from_r2(spec.kind, r2, spec.signal_variance))


def n_mean_coefficients(kind: str, d: int) -> int:
    return 1 if kind == CONSTANT else 2 * d + 1


def mean_basis(kind: str, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ones = np.ones((X.shape[0], 1))
    if kind == CONSTANT:
        return ones
    return np.hstack([ones, X, X * X])


def mean_eval(spec: MeanSpec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if spec.kind == QUADRATIC and spec.coefficients.size != 2 * X.shape[1] + 1:
        raise ValueError("quadratic mean coefficient count does not match dimension")
    out = mean_basis(spec.kind, X) @ spec.coefficients
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# hyperprior


def log_hyperprior(prior: HyperpriorSpec, log_ls):
    """Log density of the length-scale prior and its gradient in log space.

    Accepts a single vector or a stack of vectors (last axis = dimensions).
    """
    u = np.asarray(log_ls, dtype=float)
    if prior.kind == SMOOTHBOX:
        lo = (u - prior.lower) / prior.width
        hi = (prior.upper - u) / prior.width
        value = np.sum(log_expit(lo) + log_expit(hi), axis=-1) - u.shape[-1] * math.log(
            prior.upper - prior.lower
        )
        grad = (expit(-lo) - expit(-hi)) / prior.width
    else:
        k, s = prior.shape, prior.scale
        el = np.exp(u)
        value = np.sum((k - 1.0) * u - el / s, axis=-1) - u.shape[-1] * (
            math.lgamma(k) + k * math.log(s)
        )
        grad = (k - 1.0) - el / s
    if u.ndim == 1:
        value = float(value)
    return value, grad


def sample_hyperprior(prior: HyperpriorSpec, d: int, size: int, rng) -> np.ndarray:
    """Draw ``size`` log-length-scale vectors from the prior."""
    if prior.kind == SMOOTHBOX:
        return rng.uniform(prior.lower, prior.upper, size=(size, d))
    draws = rng.gamma(prior.shape, prior.scale, size=(size, d))
    return np.log(np.maximum(draws, 1e-300))


# ---------------------------------------------------------------------------
# log posterior


def pack(kernel: KernelSpec, mean: MeanSpec) -> np.ndarray:
    return np.concatenate(
        [np.log(kernel.length_scales), [math.log(kernel.signal_variance)], mean.coefficients]
    )


def unpack(vec, d: int, kernel_kind: str, mean_kind: str):
    vec = np.asarray(vec, dtype=float)
    kernel = KernelSpec(kernel_kind, np.exp(vec[:d]), math.exp(vec[d]))
    mean = MeanSpec(mean_kind, vec[d + 1 :])
    return kernel, mean


class _Objective:
    """Log posterior over the flat hyperparameter vector for fixed data."""

    def __init__(self, X, y, kernel_kind, mean_kind, prior, jitter=SIGMA_N):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.n, self.d = self.X.shape
        self.kernel_kind = kernel_kind
        self.mean_kind = mean_kind
        self.prior = prior
        self.noise = jitter * jitter
        self.D = _sq_dists(self.X, self.X)
        self.D_flat = self.D.reshape(self.d, -1)
        self.H = mean_basis(mean_kind, self.X)

    def _r2(self, log_ls):
        inv = np.exp(-2.0 * np.asarray(log_ls))
        return (inv @ self.D_flat).reshape(self.n, self.n), inv

    def value_and_grad(self, vec):
        d, n = self.d, self.n
        log_ls, log_sf2, coef = vec[:d], vec[d], vec[d + 1 :]
        sf2 = math.exp(log_sf2)
        r2, inv = self._r2(log_ls)
        Kf = _kernel_from_r2(self.kernel_kind, r2, sf2)
        K = Kf + self.noise * np.eye(n)
        L, info = _potrf(K, lower=True)
        if info != 0:
            raise GpNumericalError("covariance not positive definite", vec.copy())
        resid = self.y - self.H @ coef
        alpha = linalg.cho_solve((L, True), resid, check_finite=False)
        lml = -0.5 * resid @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI

        Kinv, info = _potri(L, lower=True)
        if info != 0:
            raise GpNumericalError("covariance inverse failed", vec.copy())
        # potri fills only the lower triangle (the upper stays zero).  Every
        # matrix contracted with W below is symmetric, so doubling the strict
        # lower triangle stands in for the full inverse.
        Kinv *= 2.0
        Kinv.flat[:: n + 1] *= 0.5
        W = np.outer(alpha, alpha) - Kinv
        if self.kernel_kind == SE:
            base = Kf
        else:
            r = np.sqrt(r2)
            base = sf2 * (5.0 / 3.0) * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
        WB = W * base
        g_ls = 0.5 * (self.D_flat @ WB.ravel()) * inv
        g_sf2 = 0.5 * np.sum(W * Kf)
        g_mean = self.H.T @ alpha

        lp, g_prior = log_hyperprior(self.prior, log_ls)
        value = lml + lp
        grad = np.concatenate([g_ls + g_prior, [g_sf2], g_mean])
        return float(value), grad

    def batch_values(self, vecs):
        """Log posterior for many hyperparameter vectors at once (no gradient)."""
        d, n = self.d, self.n
        vecs = np.atleast_2d(vecs)
        m = vecs.shape[0]
        inv = np.exp(-2.0 * vecs[:, :d])
        K = (inv @ self.D.reshape(d, -1)).reshape(m, n, n)
        if self.kernel_kind == SE:
            K *= -0.5
            np.exp(K, out=K)
        else:
            r = np.sqrt(K)
            K *= 5.0 / 3.0
            K += 1.0 + _SQRT5 * r
            r *= -_SQRT5
            np.exp(r, out=r)
            K *= r
        K *= np.exp(vecs[:, d])[:, None, None]
        diag = np.arange(n)
        K[:, diag, diag] += self.noise
        resid = self.y[None, :] - vecs[:, d + 1 :] @ self.H.T
        out = np.full(vecs.shape[0], -np.inf)
        try:
            L = np.linalg.cholesky(K)
            ok = np.ones(vecs.shape[0], dtype=bool)
        except np.linalg.LinAlgError:
            L = np.zeros_like(K)
            ok = np.zeros(vecs.shape[0], dtype=bool)
            for i in range(vecs.shape[0]):
                try:
                    L[i] = np.linalg.cholesky(K[i])
                    ok[i] = True
                except np.linalg.LinAlgError:
                    pass
        lp, _ = log_hyperprior(self.prior, vecs[:, :d])
        for i in np.flatnonzero(ok):
            z = linalg.solve_triangular(L[i], resid[i], lower=True, check_finite=False)
            logdet = np.log(np.diagonal(L[i])).sum()
            out[i] = -0.5 * z @ z - logdet - 0.5 * n * _LOG_2PI + lp[i]
        return out


def log_posterior(
    kernel: KernelSpec, mean: MeanSpec, prior: HyperpriorSpec, X, y, jitter: float = SIGMA_N
):
    """Log marginal likelihood plus log length-scale prior.

    Returns ``(value, gradient)`` with the gradient taken with respect to the
    flat vector ``[log l, log sf2, mean coefficients]``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("log posterior needs at least one observation")
    obj = _Objective(X, y, kernel.kind, mean.kind, prior, jitter)
    return obj.value_and_grad(pack(kernel, mean))


# ---------------------------------------------------------------------------
# fitted model


def standardize(y) -> tuple:
    """Robust location/scale: median and IQR-derived scale (falls back to std, then 1)."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return 0.0, 1.0
    shift = float(np.median(y))
    q75, q25 = np.percentile(y, [75, 25])
    scale = float(q75 - q25) / 1.349
    tiny = 1e-12 * max(1.0, abs(shift))
    if not scale > tiny:
        scale = float(np.std(y))
    if not scale > tiny:
        scale = 1.0
    return shift, scale


@dataclass(frozen=True)
class GpModel:
    """Fitted GP.  Immutable; ``X`` lives in the unit cube, ``y`` is standardized."""

    kernel: KernelSpec
    mean: MeanSpec
    X: np.ndarray
    y: np.ndarray
    output_shift: float = 0.0
    output_scale: float = 1.0
    jitter: float = SIGMA_N
    chol: Optional[np.ndarray] = field(default=None, repr=False)
    alpha: Optional[np.ndarray] = field(default=None, repr=False)
    log_posterior: float = float("nan")
    # explicit inverse of the Cholesky factor: prediction by GEMM instead of TRSM
    chol_inv: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def build(cls, kernel, mean, X, y, output_shift=0.0, output_scale=1.0, jitter=SIGMA_N,
              log_post=float("nan")):
        """Factorize the covariance for the given hyperparameters (jitter retried at 10x)."""
        X = np.asarray(X, dtype=float).reshape(-1, kernel.length_scales.size)
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] == 0:
            return cls(kernel, mean, X, y, output_shift, output_scale, jitter, None, None, log_post)
        Kf = kernel_matrix(kernel, X, X)
        resid = y - mean_eval(mean, X)
        for jit in (jitter, 10.0 * jitter):
            try:
                L = linalg.cholesky(Kf + jit * jit * np.eye(X.shape[0]), lower=True,
                                    check_finite=False)
            except linalg.LinAlgError:
                continue
            alpha = linalg.cho_solve((L, True), resid, check_finite=False)
            L_inv, info = _trtri(L, lower=True)
            if info != 0:
                continue
            return cls(kernel, mean, X, y, output_shift, output_scale, jit, L, alpha, log_post,
                       np.tril(L_inv))
        raise GpNumericalError(
            "covariance factorization failed despite jitter", pack(kernel, mean)
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.length_scales.size

    def predict_standardized(self, Xq):
        """Posterior mean and variance in standardized units for rows of ``Xq``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        mu = mean_eval(self.mean, Xq)
        sf2 = self.kernel.signal_variance
        if self.n == 0:
            return mu, np.full(Xq.shape[0], sf2 + self.jitter**2)
        Ks = kernel_matrix(self.kernel, self.X, Xq)
        mu = mu + Ks.T @ self.alpha
        v = self.chol_inv @ Ks
        var = sf2 - np.einsum("ij,ij->j", v, v)
        return mu, np.maximum(var, 0.0)

    def predict(self, Xq):
        """Posterior mean and standard deviation in raw output units."""
        Xq = np.asarray(Xq, dtype=float)
        single = Xq.ndim == 1
        mu, var = self.predict_standardized(Xq)
        mu = self.output_shift + self.output_scale * mu
        sigma = self.output_scale * np.sqrt(var)
        if single:
            return float(mu[0]), float(sigma[0])
        return mu, sigma


def predict(model: GpModel, x):
    return model.predict(x)


def prior_model(d: int, config: GpConfig) -> GpModel:
    kernel = KernelSpec(config.kernel_kind, np.full(d, 0.5), 1.0)
    mean = MeanSpec(config.mean_kind, np.zeros(n_mean_coefficients(config.mean_kind, d)))
    return GpModel.build(kernel, mean, np.empty((0, d)), np.empty(0))


def _initial_draws(obj: _Objective, prior: HyperpriorSpec, n_draws: int, rng) -> np.ndarray:
    d = obj.d
    log_ls = sample_hyperprior(prior, d, n_draws, rng)
    log_sf2 = rng.uniform(math.log(0.1), math.log(10.0), size=(n_draws, 1))
    lo, hi = float(obj.y.min()), float(obj.y.max())
    c = rng.uniform(lo, hi, size=(n_draws, 1)) if hi > lo else np.full((n_draws, 1), lo)
    parts = [np.clip(log_ls, *LOG_LS_BOUNDS), log_sf2, c]
    if obj.mean_kind == QUADRATIC:
        parts.append(rng.normal(0.0, 1.0, size=(n_draws, 2 * d)))
    return np.hstack(parts)


def _refine(obj: _Objective, start: np.ndarray):
    d = obj.d
    bounds = [LOG_LS_BOUNDS] * d + [LOG_SF2_BOUNDS] + [(None, None)] * (start.size - d - 1)

    def negative(vec):
        try:
            value, grad = obj.value_and_grad(vec)
        except GpNumericalError:
            return 1e25, np.zeros_like(vec)
        if not np.isfinite(value):
            return 1e25, np.zeros_like(vec)
        return -value, -grad

    res = optimize.minimize(
        negative, start, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": MAX_REFINE_ITER, "ftol": REFINE_FTOL, "gtol": REFINE_GTOL},
    )
    return res.x, -float(res.fun)


def fit(X, y_raw, config: GpConfig, rng, n_draws: int = N_RANDOM_DRAWS,
        n_refine: int = N_REFINE) -> GpModel:
    """MAP fit: random hyperprior draws, best few refined by L-BFGS-B.

    With no data the prior-only model is returned.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y_raw = np.asarray(y_raw, dtype=float).reshape(-1)
    if y_raw.size == 0:
        d = X.shape[1] if X.size else 1
        return prior_model(d, config)
    if X.shape[0] != y_raw.size:
        raise ValueError("X and y disagree in length")
    if not np.all(np.isfinite(y_raw)):
        raise ValueError("outputs must be finite")
    shift, scale = standardize(y_raw)
    y = (y_raw - shift) / scale
    obj = _Objective(X, y, config.kernel_kind, config.mean_kind, config.prior)

    draws = _initial_draws(obj, config.prior, n_draws, rng)
    values = obj.batch_values(draws)
    order = np.argsort(-values, kind="stable")
    best_vec, best_val = None, -np.inf
    for idx in order[:n_refine]:
        if not np.isfinite(values[idx]):
            continue
        vec, val = _refine(obj, draws[idx])
        if val > best_val:
            best_vec, best_val = vec, val
    if best_vec is None:
        raise GpNumericalError("no hyperparameter draw gave a finite log posterior")
    kernel, mean = unpack(best_vec, obj.d, config.kernel_kind, config.mean_kind)
    return GpModel.build(kernel, mean, X, y, shift, scale, log_post=best_val)
