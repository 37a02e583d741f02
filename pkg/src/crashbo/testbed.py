"""Crash-constrained test problems.

Two families: cheap synthetic functions with a crash region (SphereCrash,
RosenbrockCrash, NoisyBowl) and a cart-pole state-feedback tuning problem
whose objective is an ITAE cost over two reference steps of the cart position.

Problems are described by plain-data entries in ``data/registry.json`` so a
problem can be rebuilt from its id alone.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numba
import numpy as np
from scipy.stats import qmc

from .core import Domain, Problem

SPHERE = "SphereCrash"
ROSENBROCK = "RosenbrockCrash"
NOISY_BOWL = "NoisyBowl"
HALFSPACE = "halfspace"
BALL = "ball"

D2 = "d2"
D4 = "d4"

# Position/velocity gains for the d2 mode: continuous-time LQR on the
# linearization of the default CartPoleParams with Q = diag(1, 1, 10, 1),
# R = 1 (scipy.linalg.solve_continuous_are).  The full LQR gain vector is
# (-1.0, -2.3156, -32.187, -8.2163).
FIXED_POSITION_GAINS = (-1.0000000000000009, -2.3156241572689895)
LQR_GAINS = FIXED_POSITION_GAINS + (-32.187175241054526, -8.216265667417087)

# Gain boxes [k_phi, k_phidot] and [k_x, k_xdot, k_phi, k_phidot].
D2_BOX = ((-80.0, -20.0), (0.0, 0.0))
D4_BOX = ((-3.0, -6.0, -80.0, -20.0), (0.0, 0.0, 0.0, 0.0))

W_ANGLE = 0.45
W_POSITION = 0.05


def itae(error_series, dt: float) -> float:
    """Trapezoidal ``int t |e(t)| dt`` for samples at ``t = 0, dt, 2 dt, ...``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    e = np.abs(np.asarray(error_series, dtype=float).reshape(-1))
    if e.size < 2:
        return 0.0
    f = np.arange(e.size) * dt * e
    return float(dt * (f.sum() - 0.5 * (f[0] + f[-1])))


# ---------------------------------------------------------------- cart-pole


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.81
    horizon: float = 10.0
    dt: float = 1e-3
    ref_steps: tuple = (0.5, 1.0)
    # small initial tilt so that an uncontrolled pole actually falls
    initial_angle: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "ref_steps", tuple(float(r) for r in self.ref_steps))
        for name in ("cart_mass", "pole_mass", "half_length", "horizon", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.dt <= 1e-2 * self.horizon:
            raise ValueError("dt must be much smaller than the horizon")
        if len(self.ref_steps) != 2:
            raise ValueError("exactly two reference steps are used")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@numba.njit(cache=True)
def _derivatives(xd, ph, phd, force, M, m, l, g):
    sp = math.sin(ph)
    cp = math.cos(ph)
    total = M + m
    temp = (force + m * l * phd * phd * sp) / total
    phdd = (g * sp - cp * temp) / (l * (4.0 / 3.0 - m * cp * cp / total))
    xdd = temp - m * l * phdd * cp / total
    return xd, xdd, phd, phdd


@numba.njit(cache=True)
def _simulate(k0, k1, k2, k3, ref, phi0, M, m, l, g, n, dt, abort):
    xs = np.empty(n + 1)
    ps = np.empty(n + 1)
    x, xd, ph, phd = 0.0, 0.0, phi0, 0.0
    xs[0] = x
    ps[0] = ph
    half_pi = 0.5 * math.pi
    for i in range(n):
        # zero-order hold on the control over one integrator step
        f = -(k0 * (x - ref) + k1 * xd + k2 * ph + k3 * phd)
        a0, a1, a2, a3 = _derivatives(xd, ph, phd, f, M, m, l, g)
        b0, b1, b2, b3 = _derivatives(
            xd + 0.5 * dt * a1, ph + 0.5 * dt * a2, phd + 0.5 * dt * a3, f, M, m, l, g
        )
        c0, c1, c2, c3 = _derivatives(
            xd + 0.5 * dt * b1, ph + 0.5 * dt * b2, phd + 0.5 * dt * b3, f, M, m, l, g
        )
        d0, d1, d2, d3 = _derivatives(xd + dt * c1, ph + dt * c2, phd + dt * c3, f, M, m, l, g)
        x += dt / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
        xd += dt / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
        ph += dt / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
        phd += dt / 6.0 * (a3 + 2.0 * b3 + 2.0 * c3 + d3)
        xs[i + 1] = x
        ps[i + 1] = ph
        if abort and (not (abs(ph) <= half_pi) or not math.isfinite(x)):
            return xs[: i + 2], ps[: i + 2], True
    return xs, ps, False


def simulate(params: CartPoleParams, gains, ref: float, abort: bool = True):
    """Closed-loop response to one reference step.

    Returns ``(x, phi, crashed)`` sampled every ``dt``; with ``abort`` the
    simulation stops at the first sample with ``|phi| > pi/2``.
    """
    k = np.asarray(gains, dtype=float).reshape(4)
    return _simulate(
        k[0], k[1], k[2], k[3], float(ref), params.initial_angle, params.cart_mass,
        params.pole_mass, params.half_length, params.gravity, params.n_steps, params.dt,
        abort,
    )


def cartpole_cost(params: CartPoleParams, gains, abort: bool = True):
    """``(J, crashed)``; J is None when the pole fell during either step."""
    total = 0.0
    for ref in params.ref_steps:
        xs, ps, crashed = simulate(params, gains, ref, abort)
        if crashed:
            return None, True
        total += W_ANGLE * itae(ps, params.dt) + W_POSITION * itae(ref - xs, params.dt)
    if not math.isfinite(total):
        return None, True
    return total, False


@functools.lru_cache(maxsize=None)
def open_loop_cost(params: CartPoleParams) -> float:
    """Cost of the uncontrolled plant, simulated through the fall."""
    cost, _ = cartpole_cost(params, np.zeros(4), abort=False)
    return float(cost)


def linearization(params: CartPoleParams):
    """``(A, B)`` of the upright equilibrium, state ``(x, xdot, phi, phidot)``."""
    M, m, l, g = params.cart_mass, params.pole_mass, params.half_length, params.gravity
    total = M + m
    den = l * (4.0 / 3.0 - m / total)
    A = np.zeros((4, 4))
    B = np.zeros(4)
    A[0, 1] = 1.0
    A[2, 3] = 1.0
    A[3, 2] = g / den
    B[3] = -1.0 / (total * den)
    A[1, 2] = -m * l * A[3, 2] / total
    B[1] = 1.0 / total - m * l * B[3] / total
    return A, B


@dataclass(frozen=True)
class CartPoleEvaluator:
    params: CartPoleParams
    mode: str = D2

    def gains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if self.mode == D2:
            return np.concatenate([FIXED_POSITION_GAINS, theta])
        return theta

    def __call__(self, theta):
        cost, crashed = cartpole_cost(self.params, self.gains(theta))
        if crashed:
            return None, True, open_loop_cost(self.params)
        return cost, False, None


def cartpole_problem(
    params: CartPoleParams | None = None,
    mode: str = D2,
    lower=None,
    upper=None,
    known_best=None,
    known_best_theta=None,
    problem_id: str | None = None,
) -> Problem:
    params = CartPoleParams() if params is None else params
    if mode not in (D2, D4):
        raise ValueError(f"mode must be d2 or d4, got {mode!r}")
    box = D2_BOX if mode == D2 else D4_BOX
    domain = Domain(box[0] if lower is None else lower, box[1] if upper is None else upper)
    if domain.dim != (2 if mode == D2 else 4):
        raise ValueError(f"{mode} needs a {2 if mode == D2 else 4}-dimensional box")
    return Problem(
        id=problem_id or f"cartpole_{mode}",
        domain=domain,
        evaluator=CartPoleEvaluator(params, mode),
        known_best=known_best,
        known_best_theta=None if known_best_theta is None else np.asarray(known_best_theta, float),
    )


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic objective with a crash region.

    ``crash_kind`` is ``"halfspace"`` (crash where ``n . theta > offset`` for
    the unit normal ``n = crash_vector / |crash_vector|``, ``crash_scalar`` =
    offset) or ``"ball"`` (crash where ``|theta - crash_vector| < crash_scalar``).
    ``crash_value`` is the problem's own substitute objective for crashes.
    """

    base: str
    dim: int
    lower: tuple
    upper: tuple
    crash_kind: str
    crash_vector: tuple
    crash_scalar: float
    crash_value: float
    optimum: tuple = ()
    ledge_height: float = 0.0
    ledge_width: float = 0.0
    noise_amplitude: float = 0.0
    noise_frequency: float = 0.0

    def __post_init__(self):
        for name in ("lower", "upper", "crash_vector", "optimum"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.base not in (SPHERE, ROSENBROCK, NOISY_BOWL):
            raise ValueError(f"unknown synthetic base {self.base!r}")
        if self.crash_kind not in (HALFSPACE, BALL):
            raise ValueError(f"unknown crash region {self.crash_kind!r}")
        if len(self.lower) != self.dim or len(self.upper) != self.dim:
            raise ValueError("box does not match dim")
        if len(self.crash_vector) != self.dim:
            raise ValueError("crash vector does not match dim")
        if self.base != ROSENBROCK and len(self.optimum) != self.dim:
            raise ValueError("optimum does not match dim")
        if self.noise_amplitude < 0 or self.ledge_height < 0 or self.ledge_width < 0:
            raise ValueError("noise amplitude and ledge size must be nonnegative")
        if self.crash_kind == BALL and not self.crash_scalar > 0:
            raise ValueError("crash ball radius must be positive")
        frac = crash_fraction(self)
        if not 0.0 < frac < 0.6:
            raise ValueError(f"crash region covers {frac:.3f} of the box, need (0, 0.6)")

    @property
    def domain(self) -> Domain:
        return Domain(self.lower, self.upper)

    @property
    def optimum_theta(self):
        """Documented minimizer, if the construction has one."""
        if self.base == SPHERE:
            return np.array(self.optimum)
        if self.base == ROSENBROCK:
            return np.ones(self.dim)
        return None


def _border_distance(spec: SyntheticSpec, X):
    """Signed distance to the crash border, positive outside the crash region."""
    v = np.asarray(spec.crash_vector)
    if spec.crash_kind == HALFSPACE:
        return spec.crash_scalar - X @ (v / np.linalg.norm(v))
    return np.linalg.norm(X - v, axis=-1) - spec.crash_scalar


def crashes(spec: SyntheticSpec, X) -> np.ndarray:
    return _border_distance(spec, np.asarray(X, dtype=float)) < 0


def crash_fraction(spec: SyntheticSpec, n: int = 2**14) -> float:
    """Quasi-Monte Carlo estimate of the crashing fraction of the box."""
    u = qmc.Sobol(spec.dim, scramble=True, seed=0).random(n)
    lo, hi = np.asarray(spec.lower), np.asarray(spec.upper)
    return float(crashes(spec, lo + u * (hi - lo)).mean())


def synthetic_values(spec: SyntheticSpec, X) -> np.ndarray:
    """Objective on rows of ``X`` ignoring crashes."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.base == ROSENBROCK:
        out = np.sum(100.0 * (X[:, 1:] - X[:, :-1] ** 2) ** 2 + (1.0 - X[:, :-1]) ** 2, axis=1)
    else:
        out = np.sum((X - np.asarray(spec.optimum)) ** 2, axis=1)
    if spec.noise_amplitude:
        out = out + spec.noise_amplitude * np.sin(spec.noise_frequency * X.sum(axis=1))
    if spec.ledge_height:
        # discontinuous step in a band along the crash border
        dist = _border_distance(spec, X)
        out = out + np.where((dist >= 0) & (dist < spec.ledge_width), spec.ledge_height, 0.0)
    return out


@dataclass(frozen=True)
class SyntheticEvaluator:
    spec: SyntheticSpec

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(1, -1)
        if crashes(self.spec, theta)[0]:
            return None, True, self.spec.crash_value
        return float(synthetic_values(self.spec, theta)[0]), False, None


def synthetic_problem(spec: SyntheticSpec, known_best=None, known_best_theta=None,
                      problem_id: str | None = None) -> Problem:
    if known_best is None and spec.base == SPHERE:
        known_best, known_best_theta = 0.0, spec.optimum_theta
    return Problem(
        id=problem_id or f"{spec.base.lower()}_{spec.dim}d",
        domain=spec.domain,
        evaluator=SyntheticEvaluator(spec),
        known_best=known_best,
        known_best_theta=None if known_best_theta is None else np.asarray(known_best_theta, float),
    )


def sphere_crash_spec() -> SyntheticSpec:
    """2-d sphere whose crash half-space passes close to the optimum."""
    return SyntheticSpec(
        base=SPHERE, dim=2, lower=(-2.0, -2.0), upper=(2.0, 2.0), optimum=(0.6, 0.6),
        crash_kind=HALFSPACE, crash_vector=(1.0, 1.0), crash_scalar=1.1, crash_value=20.0,
        ledge_height=2.0, ledge_width=0.2,
    )


def rosenbrock_crash_spec() -> SyntheticSpec:
    """2-d Rosenbrock with a crash ball on the left arm of the valley."""
    return SyntheticSpec(
        base=ROSENBROCK, dim=2, lower=(-2.0, -2.0), upper=(2.0, 2.0), crash_kind=BALL,
        crash_vector=(-1.0, 1.0), crash_scalar=0.5, crash_value=4000.0,
    )


def noisy_bowl_spec(dim: int = 3) -> SyntheticSpec:
    """Quadratic bowl with deterministic high-frequency ripple and a corner crash ball."""
    center = (0.3, 0.6, 0.4, 0.5, 0.5, 0.5)
    if not 1 <= dim <= len(center):
        raise ValueError("NoisyBowl is defined for 1 <= dim <= 6")
    return SyntheticSpec(
        base=NOISY_BOWL, dim=dim, lower=(0.0,) * dim, upper=(1.0,) * dim,
        optimum=center[:dim], crash_kind=BALL, crash_vector=(1.0,) * dim, crash_scalar=0.6,
        crash_value=3.0, noise_amplitude=0.02, noise_frequency=40.0,
    )


# ---------------------------------------------------------------- registry


@dataclass
class RegistryEntry:
    id: str
    kind: str  # "cartpole" or "synthetic"
    lower: list
    upper: list
    params: dict = field(default_factory=dict)
    known_best: float | None = None
    known_best_theta: list | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _default_registry_path():
    return resources.files("crashbo") / "data" / "registry.json"


def load_registry(path=None) -> dict:
    """``{id: RegistryEntry}`` from the registry file."""
    source = _default_registry_path() if path is None else Path(path)
    data = json.loads(source.read_text())
    entries = [RegistryEntry(**item) for item in data["problems"]]
    return {e.id: e for e in entries}


def save_registry(entries, path) -> None:
    items = [e.to_json() for e in (entries.values() if isinstance(entries, dict) else entries)]
    Path(path).write_text(json.dumps({"problems": items}, indent=2) + "\n")


def problem_from_entry(entry: RegistryEntry) -> Problem:
    params = dict(entry.params)
    if entry.kind == "cartpole":
        mode = params.pop("mode")
        return cartpole_problem(
            CartPoleParams(**params), mode, entry.lower, entry.upper,
            entry.known_best, entry.known_best_theta, problem_id=entry.id,
        )
    if entry.kind == "synthetic":
        spec = SyntheticSpec(**params)
        if tuple(spec.lower) != tuple(entry.lower) or tuple(spec.upper) != tuple(entry.upper):
            raise ValueError(f"registry box of {entry.id} disagrees with its parameters")
        return synthetic_problem(spec, entry.known_best, entry.known_best_theta, entry.id)
    raise ValueError(f"unknown problem kind {entry.kind!r}")


def get_problem(problem_id: str, registry=None) -> Problem:
    registry = load_registry() if registry is None else registry
    if problem_id not in registry:
        raise KeyError(f"unknown problem {problem_id!r}; known: {sorted(registry)}")
    return problem_from_entry(registry[problem_id])


def default_entries() -> list:
    """Registry entries for the built-in problems, without known_best values."""
    entries = []
    for pid, spec in (
        ("sphere_crash_2d", sphere_crash_spec()),
        ("rosenbrock_crash_2d", rosenbrock_crash_spec()),
        ("noisy_bowl_3d", noisy_bowl_spec(3)),
    ):
        entries.append(RegistryEntry(pid, "synthetic", list(spec.lower), list(spec.upper),
                                     params=asdict(spec)))
    p = asdict(CartPoleParams())
    for mode, box in ((D2, D2_BOX), (D4, D4_BOX)):
        entries.append(RegistryEntry(f"cartpole_{mode}", "cartpole", list(box[0]), list(box[1]),
                                     params={**p, "mode": mode}))
    for e in entries:
        for key, value in e.params.items():
            if isinstance(value, tuple):
                e.params[key] = list(value)
    return entries
