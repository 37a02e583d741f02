"""Bayesian optimization with crash constraints.

Variants follow the naming scheme ``{MES,UCB,EI}-{SE,MA}[Q][G]-{F,V}``:
acquisition, kernel (squared exponential / Matern 5/2), optional quadratic
prior mean (Q) and gamma hyperprior (G), and the crash handling mode:
F feeds the problem's own crash value to the GP, V uses virtual data points.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import gpr
from .acquisition import EI, MES, UCB, AcquisitionSpec, maximize_acquisition
from .core import Budget, Domain, Problem, Trace, denormalize, evaluate, normalize
from .vdp import DEFAULT_GAMMA, augment

log = logging.getLogger(__name__)

FIXED = "F"
VIRTUAL = "V"

DUPLICATE_TOL = 1e-9
DUPLICATE_OFFSET = 1e-3

#: The variants compared in the original benchmark.
STUDY_VARIANTS = (
    "MES-SE-F",
    "UCB-SE-F",
    "EI-SE-F",
    "MES-MA-F",
    "MES-SE-V",
    "EI-SE-V",
    "MES-MA-V",
    "MES-SEQ-V",
    "MES-SEG-V",
)

_NAME = re.compile(r"^(MES|UCB|EI)-(SE|MA)(Q?)(G?)-([FV])$")


@dataclass(frozen=True)
class BoConfig:
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    kernel_kind: str = gpr.SE
    mean_kind: str = gpr.CONSTANT
    prior_kind: str = gpr.SMOOTHBOX
    crash_mode: str = FIXED
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.crash_mode not in (FIXED, VIRTUAL):
            raise ValueError(f"crash mode must be F or V, got {self.crash_mode!r}")

    @property
    def gp_config(self) -> gpr.GpConfig:
        return gpr.GpConfig(self.kernel_kind, self.mean_kind, self.prior_kind)

    @property
    def name(self) -> str:
        kernel = "SE" if self.kernel_kind == gpr.SE else "MA"
        q = "Q" if self.mean_kind == gpr.QUADRATIC else ""
        g = "G" if self.prior_kind == gpr.GAMMA else ""
        return f"{self.acquisition.kind}-{kernel}{q}{g}-{self.crash_mode}"


def parse_variant(name: str) -> BoConfig:
    """``"MES-SEQ-V"`` -> BoConfig(MES, SE kernel, quadratic mean, VDP)."""
    m = _NAME.match(name.strip())
    if m is None:
        raise ValueError(f"not a BO variant name: {name!r}")
    acq, kernel, q, g, mode = m.groups()
    return BoConfig(
        acquisition=AcquisitionSpec(kind=acq),
        kernel_kind=gpr.SE if kernel == "SE" else gpr.MATERN52,
        mean_kind=gpr.QUADRATIC if q else gpr.CONSTANT,
        prior_kind=gpr.GAMMA if g else gpr.SMOOTHBOX,
        crash_mode=mode,
    )


def initial_design(domain, seed) -> np.ndarray:
    """``d + 1`` uniform random points in the unit cube."""
    d = int(getattr(domain, "dim", domain))
    rng = np.random.default_rng([int(seed), 0])
    return rng.random((d + 1, d))


def training_data(history: Trace, domain: Domain, config: BoConfig, rng):
    """Normalized ``(X, y)`` for the surrogate, or None if nothing usable exists."""
    X = normalize(domain, history.thetas())
    crashed = np.array([ev.crashed for ev in history.evaluations])
    if config.crash_mode == VIRTUAL:
        if crashed.all():
            return None
        y = [np.nan if ev.crashed else ev.objective for ev in history.evaluations]
        data = augment(X, y, crashed, config.gp_config, rng, config.gamma)
        return data.X, data.y
    keep, y = [], []
    for i, ev in enumerate(history.evaluations):
        if not ev.crashed:
            keep.append(i)
            y.append(ev.objective)
        elif ev.fallback_objective is not None:
            keep.append(i)
            y.append(ev.fallback_objective)
    if not keep:
        return None
    return X[keep], np.asarray(y, dtype=float)


def _dedupe(x, X, rng):
    dist = np.min(np.linalg.norm(X - x, axis=1))
    if dist > DUPLICATE_TOL:
        return x
    direction = rng.normal(size=x.size)
    direction /= np.linalg.norm(direction)
    return np.clip(x + DUPLICATE_OFFSET * direction, 0.0, 1.0)


def bo_step(history: Trace, domain: Domain, config: BoConfig, rng) -> np.ndarray:
    """Next normalized query point given the history."""
    if not len(history):
        raise ValueError("BO step needs at least one evaluation")
    d = domain.dim
    data = training_data(history, domain, config, rng)
    if data is None:
        return rng.random(d)
    X, y = data
    try:
        model = gpr.fit(X, y, config.gp_config, rng)
    except gpr.GpNumericalError as exc:
        log.warning("GP fit failed (%s); sampling at random", exc)
        return rng.random(d)
    successes = [ev.objective for ev in history.evaluations if not ev.crashed]
    j_best = min(successes) if successes else float(np.min(y))
    x = maximize_acquisition(model, config.acquisition, d, rng, j_best=j_best)
    return _dedupe(x, normalize(domain, history.thetas()), rng)


def run(problem: Problem, config: BoConfig, budget: int, seed: int, shared_initial=None) -> Trace:
    """Run BO from the shared initial design until the budget is spent."""
    d = problem.dim
    if shared_initial is None:
        shared_initial = initial_design(d, seed)
    shared_initial = np.atleast_2d(np.asarray(shared_initial, dtype=float))
    counter = Budget(int(budget))
    trace = Trace(seed=int(seed), optimizer_id=config.name, problem_id=problem.id)
    for u in shared_initial:
        if counter.exhausted:
            break
        trace.append(evaluate(problem, denormalize(problem.domain, u), counter))
    rng = np.random.default_rng([int(seed), 1])
    while not counter.exhausted:
        u = bo_step(trace, problem.domain, config, rng)
        trace.append(evaluate(problem, denormalize(problem.domain, u), counter))
    return trace


__all__ = [
    "BoConfig",
    "EI",
    "FIXED",
    "MES",
    "STUDY_VARIANTS",
    "UCB",
    "VIRTUAL",
    "bo_step",
    "initial_design",
    "parse_variant",
    "run",
]
