"""Problem abstraction, box domains, evaluation records and budget accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised for points outside the box or malformed boxes."""


class BudgetExhausted(RuntimeError):
    """Raised when an evaluation is requested after the budget is used up."""


@dataclass(frozen=True)
class Domain:
    """Box constraints ``lower <= theta <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.size < 1 or lower.shape != upper.shape:
            raise DomainError("lower and upper must be non-empty and of equal length")
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
            raise DomainError("box bounds must be finite")
        if np.any(lower >= upper):
            raise DomainError(f"need lower < upper componentwise, got {lower} / {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta, tol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        slack = tol * np.maximum(self.width, 1.0)
        return bool(
            np.all(theta >= self.lower - slack) and np.all(theta <= self.upper + slack)
        )


def normalize(domain: Domain, theta) -> np.ndarray:
    """Map ``theta`` from the box to the unit cube."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != domain.dim:
        raise DomainError(f"expected dimension {domain.dim}, got {theta.shape[-1]}")
    if not domain.contains(theta):
        raise DomainError(f"theta {theta} outside the box")
    u = (theta - domain.lower) / domain.width
    return np.clip(u, 0.0, 1.0)


def denormalize(domain: Domain, u) -> np.ndarray:
    """Map unit-cube coordinates back to the box."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != domain.dim:
        raise DomainError(f"expected dimension {domain.dim}, got {u.shape[-1]}")
    theta = domain.lower + u * domain.width
    return np.clip(theta, domain.lower, domain.upper)


@dataclass(frozen=True)
class Evaluation:
    """One black-box query.

    ``objective`` is None exactly when the run crashed; ``fallback_objective``
    carries the problem's own crash value (used by the fixed-value crash mode).
    """

    theta: np.ndarray
    objective: Optional[float]
    crashed: bool
    fallback_objective: Optional[float] = None
    wall_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(-1))
        if self.crashed:
            if self.objective is not None:
                raise ValueError("crashed evaluation must not carry an objective")
        elif self.objective is None or not np.isfinite(self.objective):
            raise ValueError("successful evaluation needs a finite objective")

    def same_result(self, other: "Evaluation") -> bool:
        """Equality ignoring wall time."""
        return (
            np.array_equal(self.theta, other.theta)
            and self.objective == other.objective
            and self.crashed == other.crashed
            and self.fallback_objective == other.fallback_objective
        )


@dataclass
class Trace:
    """Ordered evaluation history of one optimizer run."""

    evaluations: list = field(default_factory=list)
    seed: int = 0
    optimizer_id: str = ""
    problem_id: str = ""

    def __len__(self):
        return len(self.evaluations)

    def append(self, evaluation: Evaluation) -> None:
        self.evaluations.append(evaluation)

    def best_so_far(self) -> np.ndarray:
        """Best successful objective after each evaluation (inf before the first success)."""
        best = np.inf
        out = np.empty(len(self.evaluations))
        for i, ev in enumerate(self.evaluations):
            if not ev.crashed and ev.objective < best:
                best = ev.objective
            out[i] = best
        return out

    def thetas(self) -> np.ndarray:
        if not self.evaluations:
            return np.empty((0, 0))
        return np.vstack([ev.theta for ev in self.evaluations])

    def same_result(self, other: "Trace") -> bool:
        return (
            len(self) == len(other)
            and self.seed == other.seed
            and self.optimizer_id == other.optimizer_id
            and self.problem_id == other.problem_id
            and all(a.same_result(b) for a, b in zip(self.evaluations, other.evaluations))
        )


# evaluator(theta) -> (objective or None, crashed, fallback or None)
Evaluator = Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class Problem:
    id: str
    domain: Domain
    evaluator: Evaluator
    known_best: Optional[float] = None
    known_best_theta: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.domain.dim


@dataclass
class Budget:
    """Evaluation counter; crashed queries consume budget like any other."""

    total: int
    used: int = 0

    @property
    def remaining(self) -> int:
        return self.total - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.total

    def consume(self) -> None:
        if self.exhausted:
            raise BudgetExhausted(f"budget of {self.total} evaluations exhausted")
        self.used += 1


def evaluate(problem: Problem, theta, budget: Budget) -> Evaluation:
    """Query the problem once, charging one unit of budget.

    Exceptions raised by the evaluator are recorded as crashes.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if not problem.domain.contains(theta):
        raise DomainError(f"theta {theta} outside the box of {problem.id}")
    theta = np.clip(theta, problem.domain.lower, problem.domain.upper)
    budget.consume()
    start = time.perf_counter()
    try:
        objective, crashed, fallback = problem.evaluator(theta)
    except Exception:
        objective, crashed, fallback = None, True, None
    wall = time.perf_counter() - start
    crashed = bool(crashed)
    if not crashed and (objective is None or not np.isfinite(objective)):
        crashed = True
    return Evaluation(
        theta=theta,
        objective=None if crashed else float(objective),
        crashed=crashed,
        fallback_objective=None if fallback is None else float(fallback),
        wall_time=wall,
    )


def incumbent(trace: Trace):
    """Return ``(theta, objective)`` of the best successful evaluation, or None."""
    best = None
    for ev in trace.evaluations:
        if ev.crashed:
            continue
        if best is None or ev.objective < best.objective:
            best = ev
    if best is None:
        return None
    return best.theta, best.objective


def evaluate_points(
    problem: Problem, thetas: Sequence, budget: Budget, trace: Trace
) -> None:
    """Evaluate raw points in order, appending to ``trace`` until the budget runs out."""
    for theta in thetas:
        if budget.exhausted:
            break
        trace.append(evaluate(problem, theta, budget))
