"""Non-BO optimizers: random search, full-factorial grid and pattern search.

All work on the unit cube and share the optimizer interface
``(problem, budget, seed, shared_initial) -> Trace``.  A crashed evaluation
never becomes the incumbent; any successful value beats any crash.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bo import initial_design
from .core import Budget, Problem, Trace, denormalize, evaluate

INITIAL_MESH = 0.25
EXPANSION = 2.0
CONTRACTION = 0.5
MIN_MESH = 1e-12


def _start(problem, budget, seed, shared_initial, optimizer_id):
    if shared_initial is None:
        shared_initial = initial_design(problem.dim, seed)
    shared_initial = np.atleast_2d(np.asarray(shared_initial, dtype=float))
    counter = Budget(int(budget))
    trace = Trace(seed=int(seed), optimizer_id=optimizer_id, problem_id=problem.id)
    for u in shared_initial:
        if counter.exhausted:
            break
        trace.append(evaluate(problem, denormalize(problem.domain, u), counter))
    return counter, trace, shared_initial


def random_search(problem: Problem, budget: int, seed: int, shared_initial=None) -> Trace:
    counter, trace, _ = _start(problem, budget, seed, shared_initial, "Rand")
    rng = np.random.default_rng([int(seed), 2])
    while not counter.exhausted:
        u = rng.random(problem.dim)
        trace.append(evaluate(problem, denormalize(problem.domain, u), counter))
    return trace


def grid_levels(d: int, budget_multiplier: int = 25, rule: str = "root") -> int:
    """Levels per dimension for the full-factorial grid.

    ``rule="root"`` gives ``ceil((m d)^(1/d))``; ``rule="log"`` gives
    ``ceil(log_d(m d))``.  Both agree at d = 5.
    """
    if d < 2:
        raise ValueError("grid levels are defined for d >= 2")
    target = budget_multiplier * d
    if rule == "root":
        levels = math.ceil(target ** (1.0 / d) - 1e-12)
    elif rule == "log":
        levels = math.ceil(math.log(target) / math.log(d) - 1e-12)
    else:
        raise ValueError(f"unknown grid rule {rule!r}")
    return max(levels, 2)


def grid_points(d: int, levels: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, levels)
    return np.array(list(itertools.product(axis, repeat=d)))


def grid_search(problem: Problem, d: int | None = None, seed: int = 0,
                budget_multiplier: int = 25, rule: str = "root") -> Trace:
    """Evaluate every grid node in lexicographic order (ignores any budget)."""
    d = problem.dim if d is None else d
    pts = grid_points(d, grid_levels(d, budget_multiplier, rule))
    counter = Budget(len(pts))
    trace = Trace(seed=int(seed), optimizer_id="Grid", problem_id=problem.id)
    for u in pts:
        trace.append(evaluate(problem, denormalize(problem.domain, u), counter))
    return trace


@dataclass
class PatternState:
    center: np.ndarray
    center_value: float
    mesh: float = INITIAL_MESH
    direction_index: int = 0

    def __post_init__(self):
        if not self.mesh > 0:
            raise ValueError("mesh must be positive")


def _directions(d):
    eye = np.eye(d)
    out = []
    for i in range(d):
        out.append(eye[i])
        out.append(-eye[i])
    return out


def poll(state: PatternState, objective) -> bool:
    """One opportunistic poll around the center; updates ``state`` in place.

    ``objective(u)`` returns a value or None (crash / not evaluable).  Returns
    True when an improving point was accepted.
    """
    for i, direction in enumerate(_directions(state.center.size)):
        state.direction_index = i
        u = np.clip(state.center + state.mesh * direction, 0.0, 1.0)
        if np.array_equal(u, state.center):
            continue
        value = objective(u)
        if value is not None and value < state.center_value:
            state.center = u
            state.center_value = value
            state.mesh *= EXPANSION
            return True
    state.direction_index = 0
    state.mesh *= CONTRACTION
    return False


class _Exhausted(Exception):
    pass


def pattern_search(problem: Problem, budget: int, seed: int, shared_initial=None) -> Trace:
    """Generalized pattern search on the 2d coordinate stencil."""
    counter, trace, _ = _start(problem, budget, seed, shared_initial, "PS")
    rng = np.random.default_rng([int(seed), 3])
    seen: dict = {}
    for ev in trace.evaluations:
        seen[ev.theta.tobytes()] = ev

    def objective(u):
        theta = denormalize(problem.domain, u)
        key = theta.tobytes()
        if key not in seen:
            if counter.exhausted:
                raise _Exhausted
            ev = evaluate(problem, theta, counter)
            trace.append(ev)
            seen[key] = ev
        ev = seen[key]
        return None if ev.crashed else ev.objective

    def random_success():
        # random restarts (each consuming budget) until something succeeds
        while True:
            u = rng.random(problem.dim)
            value = objective(u)
            if value is not None:
                return u, value

    best = None
    for ev in trace.evaluations:
        if not ev.crashed and (best is None or ev.objective < best.objective):
            best = ev
    try:
        if best is None:
            center, value = random_success()
        else:
            center = np.clip((best.theta - problem.domain.lower) / problem.domain.width, 0.0, 1.0)
            value = best.objective
        state = PatternState(center=center, center_value=value)
        while not counter.exhausted:
            poll(state, objective)
            if state.mesh < MIN_MESH:
                center, value = random_success()
                state = PatternState(center=center, center_value=value)
    except _Exhausted:
        pass
    return trace
