"""Landscape statistics from random lines through the best known point.

Each line ``theta(r) = theta_star + (r + r0) A`` runs between two faces of
the box for ``r`` in [0, 1].  Along every line the objective is sampled on 51
equidistant values of ``r`` and summarized by

* ``p_crash``: fraction of crashed samples,
* ``s_opt``: fraction of successful samples that reach ``theta_star`` without
  passing a discrete local maximum (or a crash),
* ``t_sim``: mean wall time of one evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Budget, Domain, DomainError, Problem, evaluate

N_SUBSPACES = 10
N_POINTS = 51


@dataclass(frozen=True)
class SubspaceSample:
    theta_star: np.ndarray
    direction: np.ndarray  # A, in raw coordinates
    offset: float  # r0
    r: np.ndarray
    values: np.ndarray  # objective, nan where crashed
    crashed: np.ndarray
    r_star: float
    star_value: float
    wall_times: np.ndarray = field(repr=False, default=None)

    @property
    def i_star(self) -> int:
        """Position of theta_star in the merged (grid + theta_star) sequence."""
        return int(np.searchsorted(self.r, self.r_star))

    def points(self) -> np.ndarray:
        return line_point(self.theta_star, self.direction, self.offset, self.r)


@dataclass(frozen=True)
class LandscapeReport:
    problem_id: str
    p_crash: float
    s_opt: float
    t_sim: float
    n_evaluations: int
    samples: tuple = field(repr=False, default=())


def make_subspace(domain: Domain, theta_star, seed, direction=None):
    """Random line through ``theta_star`` clipped to the box: returns ``(A, r0)``.

    The direction is uniform on the sphere in normalized coordinates (the box
    mapped to the unit cube) unless ``direction`` (raw coordinates) is given.
    ``theta_star + r0 A`` and ``theta_star + (1 + r0) A`` lie on the boundary.
    """
    theta_star = np.asarray(theta_star, dtype=float).reshape(-1)
    if theta_star.size != domain.dim:
        raise DomainError("theta_star has the wrong dimension")
    if not (np.all(theta_star > domain.lower) and np.all(theta_star < domain.upper)):
        raise DomainError("theta_star must lie strictly inside the box")
    if direction is None:
        rng = np.random.default_rng(seed)
        v = rng.normal(size=domain.dim)
        while not np.linalg.norm(v) > 0:
            v = rng.normal(size=domain.dim)
        v = v / np.linalg.norm(v) * domain.width
    else:
        v = np.asarray(direction, dtype=float).reshape(-1)
        if v.size != domain.dim or not np.linalg.norm(v) > 0:
            raise ValueError("direction must be a nonzero vector of the box dimension")
    with np.errstate(divide="ignore"):
        to_upper = (domain.upper - theta_star) / v
        to_lower = (domain.lower - theta_star) / v
    moving = v != 0
    t_hi = np.min(np.where(v > 0, to_upper, to_lower)[moving])
    t_lo = np.max(np.where(v > 0, to_lower, to_upper)[moving])
    span = t_hi - t_lo
    return v * span, t_lo / span


def line_point(theta_star, A, r0, r):
    return np.asarray(theta_star, float) + (np.asarray(r, float)[..., None] + r0) * A


def _blocked(values: np.ndarray) -> np.ndarray:
    """Interior discrete local maxima of a sequence; nan (crash) counts as blocking."""
    v = np.where(np.isnan(values), np.inf, values)
    out = np.isnan(values).copy()
    if v.size >= 3:
        inner = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])
        out[1:-1] |= inner
    return out


def reaches_optimum(values, i_star: int) -> np.ndarray:
    """For every index, True when no blocking index lies strictly between it and ``i_star``.

    ``values`` holds objectives with nan for crashes; the entry at ``i_star`` is
    the optimum itself.
    """
    values = np.asarray(values, dtype=float)
    block = _blocked(values)
    n = values.size
    ok = np.zeros(n, dtype=bool)
    ok[i_star] = True
    free = True
    for j in range(i_star - 1, -1, -1):
        ok[j] = free
        if block[j]:
            free = False
    free = True
    for j in range(i_star + 1, n):
        ok[j] = free
        if block[j]:
            free = False
    return ok


def sample_line(problem: Problem, theta_star, star_value: float, A, r0,
                n_points: int = N_POINTS) -> SubspaceSample:
    r = np.linspace(0.0, 1.0, n_points)
    pts = np.clip(line_point(theta_star, A, r0, r), problem.domain.lower, problem.domain.upper)
    budget = Budget(n_points)
    values = np.empty(n_points)
    crashed = np.zeros(n_points, dtype=bool)
    times = np.empty(n_points)
    for i, p in enumerate(pts):
        ev = evaluate(problem, p, budget)
        crashed[i] = ev.crashed
        values[i] = np.nan if ev.crashed else ev.objective
        times[i] = ev.wall_time
    return SubspaceSample(
        theta_star=np.asarray(theta_star, float), direction=np.asarray(A, float),
        offset=float(r0), r=r, values=values, crashed=crashed, r_star=float(-r0),
        star_value=float(star_value), wall_times=times,
    )


def s_opt_counts(sample: SubspaceSample):
    """``(n_reaching, n_successful)`` for one line."""
    i = sample.i_star
    merged = np.insert(sample.values, i, sample.star_value)
    ok = reaches_optimum(merged, i)
    ok = np.delete(ok, i)
    success = ~sample.crashed
    return int(np.sum(ok & success)), int(np.sum(success))


def analyze(problem: Problem, theta_star=None, n_subspaces: int = N_SUBSPACES,
            n_points: int = N_POINTS, seed: int = 0) -> LandscapeReport:
    """Landscape statistics over ``n_subspaces`` random lines through ``theta_star``.

    ``theta_star`` defaults to the problem's ``known_best_theta``.
    """
    if theta_star is None:
        theta_star = problem.known_best_theta
    if theta_star is None:
        raise ValueError(f"{problem.id} has no known best point")
    theta_star = np.asarray(theta_star, dtype=float)
    star = evaluate(problem, theta_star, Budget(1))
    if star.crashed:
        raise ValueError("theta_star crashes; it cannot anchor the landscape lines")
    samples = []
    for i in range(n_subspaces):
        A, r0 = make_subspace(problem.domain, theta_star, [int(seed), i])
        samples.append(sample_line(problem, theta_star, star.objective, A, r0, n_points))
    crashed = np.concatenate([s.crashed for s in samples])
    reach = np.array([s_opt_counts(s) for s in samples])
    n_success = reach[:, 1].sum()
    return LandscapeReport(
        problem_id=problem.id,
        p_crash=float(crashed.mean()),
        s_opt=float(reach[:, 0].sum() / n_success) if n_success else float("nan"),
        t_sim=float(np.mean(np.concatenate([s.wall_times for s in samples]))),
        n_evaluations=int(crashed.size),
        samples=tuple(samples),
    )


def format_table(reports) -> str:
    """Markdown table with one row per problem."""
    lines = [
        "| problem | s_opt | p_crash | T_sim |",
        "|---|---:|---:|---:|",
    ]
    for rep in reports:
        lines.append(
            f"| {rep.problem_id} | {100 * rep.s_opt:.0f} % | {100 * rep.p_crash:.0f} % "
            f"| {_format_time(rep.t_sim)} |"
        )
    return "\n".join(lines) + "\n"


def _format_time(seconds: float) -> str:
    if seconds < 1e-3:
        return f"{seconds * 1e6:.0f} us"
    if seconds < 1.0:
        return f"{seconds * 1e3:.1f} ms"
    return f"{seconds:.2f} s"
