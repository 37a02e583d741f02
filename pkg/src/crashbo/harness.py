"""Experiment runner, trace persistence and report generation.

Layout of a results directory::

    index.json                                   config, runs (with timings), failures
    traces/<problem>/<optimizer>/seed_000.jsonl  one evaluation per line

A report adds ``table.md``/``table.csv`` (median scaled regret at 25 d with
significance marks), ``summary.csv`` (every best-so-far value), ``curves.csv``
with three SVG charts, and ``landscape.md``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import baselines, bo, landscape, metrics, testbed
from .core import Evaluation, Trace, normalize

log = logging.getLogger(__name__)

ENV_WORKERS = "CRASHBO_WORKERS"
BASELINES = ("Rand", "Grid", "PS")
DESK_PROBLEMS = ("sphere_crash_2d", "noisy_bowl_3d", "cartpole_d2", "cartpole_d4")
DESK_OPTIMIZERS = (
    "Rand", "Grid", "PS", "MES-SE-F", "MES-SE-V", "MES-MA-V", "EI-SE-V", "UCB-SE-F",
)
SIGNIFICANCE = 0.05
TAIL_QUANTILE = 0.8


class ConfigError(ValueError):
    pass


def default_parallelism() -> int:
    value = os.environ.get(ENV_WORKERS, "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {value!r}") from None
    return max(n, 1)


@dataclass
class ExperimentConfig:
    problems: list
    optimizers: list
    output: str
    budget_multiplier: int = 25
    seeds: int = 20
    parallelism: int | None = None
    master_seed: int = 0
    registry: str | None = None

    def __post_init__(self):
        self.problems = list(self.problems)
        self.optimizers = list(self.optimizers)
        if not self.problems or not self.optimizers:
            raise ConfigError("config needs at least one problem and one optimizer")
        if self.budget_multiplier < 1 or self.seeds < 1:
            raise ConfigError("budget_multiplier and seeds must be positive")
        if len(set(self.problems)) != len(self.problems):
            raise ConfigError("duplicate problem ids")
        if len(set(self.optimizers)) != len(self.optimizers):
            raise ConfigError("duplicate optimizers")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def workers(self) -> int:
        return self.parallelism if self.parallelism else default_parallelism()


def desk_config(output, **overrides) -> ExperimentConfig:
    """The default campaign: four problems, eight optimizers, 20 seeds."""
    data = dict(problems=list(DESK_PROBLEMS), optimizers=list(DESK_OPTIMIZERS), output=str(output))
    data.update(overrides)
    return ExperimentConfig(**data)


def optimizer_names() -> list:
    return list(BASELINES) + list(bo.STUDY_VARIANTS)


def check_optimizer(name: str) -> None:
    if name in BASELINES:
        return
    try:
        bo.parse_variant(name)
    except ValueError:
        raise ConfigError(f"unknown optimizer {name!r}") from None


def run_optimizer(name: str, problem, budget: int, seed: int, shared_initial,
                  budget_multiplier: int = 25) -> Trace:
    if name == "Rand":
        return baselines.random_search(problem, budget, seed, shared_initial)
    if name == "PS":
        return baselines.pattern_search(problem, budget, seed, shared_initial)
    if name == "Grid":
        return baselines.grid_search(problem, seed=seed, budget_multiplier=budget_multiplier)
    return bo.run(problem, bo.parse_variant(name), budget, seed, shared_initial)


def derive_seed(master_seed: int, problem_id: str, seed_index: int) -> int:
    """Seed of one (problem, seed index) cell, independent of the optimizer list."""
    key = zlib.crc32(problem_id.encode("utf-8"))
    ss = np.random.SeedSequence([int(master_seed), key, int(seed_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------- traces


def trace_lines(trace: Trace) -> str:
    rows = []
    for k, ev in enumerate(trace.evaluations, start=1):
        rows.append(json.dumps({
            "k": k,
            "theta": [float(v) for v in ev.theta],
            "objective": ev.objective,
            "crashed": ev.crashed,
            "fallback": ev.fallback_objective,
            "wall_time": ev.wall_time,
        }))
    return "".join(row + "\n" for row in rows)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: Trace, path) -> None:
    _atomic_write(Path(path), trace_lines(trace))


def read_trace(path, seed: int = 0, optimizer_id: str = "", problem_id: str = "") -> Trace:
    trace = Trace(seed=seed, optimizer_id=optimizer_id, problem_id=problem_id)
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        row = json.loads(line)
        if row["k"] != i:
            raise ValueError(f"{path}: line {i} has k={row['k']}")
        trace.append(Evaluation(
            theta=np.asarray(row["theta"], dtype=float),
            objective=row["objective"],
            crashed=row["crashed"],
            fallback_objective=row["fallback"],
            wall_time=row["wall_time"],
        ))
    return trace


def trace_path(problem_id: str, optimizer: str, seed_index: int) -> str:
    return f"traces/{problem_id}/{optimizer}/seed_{seed_index:03d}.jsonl"


# ---------------------------------------------------------------- running


@lru_cache(maxsize=None)
def _registry(path):
    return testbed.load_registry(path)


def _run_task(task):
    problem_id, optimizer, seed_index, cfg = task
    out = Path(cfg["output"])
    rel = trace_path(problem_id, optimizer, seed_index)
    seed = derive_seed(cfg["master_seed"], problem_id, seed_index)
    record = dict(problem=problem_id, optimizer=optimizer, seed_index=seed_index, seed=seed,
                  path=rel)
    start = time.perf_counter()
    try:
        problem = testbed.get_problem(problem_id, _registry(cfg["registry"]))
        budget = cfg["budget_multiplier"] * problem.dim
        shared = bo.initial_design(problem.dim, seed)
        trace = run_optimizer(optimizer, problem, budget, seed, shared, cfg["budget_multiplier"])
        write_trace(trace, out / rel)
        record.update(status="ok", n_evaluations=len(trace))
    except Exception as exc:  # keep the campaign going; failures go to the index
        log.exception("run %s/%s/%d failed", problem_id, optimizer, seed_index)
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    record["elapsed"] = time.perf_counter() - start
    return record


def run_experiment(config: ExperimentConfig, progress=None) -> dict:
    """Run every (problem, optimizer, seed) cell; returns the index written to disk."""
    registry = _registry(config.registry)
    unknown = [p for p in config.problems if p not in registry]
    if unknown:
        raise ConfigError(f"unknown problem ids {unknown}; known: {sorted(registry)}")
    for name in config.optimizers:
        check_optimizer(name)
    cfg = config.to_dict()
    tasks = [
        (p, o, s, cfg)
        for p in config.problems
        for s in range(config.seeds)
        for o in config.optimizers
    ]
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for record in pool.map(_run_task, tasks, chunksize=1):
                records.append(record)
                if progress:
                    progress(record)
    else:
        for task in tasks:
            record = _run_task(task)
            records.append(record)
            if progress:
                progress(record)
    index = {
        "config": cfg,
        "runs": [r for r in records if r["status"] == "ok"],
        "failures": [r for r in records if r["status"] != "ok"],
    }
    _atomic_write(out / "index.json", json.dumps(index, indent=1) + "\n")
    return index


def load_results(results_dir):
    """``(index, {(problem, optimizer, seed_index): Trace})``."""
    root = Path(results_dir)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.json in {root}")
    index = json.loads(index_path.read_text())
    traces = {}
    for r in index["runs"]:
        traces[(r["problem"], r["optimizer"], r["seed_index"])] = read_trace(
            root / r["path"], r["seed"], r["optimizer"], r["problem"]
        )
    if not traces:
        raise ValueError(f"{root} holds no completed runs")
    return index, traces


# ---------------------------------------------------------------- report


@dataclass
class ProblemResults:
    problem_id: str
    dim: int
    known_best: float
    curves: dict  # (optimizer, seed_index) -> best-so-far
    scaled: dict = field(default_factory=dict)

    def at(self, key, k: int) -> float:
        """Scaled regret after ``k`` evaluations (a shorter run keeps its final value)."""
        c = self.scaled[key]
        return float(c[min(k, len(c)) - 1])

    def final(self, key) -> float:
        """Scaled regret at 25 d, or at the run's own length when it exceeds it (Grid)."""
        c = self.scaled[key]
        return float(c[-1])


def _problem_results(index, traces, registry) -> list:
    m = index["config"]["budget_multiplier"]
    out = []
    for pid in index["config"]["problems"]:
        keys = [k for k in traces if k[0] == pid]
        if not keys:
            continue
        curves = {(o, s): traces[(p, o, s)].best_so_far() for p, o, s in keys}
        observed = min(float(c[-1]) for c in curves.values())
        known = registry[pid].known_best if pid in registry else None
        known_best = observed if known is None else min(float(known), observed)
        dim = traces[keys[0]].evaluations[0].theta.size
        res = ProblemResults(pid, dim, known_best, curves)
        res.scaled = metrics.scaled_regret(curves, known_best, dim, m)
        out.append(res)
    return out


def _optimizers(index, results):
    present = {o for r in results for o, _ in r.curves}
    return [o for o in index["config"]["optimizers"] if o in present]


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if abs(x) >= 10:
        return f"{x:.3g}"
    return f"{x:.2f}"


def results_table(index, results):
    """Rows of the 25 d table: one per (problem, optimizer)."""
    m = index["config"]["budget_multiplier"]
    optimizers = _optimizers(index, results)
    rows = []
    for res in results:
        seeds = sorted({s for _, s in res.curves})
        values = {o: np.array([res.final((o, s)) for s in seeds]) for o in optimizers}
        cell = {(res.problem_id, o, s): values[o][i] for o in optimizers for i, s in enumerate(seeds)}
        ranks = metrics.average_rank(cell)
        medians = {o: metrics.quantile(values[o], 0.5) for o in optimizers}
        order = sorted(optimizers, key=lambda o: (ranks[o], medians[o]))
        best = order[0]
        for pos, o in enumerate(order, start=1):
            if o == best:
                p = float("nan")
            elif len(seeds) >= 3:
                p = metrics.wilcoxon_one_sided(values[best], values[o])
            else:
                p = float("nan")
            rows.append(dict(
                problem=res.problem_id, dim=res.dim, optimizer=o, position=pos,
                average_rank=ranks[o], median=medians[o],
                q80=metrics.quantile(values[o], TAIL_QUANTILE), p_vs_best=p,
                best=o == best,
                not_worse=o == best or not (p < SIGNIFICANCE),
                evaluations=len(res.curves[(o, seeds[0])]), budget=m * res.dim,
            ))
    return rows


def table_markdown(index, results, rows) -> str:
    optimizers = _optimizers(index, results)
    lookup = {(r["problem"], r["optimizer"]): r for r in rows}
    head = "| Algorithm | " + " | ".join(f"{r.problem_id} (d = {r.dim})" for r in results) + " |"
    lines = [
        "Median scaled regret after 25 d evaluations, prefixed by the position of the",
        "optimizer within the problem (by average rank).  Best: **_x_**; not",
        "significantly worse than the best (one-sided rank-sum test, 5 %): **x**;",
        "worse than random search: (x).",
        "",
        head,
        "|---|" + "---:|" * len(results),
    ]
    for o in optimizers:
        cells = []
        for res in results:
            r = lookup[(res.problem_id, o)]
            text = f"{r['position']}. {_fmt(r['median'])}"
            if r["median"] > 1.0:
                text = f"({text})"
            if r["best"]:
                text = f"**_{text}_**"
            elif r["not_worse"]:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {o} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _csv(rows, columns) -> str:
    def cell(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else repr(v)
        return str(v)

    lines = [",".join(columns)]
    lines += [",".join(cell(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def summary_rows(results):
    for res in results:
        for (o, s) in sorted(res.curves):
            curve, scaled = res.curves[(o, s)], res.scaled[(o, s)]
            for k in range(len(curve)):
                yield dict(problem=res.problem_id, optimizer=o, seed=s, k=k + 1,
                           best_so_far=float(curve[k]), scaled_regret=float(scaled[k]))


def curve_rows(index, results):
    """Average rank, mean median and mean 80 % quantile of scaled regret vs k / d."""
    m = index["config"]["budget_multiplier"]
    optimizers = _optimizers(index, results)
    rows = []
    for rel in range(1, m + 1):
        cell, med, q80 = {}, {o: [] for o in optimizers}, {o: [] for o in optimizers}
        for res in results:
            k = rel * res.dim
            seeds = sorted({s for _, s in res.curves})
            for o in optimizers:
                vals = [res.at((o, s), k) for s in seeds]
                for s, v in zip(seeds, vals):
                    cell[(res.problem_id, o, s)] = v
                med[o].append(metrics.quantile(vals, 0.5))
                q80[o].append(metrics.quantile(vals, TAIL_QUANTILE))
        ranks = metrics.average_rank(cell)
        for o in optimizers:
            rows.append(dict(relative_evaluations=rel, optimizer=o, average_rank=float(ranks[o]),
                             median_scaled_regret=float(np.mean(med[o])),
                             q80_scaled_regret=float(np.mean(q80[o]))))
    return rows


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def line_chart_svg(series: dict, title: str, ylabel: str, log_y: bool = False,
                   xlabel: str = "evaluations / d", width: int = 640, height: int = 400) -> str:
    """Minimal SVG line chart; non-finite (and, on log axes, nonpositive) points are dropped."""
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(y) & ((y > 0) if log_y else True)
        clean[name] = (x[ok], np.log10(y[ok]) if log_y else y[ok])
    xs = np.concatenate([v[0] for v in clean.values()] + [np.zeros(0)])
    ys = np.concatenate([v[1] for v in clean.values()] + [np.zeros(0)])
    x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    if log_y:
        y0, y1 = math.floor(y0), math.ceil(y1)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{ylabel}</text>',
    ]
    for t in np.linspace(x0, x1, 6):
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    ticks = np.arange(y0, y1 + 1) if log_y else np.linspace(y0, y1, 6)
    for t in ticks:
        label = f"1e{int(t)}" if log_y else f"{t:.3g}"
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{py(t):.1f}" y2="{py(t):.1f}" '
                   f'stroke="#ddd"/>')
        out.append(f'<text x="{left - 5}" y="{py(t) + 4:.1f}" text-anchor="end">{label}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = _COLORS[i % len(_COLORS)]
        if x.size:
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 30}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def landscape_reports(problem_ids, registry=None, seed: int = 0):
    registry = _registry(None) if registry is None else registry
    reports = []
    for pid in problem_ids:
        problem = testbed.get_problem(pid, registry)
        if problem.known_best_theta is None:
            log.warning("no known best point for %s; skipping its landscape", pid)
            continue
        reports.append(landscape.analyze(problem, seed=seed))
    return reports


def report(results_dir, output=None, with_landscape: bool = True, landscape_seed: int = 0) -> dict:
    """Write tables, curves and charts for a results directory; returns their paths."""
    index, traces = load_results(results_dir)
    registry = _registry(index["config"].get("registry"))
    results = _problem_results(index, traces, registry)
    out = Path(results_dir if output is None else output)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    rows = results_table(index, results)
    paths["table.md"] = out / "table.md"
    _atomic_write(paths["table.md"], table_markdown(index, results, rows))
    paths["table.csv"] = out / "table.csv"
    _atomic_write(paths["table.csv"], _csv(rows, [
        "problem", "dim", "optimizer", "position", "average_rank", "median", "q80",
        "p_vs_best", "best", "not_worse", "evaluations", "budget",
    ]))
    paths["summary.csv"] = out / "summary.csv"
    _atomic_write(paths["summary.csv"], _csv(list(summary_rows(results)), [
        "problem", "optimizer", "seed", "k", "best_so_far", "scaled_regret",
    ]))
    crows = curve_rows(index, results)
    paths["curves.csv"] = out / "curves.csv"
    _atomic_write(paths["curves.csv"], _csv(crows, [
        "relative_evaluations", "optimizer", "average_rank", "median_scaled_regret",
        "q80_scaled_regret",
    ]))
    for column, title, log_y in (
        ("average_rank", "Average rank", False),
        ("median_scaled_regret", "Median scaled regret (mean over problems)", True),
        ("q80_scaled_regret", "80 % quantile of scaled regret (mean over problems)", True),
    ):
        series = {}
        for o in _optimizers(index, results):
            sel = [r for r in crows if r["optimizer"] == o]
            series[o] = ([r["relative_evaluations"] for r in sel], [r[column] for r in sel])
        name = f"{column}.svg"
        paths[name] = out / name
        _atomic_write(paths[name], line_chart_svg(series, title, column.replace("_", " "), log_y))
    if with_landscape:
        reps = landscape_reports([r.problem_id for r in results], registry, landscape_seed)
        paths["landscape.md"] = out / "landscape.md"
        _atomic_write(paths["landscape.md"], landscape.format_table(reps))
    return paths


# ---------------------------------------------------------------- calibration


def calibrate(problem, n_evaluations: int = 100_000, seed: int = 0):
    """Best point of a random-search plus pattern-search campaign.

    Half the evaluations go to random search; pattern search (with restarts)
    then starts from the best random point.  A documented optimum of the
    problem, if any, competes as well.  Returns ``(known_best, theta)``.
    """
    half = n_evaluations // 2
    rand = baselines.random_search(problem, half, seed, shared_initial=np.zeros((0, problem.dim)))
    best = _best(rand)
    start = None if best is None else normalize(problem.domain, best[0])[None, :]
    ps = baselines.pattern_search(problem, n_evaluations - half, seed, shared_initial=start)
    candidates = [c for c in (best, _best(ps)) if c is not None]
    documented = getattr(problem.evaluator, "spec", None)
    if documented is not None and documented.optimum_theta is not None:
        theta = documented.optimum_theta
        value, crashed, _ = problem.evaluator(theta)
        if not crashed:
            candidates.append((theta, value))
    if not candidates:
        raise ValueError(f"no successful evaluation of {problem.id}")
    theta, value = min(candidates, key=lambda c: c[1])
    return float(value), np.asarray(theta, float)


def _best(trace):
    ok = [ev for ev in trace.evaluations if not ev.crashed]
    if not ok:
        return None
    ev = min(ok, key=lambda e: e.objective)
    return ev.theta, ev.objective
