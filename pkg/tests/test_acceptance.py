"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL ...`` line.  Criteria 5, 6, 7
and 10 share one full desk-benchmark run (the slow part of this module).
"""

import json
import math
import os
import time

import numpy as np
import pytest

from crashbo import gpr, harness, landscape, metrics, vdp
from crashbo.acquisition import ei
from crashbo.core import Domain, Problem
from crashbo.gpr import (
    CONSTANT, GAMMA, MATERN52, QUADRATIC, SE, SIGMA_N, SMOOTHBOX, GpConfig, GpModel,
    HyperpriorSpec, KernelSpec, MeanSpec,
)

from cases import perturbed_case, prior_tuple
from conftest import sphere_evaluator
from oracles import (
    ei_monte_carlo, fd_gradient_mp, gp_posterior_mp, random_crash_dataset, random_ei_case,
    random_gp_case, random_rank_sum_case, rank_sum_p_enumerated,
)

KINDS = [(k, m) for k in (SE, MATERN52) for m in (CONSTANT, QUADRATIC)]


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return report


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = harness.desk_config(out / "run1", parallelism=os.cpu_count() or 1)
    start = time.perf_counter()
    index = harness.run_experiment(cfg)
    elapsed = time.perf_counter() - start
    index, traces = harness.load_results(cfg.output)
    results = {r.problem_id: r
               for r in harness._problem_results(index, traces, harness._registry(None))}
    return dict(config=cfg, index=index, results=results, elapsed=elapsed, root=out)


def _elapsed(index, problems, optimizers):
    return sum(r["elapsed"] for r in index["runs"]
               if r["problem"] in problems and r["optimizer"] in optimizers)


def _finals(res, optimizer):
    seeds = sorted({s for o, s in res.curves if o == optimizer})
    return np.array([res.final((optimizer, s)) for s in seeds])


def test_criterion_1_gp_posterior(verdict):
    rng = np.random.default_rng(2024)
    cases = [random_gp_case(rng, kind=KINDS[i % 4][0], mean_kind=KINDS[i % 4][1])
             for i in range(100)]
    start = time.perf_counter()
    preds = []
    for kind, ls, sf2, mk, coef, X, y, Xq in cases:
        m = GpModel.build(KernelSpec(kind, ls, sf2), MeanSpec(mk, coef), X, y)
        mu, var = m.predict_standardized(Xq)
        preds.append((mu, np.sqrt(var)))
    lib_time = time.perf_counter() - start
    start = time.perf_counter()
    worst, failing = 0.0, 0
    for (kind, ls, sf2, mk, coef, X, y, Xq), (mu, sd) in zip(cases, preds):
        omu, osd = gp_posterior_mp(kind, ls, sf2, mk, coef, X, y, Xq, SIGMA_N**2)
        rel = max(np.max(np.abs(mu - omu) / np.abs(omu)), np.max(np.abs(sd - osd) / np.abs(osd)))
        worst = max(worst, rel)
        failing += rel > 1e-8
    oracle_time = time.perf_counter() - start
    ok = worst <= 1e-8 and lib_time < 10
    verdict(1, ok, f"max rel err {worst:.2e} over 100 instances, {failing} above 1e-8; "
                   f"library {lib_time:.2f} s, oracle {oracle_time:.1f} s")
    assert ok


def test_criterion_2_gradient(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        kind, mk = KINDS[i % 4]
        prior = HyperpriorSpec(kind=(SMOOTHBOX, GAMMA)[(i // 4) % 2])
        X, y, kernel, mean = perturbed_case(rng, int(rng.integers(1, 4)), kind, mk)
        _, grad = gpr.log_posterior(kernel, mean, prior, X, y)
        fd = fd_gradient_mp(kind, mk, prior_tuple(prior), X, y, gpr.pack(kernel, mean), SIGMA_N)
        worst = max(worst, np.max(np.abs(grad - fd) / np.abs(fd)))
    ok = worst < 1e-4
    verdict(2, ok, f"max rel err {worst:.2e} over 50 instances (central FD, step 1e-5)")
    assert ok


def test_criterion_3_ei(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        mu, sigma, best = random_ei_case(rng)
        ref = ei_monte_carlo(mu, sigma, best, n=10**6, qmc_seed=i)
        worst = max(worst, abs(ei(mu, sigma, best) - ref) / ref)
    ok = worst < 1e-2
    verdict(3, ok, f"max rel err {worst:.2e} over 100 cases vs 1e6-draw estimate")
    assert ok


def test_criterion_4_vdp_bounds(verdict):
    rng = np.random.default_rng(4)
    n_virtual = below = above = at_min = 0
    for i in range(1000):
        X, y, crashed = random_crash_dataset(rng)
        ds = vdp.augment(X, y, crashed, GpConfig(), np.random.default_rng(i))
        v = ds.y[ds.virtual]
        n_virtual += v.size
        below += int(np.sum(ds.j_min + vdp.DEFAULT_GAMMA * ds.sigma > v))
        above += int(np.sum(v > ds.j_max))
        at_min += int(np.any(v <= ds.y.min()))
    ok = below == 0 and above == 0 and at_min == 0
    verdict(4, ok, f"{n_virtual} virtual values: {below} below J_min + 3 sigma, {above} above "
                   f"J_max; {at_min} datasets where a virtual value is the minimum")
    assert ok


def test_criterion_5_vdp_efficacy(desk, verdict):
    medians, pvals = {}, {}
    for pid in ("sphere_crash_2d", "cartpole_d2"):
        res = desk["results"][pid]
        v, f = _finals(res, "MES-SE-V"), _finals(res, "MES-SE-F")
        medians[pid] = (metrics.quantile(v, 0.5), metrics.quantile(f, 0.5))
        pvals[pid] = metrics.wilcoxon_one_sided(v, f)
    runtime = _elapsed(desk["index"], medians, ("MES-SE-V", "MES-SE-F", "Rand"))
    ok = (all(mv <= mf for mv, mf in medians.values())
          and any(mv < mf and pvals[p] < 0.05 for p, (mv, mf) in medians.items())
          and runtime < 300)
    detail = "; ".join(f"{p}: V {mv:.3g} vs F {mf:.3g}, p={pvals[p]:.2g}"
                       for p, (mv, mf) in medians.items())
    verdict(5, ok, f"{detail}; runtime {runtime:.0f} s")
    assert ok


def test_criterion_6_pattern_vs_random(desk, verdict):
    res = desk["results"]["cartpole_d2"]
    ps, rand = _finals(res, "PS"), _finals(res, "Rand")
    p = metrics.wilcoxon_one_sided(ps, rand)
    runtime = _elapsed(desk["index"], ("cartpole_d2",), ("PS", "Rand"))
    med_ps, med_rand = metrics.quantile(ps, 0.5), metrics.quantile(rand, 0.5)
    ok = med_ps <= 0.2 and abs(med_rand - 1.0) <= 1e-12 and p < 0.05 and runtime < 120
    verdict(6, ok, f"PS median {med_ps:.3g}, Rand median {med_rand:.12g}, p={p:.2g}, "
                   f"runtime {runtime:.0f} s")
    assert ok


def test_criterion_7_scaled_regret(desk, verdict):
    devs = {}
    for pid, res in desk["results"].items():
        seeds = sorted({s for o, s in res.curves if o == "Rand"})
        med = np.median([res.at(("Rand", s), 25 * res.dim) for s in seeds])
        devs[pid] = abs(med - 1.0)
    ok = len(devs) == 4 and max(devs.values()) <= 1e-12
    verdict(7, ok, ", ".join(f"{p} |median-1|={d:.1e}" for p, d in devs.items()))
    assert ok


def test_criterion_8_wilcoxon(verdict):
    exact = rank_sum_p_enumerated([1, 2, 3], [4, 5, 6])
    closed = metrics.wilcoxon_one_sided([1, 2, 3], [4, 5, 6])
    rng = np.random.default_rng(8)
    gap = 0.0
    for _ in range(200):
        a, b = random_rank_sum_case(rng)
        gap = max(gap, abs(metrics.wilcoxon_one_sided(a, b, "normal") - rank_sum_p_enumerated(a, b)))
    ok = exact == 0.05 and abs(closed - 0.05) < 1e-15 and gap < 0.02
    verdict(8, ok, f"enumerated {exact}, library {closed}, max normal-vs-exact gap {gap:.4f}")
    assert ok


def test_criterion_9_landscape(verdict):
    def half(theta):
        if theta[0] > 0:
            return None, True, None
        return float(np.sum(theta**2)), False, None

    box = Domain([-1.0, -1.0], [1.0, 1.0])
    crash = landscape.analyze(Problem("half", box, half), theta_star=[0.0, 0.0])
    bowl = landscape.analyze(Problem("bowl", box, sphere_evaluator([0.2, -0.1])),
                             theta_star=[0.2, -0.1])
    ok = (crash.n_evaluations == 510 and abs(crash.p_crash - 0.5) <= 0.1 and bowl.s_opt == 1.0)
    verdict(9, ok, f"half-space p_crash {crash.p_crash:.3f} (true 0.5), bowl s_opt {bowl.s_opt:.0%}")
    assert ok


def _trace_rows(root):
    out = {}
    for path in sorted((root / "traces").rglob("*.jsonl")):
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        for r in rows:
            r.pop("wall_time")
        out[str(path.relative_to(root))] = rows
    return out


def test_criterion_10_determinism(desk, verdict):
    first = desk["config"]
    again = harness.ExperimentConfig(**{**first.to_dict(), "output": str(desk["root"] / "run2")})
    harness.run_experiment(again)
    a, b = _trace_rows(desk["root"] / "run1"), _trace_rows(desk["root"] / "run2")
    expected = 4 * 8 * 20
    same = len(a) == expected and a == b
    fast = desk["elapsed"] < 600
    ok = same and fast and not desk["index"]["failures"]
    verdict(10, ok, f"{len(a)} trace files, identical modulo wall_time: {same}; full desk run "
                    f"{desk['elapsed']:.0f} s on {first.workers} worker(s) (limit 600 s)")
    assert ok
