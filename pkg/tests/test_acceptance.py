"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``[PASS]``/``[FAIL]``/``[SKIP]`` line to the terminal
summary.  The sweep behind criteria 4 and 5 is the slowest part (about an
hour on one core).
"""
import math
import os
import time

import mpmath
import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_instance
from kdro.bandwidth import plugin_bandwidth
from kdro.config import preset
from kdro.dro import dual_gradient, dual_hessian, dual_objective, solve_alpha
from kdro.experiments import (
    ROW_DRO,
    ROW_MEAN_NRO,
    ROW_NRO,
    ROW_PERT_DRO,
    ROW_PERT_NRO,
    discrete_row,
    run_experiment,
    sweep_by_eta,
    sweep_by_n,
    warfarin_row,
    write_outputs,
)
from kdro.kernels import KernelFamily, kernel_moments
from kdro.simgen import DgpSpec, load_warfarin_csv, oracle_q_star, warfarin_split
from oracles import grid_dual, mp_phi

ETAS = (0.05, 0.1, 0.2, 0.3, 0.4)


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


def fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


def test_criterion_01_oracle_optimum():
    t0 = time.perf_counter()
    q = oracle_q_star(DgpSpec(), eta=0.05)
    elapsed = time.perf_counter() - t0
    record(1, abs(q - 6.41) <= 0.02 and elapsed < 60, f"Q* = {q:.6f} in {elapsed:.1f} s (target 6.41 +- 0.02, < 60 s)")


@pytest.fixture(scope="module")
def table1():
    t0 = time.perf_counter()
    run = run_experiment(preset("table1"))
    return run.report("table1"), time.perf_counter() - t0


def test_criterion_02_table1_first_row(table1):
    rep, elapsed = table1
    means = rep.means(ROW_DRO)
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    ok = 6.09 <= means[0] <= 6.39 and decreasing and elapsed < 1800
    record(2, ok, f"continuous row {fmt(means)}, first in [6.09, 6.39], strictly decreasing, {elapsed:.0f} s")


def test_criterion_03_table1_ordering(table1):
    rep, _ = table1
    cont = rep.means(ROW_DRO)
    gaps = [min(c - d for c, d in zip(cont, rep.means(discrete_row(k)))) for k in (2, 3, 4)]
    record(3, min(gaps) > 0.2, f"smallest continuous-minus-discrete gap per k=2,3,4: {fmt(gaps)} (need > 0.2)")


@pytest.fixture(scope="module")
def sweep():
    """One run serves both study tables: the test stream does not depend on the training size."""
    cfg = preset("table3").replace(eta_test=ETAS)
    run = run_experiment(cfg)
    return (
        sweep_by_eta(cfg, run.results, run.excluded, 2000),
        sweep_by_n(cfg, run.results, run.excluded, 0.2),
    )


def test_criterion_04_table2_ordering(sweep):
    rep, _ = sweep
    dro_gap = [a - b for a, b in zip(rep.means(ROW_DRO), rep.means(ROW_NRO))]
    pert_gap = [a - b for a, b in zip(rep.means(ROW_PERT_DRO), rep.means(ROW_PERT_NRO))]
    ok = min(dro_gap) > 0.3 and min(pert_gap) > 0.3
    record(4, ok, f"Q_DRO gaps {fmt(dro_gap)}, Q_pert gaps {fmt(pert_gap)} over eta_test (need all > 0.3)")


def test_criterion_05_table3_trend(sweep):
    _, rep = sweep
    dro = rep.means(ROW_DRO)
    nro = rep.means(ROW_NRO)
    drops = [a - b for a, b in zip(dro, dro[1:]) if b < a]
    monotone = len(drops) == 0 or (len(drops) == 1 and drops[0] <= 0.05)
    spread = max(nro) - min(nro)
    ok = monotone and spread < 0.15
    record(5, ok, f"Q_DRO(pi_DRO) over N {fmt(dro)}, Q_DRO(pi_NRO) {fmt(nro)} (spread {spread:.3f} < 0.15)")


def test_criterion_06_warfarin():
    path = os.environ.get("WARFARIN_CSV")
    if not path:
        ACCEPTANCE_LINES.append("[SKIP] criterion 6: set WARFARIN_CSV to the prepared covariate file")
        pytest.skip("WARFARIN_CSV not set")
    cov = load_warfarin_csv(path)
    train, test = warfarin_split(cov.age)
    rep = run_experiment(preset("warfarin").replace(warfarin_csv=path)).report("warfarin")
    nro = rep.cell(ROW_MEAN_NRO, "value")
    dro = rep.cell(warfarin_row(0.4), "value")
    p5_wins = sum(rep.cell(warfarin_row(e), "value").percentiles[0] > nro.percentiles[0] for e in preset("warfarin").eta_train)
    ok = (train.size, test.size) == (1983, 1323) and dro.mean > nro.mean and p5_wins >= 4
    record(6, ok, f"split {train.size}/{test.size}, mean DRO(0.4) {dro.mean:.3f} vs NRO {nro.mean:.3f}, p5 wins {p5_wins}/5")


def test_criterion_07_dual_solver_oracle():
    rng = np.random.default_rng(2024)
    worst_alpha = worst_value = 0.0
    for _ in range(100):
        z, y, eta = random_instance(rng)
        sol = solve_alpha(z, y, eta)
        a_ref, v_ref = grid_dual(z, y, eta)
        worst_alpha = max(worst_alpha, abs(sol.alpha_star - a_ref) / max(1.0, a_ref))
        worst_value = max(worst_value, abs(sol.q_value - v_ref))
    ok = worst_alpha <= 1e-5 and worst_value <= 1e-7
    record(7, ok, f"100 instances, max alpha error {worst_alpha:.2e} (scaled by max(1, alpha)), max value error {worst_value:.2e}")


def central_differences(z, y, eta, alpha):
    """Central first and second differences of the dual at 40 significant digits."""
    with mpmath.workdps(40):
        a = mpmath.mpf(alpha)
        step = a * mpmath.mpf("1e-10")
        lo, mid, hi = (mp_phi(z, y, eta, a + s * step) for s in (-1, 0, 1))
        return float((hi - lo) / (2 * step)), float((hi - 2 * mid + lo) / step**2)


def relative_error(got, ref):
    return abs(got - ref) / max(abs(ref), 1e-12)


def test_criterion_08_derivatives():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        z, y, eta = random_instance(rng)
        alpha = float(np.exp(rng.uniform(math.log(0.05), math.log(50.0))))
        g_ref, h_ref = central_differences(z, y, eta, alpha)
        worst = max(
            worst,
            relative_error(dual_gradient(z, y, alpha, eta), g_ref),
            relative_error(dual_hessian(z, y, alpha, eta), h_ref),
        )
    record(8, worst <= 1e-6, f"100 instances, max relative derivative error {worst:.2e}")


def test_criterion_09_invariants():
    rng = np.random.default_rng(9)
    failures = {"concavity": 0, "monotone": 0, "bracket": 0, "normalization": 0, "zero radius": 0}
    alphas = np.exp(np.linspace(-4, 4, 17))
    for _ in range(1000):
        z, y, eta = random_instance(rng)
        sol = solve_alpha(z, y, eta)
        if any(dual_hessian(z, y, a, eta) > 1e-15 for a in alphas) or max(
            dual_objective(z, y, a, eta) for a in alphas
        ) > sol.q_value + 1e-9:
            failures["concavity"] += 1
        values = [solve_alpha(z, y, e).q_value for e in sorted((0.0, 0.05, eta, 2 * eta, 1.5))]
        if any(b > a + 1e-10 for a, b in zip(values, values[1:])):
            failures["monotone"] += 1
        mean = float(z @ y / z.sum())
        if not (y.min() - 1e-12 <= sol.q_value <= mean + 1e-12):
            failures["bracket"] += 1
        scale = float(rng.uniform(1e-3, 1e3))
        if not math.isclose(solve_alpha(scale * z, y, eta).q_value, sol.q_value, rel_tol=1e-10, abs_tol=1e-10):
            failures["normalization"] += 1
        if not math.isclose(values[0], mean, rel_tol=1e-12):
            failures["zero radius"] += 1
    bad = {k: v for k, v in failures.items() if v}
    record(9, not bad, f"1000 instances, failures {bad or 'none'}")


def test_criterion_10_kernels_and_scaling():
    closed = {
        KernelFamily.EPANECHNIKOV: (1.0, 0.2, 0.6),
        KernelFamily.GAUSSIAN: (1.0, 1.0, 1.0 / (2.0 * math.sqrt(math.pi))),
    }
    moment_err = max(abs(a - b) for f, ref in closed.items() for a, b in zip(kernel_moments(f), ref))
    ratios = [plugin_bandwidth(b, v, 32 * n) / plugin_bandwidth(b, v, n) for b, v, n in [(0.3, 2.0, 100), (-1.7, 0.05, 2500)]]
    scaling_err = max(abs(r - 0.5) for r in ratios)
    ok = moment_err < 1e-8 and scaling_err < 1e-13
    record(10, ok, f"max moment error {moment_err:.1e}; h(32N)/h(N) - 1/2 = {scaling_err:.1e}")


def small_configs(tmp_path):
    rng = np.random.default_rng(0)
    csv = tmp_path / "covariates.csv"
    lines = ["age,dose," + ",".join(f"x_{j}" for j in range(3))]
    for age in rng.integers(20, 90, size=80):
        lines.append(",".join([str(age), "30"] + [repr(float(v)) for v in rng.normal(size=3)]))
    csv.write_text("\n".join(lines) + "\n")
    small = dict(replications=2, n_test=200, perturbations=5)
    return {
        "eval": preset("eval").replace(**small),
        "learn": preset("learn").replace(n_train=(200,), **small),
        "table1": preset("table1").replace(n_train=(200,), **small),
        "table2": preset("table2").replace(n_train=(200,), eta_test=(0.1, 0.3), **small),
        "table3": preset("table3").replace(n_train=(150, 200), **small),
        "warfarin": preset("warfarin").replace(warfarin_csv=str(csv), eta_train=(0.3,), **small),
    }


def test_criterion_11_determinism(tmp_path):
    mismatched = []
    for name, cfg in small_configs(tmp_path).items():
        dirs = [tmp_path / f"{name}-{i}" for i in range(2)]
        for d in dirs:
            write_outputs(run_experiment(cfg), d)
        for path in sorted(dirs[0].glob("*.csv")):
            if path.read_bytes() != (dirs[1] / path.name).read_bytes():
                mismatched.append(f"{name}/{path.name}")
    record(11, not mismatched, f"6 experiments run twice, mismatched CSVs: {mismatched or 'none'}")
