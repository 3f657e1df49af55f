"""Seeded Monte-Carlo pipelines behind the ``experiment``, ``learn`` and ``eval`` commands.

Seeding scheme (stable across versions): replication ``r`` of a run with
master seed ``s`` draws every random quantity from
``SeedSequence(s, spawn_key=(r, tag, ...))`` where ``tag`` names the use:

====  ============================================================
tag   stream
====  ============================================================
0     design randomness (sparsity mask of the high-dimensional DGP)
1     training sample (extra key: training size)
2     test sample
3     KL perturbations of the test sample
4     learner restarts (extra keys: training size, policy index)
5     fresh outcome noise for counterfactual means
====  ============================================================

Because the test stream does not depend on the training size, a training
size sweep shares its test sets across columns.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bandwidth import select_bandwidth
from .baselines import assign_bins, discrete_dro_evaluate, discrete_dro_learn, discrete_propensity, discretize_treatment
from .config import ExperimentConfig
from .dro import evaluate_policy
from .errors import ConfigError, ExclusionLimitExceeded, KdroError, MissingDataFile, VerificationFailed
from .kernels import KernelConfig
from .learner import learn_nonrobust, learn_policy
from .model import Linear, ObservationSet
from .report import EvalReport, build_report
from .simgen import build_dgp, load_warfarin_csv, perturb_kl, q_mean, q_pert, sample_at, warfarin_split

logger = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.05

TAG_DESIGN, TAG_TRAIN, TAG_TEST, TAG_PERTURB, TAG_LEARNER, TAG_NOISE = range(6)

ROW_DRO = "Q_DRO(pi_DRO)"
ROW_NRO = "Q_DRO(pi_NRO)"
ROW_PERT_DRO = "Q_pert(pi_DRO)"
ROW_PERT_NRO = "Q_pert(pi_NRO)"
ROW_EVAL = "Q_DRO(pi)"
ROW_MEAN_NRO = "Q_mean(pi_NRO)"


def discrete_row(k: int) -> str:
    return f"Q_DRO_dis(pi_dis-{k})"


def warfarin_row(eta: float) -> str:
    return f"Q_mean(pi_DRO eta={eta:g})"


_ETAS = (0.05, 0.1, 0.2, 0.3, 0.4)
_NS = (500, 1000, 1500, 2000, 2500)

# Reference means shown next to the estimates in the text reports.
REFERENCE_VALUES = {
    "table1": {
        **dict(zip([(ROW_DRO, e) for e in _ETAS], (6.24, 6.19, 6.11, 6.04, 5.99))),
        **dict(zip([(discrete_row(2), e) for e in _ETAS], (5.88, 5.81, 5.71, 5.64, 5.58))),
        **dict(zip([(discrete_row(3), e) for e in _ETAS], (5.85, 5.79, 5.70, 5.63, 5.58))),
        **dict(zip([(discrete_row(4), e) for e in _ETAS], (5.83, 5.77, 5.68, 5.61, 5.56))),
    },
    "table2": {
        **dict(zip([(ROW_DRO, e) for e in _ETAS], (5.66, 5.60, 5.52, 5.45, 5.40))),
        **dict(zip([(ROW_NRO, e) for e in _ETAS], (5.05, 4.99, 4.91, 4.85, 4.80))),
        **dict(zip([(ROW_PERT_DRO, e) for e in _ETAS], (5.48, 5.47, 5.46, 5.45, 5.44))),
        **dict(zip([(ROW_PERT_NRO, e) for e in _ETAS], (5.02, 5.01, 5.00, 4.99, 4.98))),
    },
    "table3": {
        **dict(zip([(ROW_DRO, n) for n in _NS], (5.19, 5.32, 5.43, 5.48, 5.52))),
        **dict(zip([(ROW_NRO, n) for n in _NS], (4.85, 4.79, 4.83, 4.84, 4.91))),
        **dict(zip([(ROW_PERT_DRO, n) for n in _NS], (4.94, 5.12, 5.19, 5.21, 5.46))),
        **dict(zip([(ROW_PERT_NRO, n) for n in _NS], (4.95, 4.99, 5.02, 5.00, 5.00))),
    },
    "warfarin": {
        (ROW_MEAN_NRO, "value"): 6.377,
        (warfarin_row(0.3), "value"): 6.372,
        (warfarin_row(0.4), "value"): 6.454,
        (warfarin_row(0.5), "value"): 6.409,
        (warfarin_row(0.6), "value"): 6.355,
        (warfarin_row(0.7), "value"): 6.350,
    },
}


def seed_sequence(master: int, replication: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(replication,) + tuple(int(t) for t in tags))


def stream(master: int, replication: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, replication, *tags))


def derived_int(master: int, replication: int, *tags: int) -> int:
    return int(seed_sequence(master, replication, *tags).generate_state(1)[0])


# ----------------------------------------------------------------------------
# Replication results


@dataclass
class RepResult:
    index: int
    values: dict = field(default_factory=dict)
    policies: list = field(default_factory=list)  # (label, n_train, params)
    error: Optional[str] = None


@dataclass
class RunOutput:
    config: ExperimentConfig
    reports: list
    results: list
    runtime_seconds: float = math.nan

    @property
    def excluded(self) -> int:
        return sum(r.error is not None for r in self.results)

    def report(self, title: str) -> EvalReport:
        for rep in self.reports:
            if rep.title == title:
                return rep
        raise KeyError(title)

    def policies_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replication", "policy", "n_train", "params"])
        for r in self.results:
            for label, n, params in r.policies:
                w.writerow([r.index, label, n, " ".join(repr(float(p)) for p in params)])
        return buf.getvalue()

    def exclusions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replication", "error"])
        for r in self.results:
            if r.error is not None:
                w.writerow([r.index, r.error])
        return buf.getvalue()


def _guard(fn: Callable, cfg: ExperimentConfig, r: int) -> RepResult:
    try:
        return fn(cfg, r)
    except KdroError as exc:
        logger.warning("replication %d excluded: %s: %s", r, type(exc).__name__, exc)
        return RepResult(r, error=f"{type(exc).__name__}: {exc}")


def run_replications(fn: Callable, cfg: ExperimentConfig, indices=None) -> list:
    """Run ``fn(cfg, r)`` for every replication; results come back sorted by index."""
    indices = list(range(cfg.replications)) if indices is None else list(indices)
    job = functools.partial(_guard, fn, cfg)
    if cfg.threads > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(job, indices))
    else:
        results = [job(r) for r in indices]
    results.sort(key=lambda res: res.index)
    failed = sum(res.error is not None for res in results)
    if failed > MAX_EXCLUDED_FRACTION * len(results):
        raise ExclusionLimitExceeded(f"{failed} of {len(results)} replications failed (limit {MAX_EXCLUDED_FRACTION:.0%})")
    return results


# ----------------------------------------------------------------------------
# Shared steps


def _kernel(cfg: ExperimentConfig, ds, prop, policy, eta) -> KernelConfig:
    choice = select_bandwidth(ds, prop, policy, cfg.kernel, eta, cfg.bandwidth, cfg.learner.solver)
    return KernelConfig(cfg.kernel, choice.h)


def _design(cfg: ExperimentConfig, r: int):
    return build_dgp(dataclasses.replace(cfg.dgp, seed=derived_int(cfg.seed, r, TAG_DESIGN)))


def _learner_opts(cfg: ExperimentConfig, r: int, *tags):
    return dataclasses.replace(cfg.learner, seed=derived_int(cfg.seed, r, TAG_LEARNER, *tags))


def _evaluate_grid(cfg: ExperimentConfig, test: ObservationSet, prop, policy, k_eta: float, etas) -> list:
    """Evaluate at every radius with one test bandwidth chosen at ``k_eta``.

    Sharing ``h`` across radii keeps the estimates comparable (and monotone in eta).
    """
    k = _kernel(cfg, test, prop, policy, k_eta)
    return [evaluate_policy(test, prop, policy, k, e, cfg.learner.solver).q_value for e in etas]


# ----------------------------------------------------------------------------
# Pipelines


def eval_replication(cfg: ExperimentConfig, r: int) -> RepResult:
    """Robust value of the configured fixed policy on a fresh test sample."""
    dgp = _design(cfg, r)
    policy = cfg.fixed_policy()
    test = dgp.sample(cfg.n_test, stream(cfg.seed, r, TAG_TEST))
    k = _kernel(cfg, test, dgp.propensity, policy, cfg.eta_train[0])
    out = RepResult(r)
    for e in cfg.eta_test:
        out.values[(ROW_EVAL, e)] = evaluate_policy(test, dgp.propensity, policy, k, e, cfg.learner.solver).q_value
    return out


def learn_replication(cfg: ExperimentConfig, r: int) -> RepResult:
    """Learn the continuous robust policy (and discretised baselines) and evaluate on test data."""
    dgp = _design(cfg, r)
    n_train = cfg.n_train[0]
    eta = cfg.eta_train[0]
    train = dgp.sample(n_train, stream(cfg.seed, r, TAG_TRAIN, n_train))
    test = dgp.sample(cfg.n_test, stream(cfg.seed, r, TAG_TEST))
    prop = dgp.propensity
    template = cfg.template()
    k = _kernel(cfg, train, prop, template, eta)
    res = learn_policy(train, prop, k, eta, template, _learner_opts(cfg, r, n_train, 0))
    out = RepResult(r)
    out.policies.append(("pi_DRO", n_train, res.policy.params))
    for e, q in zip(cfg.eta_test, _evaluate_grid(cfg, test, prop, res.policy, eta, cfg.eta_test)):
        out.values[(ROW_DRO, e)] = q
    for k_bins in cfg.discretize:
        spec, bins = discretize_treatment(train, k_bins)
        fit = discrete_propensity(train, spec, bins)
        dpol = discrete_dro_learn(
            train, spec, bins, fit, eta, seed=derived_int(cfg.seed, r, TAG_LEARNER, n_train, k_bins), solver=cfg.learner.solver
        )
        out.policies.append((f"pi_dis-{k_bins}", n_train, dpol.scores.ravel()))
        test_bins = assign_bins(spec, test.A)
        test_fit = discrete_propensity(test, spec, test_bins)
        for e in cfg.eta_test:
            out.values[(discrete_row(k_bins), e)] = discrete_dro_evaluate(
                test, spec, test_bins, test_fit, dpol, e, cfg.learner.solver
            ).q_value
    return out


def sweep_replication(cfg: ExperimentConfig, r: int) -> RepResult:
    """Robust versus nonrobust linear policies for every training size and test radius.

    Values are keyed ``(row, (n_train, eta_test))``.
    """
    dgp = _design(cfg, r)
    prop, oracle = dgp.propensity, dgp.oracle
    eta = cfg.eta_train[0]
    test = dgp.sample(cfg.n_test, stream(cfg.seed, r, TAG_TEST))
    perturb_seed = derived_int(cfg.seed, r, TAG_PERTURB)
    perturbed = {e: perturb_kl(test, e, cfg.perturbations, perturb_seed) for e in cfg.eta_test}
    template = cfg.template()
    out = RepResult(r)
    for n in cfg.n_train:
        train = dgp.sample(n, stream(cfg.seed, r, TAG_TRAIN, n))
        k = _kernel(cfg, train, prop, template, eta)
        dro = learn_policy(train, prop, k, eta, template, _learner_opts(cfg, r, n, 0)).policy
        nro = learn_nonrobust(train, prop, k, template, _learner_opts(cfg, r, n, 1))
        out.policies.append(("pi_DRO", n, dro.params))
        out.policies.append(("pi_NRO", n, nro.params))
        for row, pol in ((ROW_DRO, dro), (ROW_NRO, nro)):
            for e, q in zip(cfg.eta_test, _evaluate_grid(cfg, test, prop, pol, eta, cfg.eta_test)):
                out.values[(row, (n, e))] = q
        for e in cfg.eta_test:
            out.values[(ROW_PERT_DRO, (n, e))] = q_pert(dro, oracle, perturbed[e])
            out.values[(ROW_PERT_NRO, (n, e))] = q_pert(nro, oracle, perturbed[e])
    return out


@functools.lru_cache(maxsize=4)
def _warfarin_data(path: str):
    cov = load_warfarin_csv(path)
    train_idx, test_idx = warfarin_split(cov.age)
    return cov, train_idx, test_idx


def warfarin_replication(cfg: ExperimentConfig, r: int) -> RepResult:
    """Fixed covariates, regenerated treatments and outcomes; counterfactual test means."""
    if not cfg.warfarin_csv:
        raise MissingDataFile("the warfarin experiment needs warfarin_csv")
    cov, train_idx, test_idx = _warfarin_data(cfg.warfarin_csv)
    dgp = build_dgp(cfg.dgp, cov.X)
    prop, oracle = dgp.propensity, dgp.oracle
    train = sample_at(dgp, cov.X[train_idx], stream(cfg.seed, r, TAG_TRAIN))
    test = sample_at(dgp, cov.X[test_idx], stream(cfg.seed, r, TAG_TEST))
    template = Linear((0.0,) * cov.X.shape[1], cfg.dgp.policy_bound)
    out = RepResult(r)

    def record(row, policy):
        # common random numbers: every policy sees the same outcome noise
        out.values[(row, "value")] = q_mean(policy, oracle, test, stream(cfg.seed, r, TAG_NOISE))

    k0 = _kernel(cfg, train, prop, template, 0.0)
    nro = learn_nonrobust(train, prop, k0, template, _learner_opts(cfg, r, train.n, 0))
    out.policies.append(("pi_NRO", train.n, nro.params))
    record(ROW_MEAN_NRO, nro)
    for j, eta in enumerate(cfg.eta_train, start=1):
        k = _kernel(cfg, train, prop, template, eta)
        dro = learn_policy(train, prop, k, eta, template, _learner_opts(cfg, r, train.n, j)).policy
        out.policies.append((f"pi_DRO eta={eta:g}", train.n, dro.params))
        record(warfarin_row(eta), dro)
    return out


# ----------------------------------------------------------------------------
# Report assembly


def _ok(results):
    return [r.values for r in results if r.error is None]


def _eval_reports(cfg, results, excluded):
    return [build_report("eval", "eta_test", [ROW_EVAL], list(cfg.eta_test), _ok(results), excluded)]


def _learn_reports(cfg, results, excluded):
    title = "table1" if cfg.name == "table1" else "learn"
    rows = [ROW_DRO] + [discrete_row(k) for k in cfg.discretize]
    ref = REFERENCE_VALUES["table1"] if title == "table1" else {}
    return [build_report(title, "eta_test", rows, list(cfg.eta_test), _ok(results), excluded, ref)]


SWEEP_ROWS = [ROW_DRO, ROW_NRO, ROW_PERT_DRO, ROW_PERT_NRO]


def sweep_by_eta(cfg, results, excluded, n_train: int, title: str = "table2") -> EvalReport:
    """Slice of a sweep at one training size, columns indexed by test radius."""
    reps = [{(row, e): v[(row, (n_train, e))] for row in SWEEP_ROWS for e in cfg.eta_test} for v in _ok(results)]
    ref = REFERENCE_VALUES["table2"] if title == "table2" else {}
    return build_report(title, "eta_test", SWEEP_ROWS, list(cfg.eta_test), reps, excluded, ref)


def sweep_by_n(cfg, results, excluded, eta: float, title: str = "table3") -> EvalReport:
    """Slice of a sweep at one test radius, columns indexed by training size."""
    reps = [{(row, n): v[(row, (n, eta))] for row in SWEEP_ROWS for n in cfg.n_train} for v in _ok(results)]
    ref = REFERENCE_VALUES["table3"] if title == "table3" else {}
    return build_report(title, "n_train", SWEEP_ROWS, list(cfg.n_train), reps, excluded, ref)


def _sweep_reports(cfg, results, excluded):
    if cfg.name == "table2":
        return [sweep_by_eta(cfg, results, excluded, cfg.n_train[0])]
    eta = 0.2 if 0.2 in cfg.eta_test else cfg.eta_test[0]
    return [sweep_by_n(cfg, results, excluded, eta)]


def _warfarin_reports(cfg, results, excluded):
    rows = [ROW_MEAN_NRO] + [warfarin_row(e) for e in cfg.eta_train]
    return [build_report("warfarin", "metric", rows, ["value"], _ok(results), excluded, REFERENCE_VALUES["warfarin"])]


PIPELINES = {
    "eval": (eval_replication, _eval_reports),
    "learn": (learn_replication, _learn_reports),
    "table1": (learn_replication, _learn_reports),
    "table2": (sweep_replication, _sweep_reports),
    "table3": (sweep_replication, _sweep_reports),
    "warfarin": (warfarin_replication, _warfarin_reports),
}


def check_inputs(cfg: ExperimentConfig) -> None:
    """Fail fast on problems that would otherwise surface in every replication."""
    if cfg.name == "warfarin":
        if not cfg.warfarin_csv:
            raise MissingDataFile("the warfarin experiment needs a prepared covariate CSV (warfarin_csv)")
        cov, train_idx, test_idx = _warfarin_data(cfg.warfarin_csv)
        logger.info("warfarin split: %d train / %d test rows", train_idx.size, test_idx.size)
    elif cfg.name == "eval":
        cfg.fixed_policy()
    if cfg.policy_class == "linear" and cfg.name in ("learn", "table1", "table2", "table3", "eval"):
        if cfg.dgp.kind.value != "highdim_gaussian":
            raise ConfigError("the linear policy class is only wired for the high-dimensional design here")


def run_experiment(cfg: ExperimentConfig) -> RunOutput:
    check_inputs(cfg)
    rep_fn, report_fn = PIPELINES[cfg.name]
    t0 = time.perf_counter()
    results = run_replications(rep_fn, cfg)
    excluded = sum(r.error is not None for r in results)
    reports = report_fn(cfg, results, excluded)
    elapsed = time.perf_counter() - t0
    for rep in reports:
        rep.runtime_seconds = elapsed
    return RunOutput(cfg, reports, results, elapsed)


def verify_cell(run: RunOutput, rng_seed: Optional[int] = None) -> tuple:
    """Re-run one randomly chosen successful replication and require identical values.

    Returns ``(replication, cell_key, value)`` of the checked cell.
    """
    cfg = run.config
    ok = [r for r in run.results if r.error is None]
    if not ok:
        raise VerificationFailed("no successful replication to verify")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed if rng_seed is None else rng_seed, spawn_key=(0xC0DE,)))
    target = ok[int(rng.integers(len(ok)))]
    keys = sorted(target.values, key=repr)
    key = keys[int(rng.integers(len(keys)))]
    rep_fn, _ = PIPELINES[cfg.name]
    again = rep_fn(dataclasses.replace(cfg, threads=1), target.index)
    if again.values.get(key) != target.values[key]:
        raise VerificationFailed(
            f"replication {target.index} cell {key!r}: stored {target.values[key]!r}, re-run {again.values.get(key)!r}"
        )
    return target.index, key, target.values[key]


def write_outputs(run: RunOutput, out_dir) -> list:
    """Write CSV and text tables; timings go to a separate non-CSV file so CSVs stay byte-stable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    for rep in run.reports:
        put(f"{rep.title}.csv", rep.to_csv())
        text = rep.to_text()
        if rep.columns == ["value"]:
            text += "\n" + rep.percentile_table()
        put(f"{rep.title}.txt", text)
    if any(r.policies for r in run.results):
        put("policies.csv", run.policies_csv())
    put("exclusions.csv", run.exclusions_csv())
    put("config.ini", run.config.to_ini())
    put("runtime.txt", f"runtime_seconds {run.runtime_seconds:.3f}\n")
    return written
