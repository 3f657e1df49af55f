import csv
import io

import pytest

from kdro.bandwidth import select_bandwidth
from kdro.cli import main
from kdro.dro import evaluate_policy
from kdro.kernels import KernelConfig, KernelFamily
from kdro.model import ScalarMultiple
from kdro.simgen import DgpSpec, build_dgp


def run(argv, tmp_path=None, name="out"):
    args = list(argv)
    out = None
    if tmp_path is not None:
        out = tmp_path / name
        args += ["--out", str(out)]
    return main(args), out


@pytest.mark.parametrize(
    "argv,code",
    [
        (["eval", "--bandwidth", "bogus"], 1),
        (["eval", "--eta", ""], 1),
        (["eval", "--reps", "0"], 1),
        (["eval", "--seed", "abc"], 1),
        (["eval", "--config", "/nonexistent/cfg.ini"], 1),
        (["experiment", "warfarin"], 2),
        (["experiment", "warfarin", "--warfarin-csv", "/nonexistent.csv"], 2),
        (["eval", "--reps", "3", "--n-test", "20", "--eta", "0.05", "--bandwidth", "fixed:0.0001"], 3),
    ],
)
def test_exit_codes(argv, code):
    assert exit_code(argv) == code


def exit_code(argv):
    """Exit status as the console script reports it, including argparse rejections."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def test_single_replication_matches_library(tmp_path):
    from kdro.experiments import TAG_DESIGN, TAG_TEST, derived_int, stream

    code, out = run(["eval", "--reps", "1", "--n-test", "400", "--eta", "0.05,0.2", "--policy", "1.5"], tmp_path)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "eval.csv").read_text())))

    dgp = build_dgp(DgpSpec(seed=derived_int(0, 0, TAG_DESIGN)))
    test = dgp.sample(400, stream(0, 0, TAG_TEST))
    policy = ScalarMultiple(1.5, 1.0, 3.0)
    h = select_bandwidth(test, dgp.propensity, policy, KernelFamily.EPANECHNIKOV, 0.05, "plugin").h
    k = KernelConfig(KernelFamily.EPANECHNIKOV, h)
    direct = [evaluate_policy(test, dgp.propensity, policy, k, e).q_value for e in (0.05, 0.2)]
    assert [float(r["mean"]) for r in rows] == direct


def test_repeat_runs_are_byte_identical(tmp_path):
    argv = ["learn", "--reps", "3", "--n-train", "300", "--n-test", "300", "--discretize", "2", "--seed", "5"]
    run(argv, tmp_path, "a")
    run(argv, tmp_path, "b")
    for name in ("learn.csv", "policies.csv", "exclusions.csv", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "runtime.txt").exists()


def test_worker_processes_do_not_change_results(tmp_path):
    argv = ["eval", "--reps", "4", "--n-test", "300"]
    run(argv + ["--threads", "1"], tmp_path, "serial")
    run(argv + ["--threads", "2"], tmp_path, "pool")
    assert (tmp_path / "serial" / "eval.csv").read_bytes() == (tmp_path / "pool" / "eval.csv").read_bytes()


def test_seed_changes_results(tmp_path):
    run(["eval", "--reps", "2", "--n-test", "200", "--seed", "1"], tmp_path, "s1")
    run(["eval", "--reps", "2", "--n-test", "200", "--seed", "2"], tmp_path, "s2")
    assert (tmp_path / "s1" / "eval.csv").read_bytes() != (tmp_path / "s2" / "eval.csv").read_bytes()


def test_verify_and_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nname = eval\nreplications = 2\nn_test = 200\neta_test = 0.1\npolicy = 2.5\n")
    assert main(["eval", "--config", str(cfg), "--verify"]) == 0
    text = capsys.readouterr().out
    assert "verified replication" in text and "eta_test=0.1" in text
    assert main(["learn", "--config", str(cfg)]) == 1


def test_written_config_reproduces_run(tmp_path):
    code, out = run(["eval", "--reps", "2", "--n-test", "200", "--seed", "9"], tmp_path, "first")
    assert code == 0
    main(["eval", "--config", str(out / "config.ini"), "--out", str(tmp_path / "second")])
    assert (out / "eval.csv").read_bytes() == (tmp_path / "second" / "eval.csv").read_bytes()
