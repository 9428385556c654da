import subprocess
import sys

import pytest

from perfnn import io
from perfnn.cli import build_parser, main

SUBCOMMANDS = ["simulate", "augment", "deconv", "train", "evaluate", "sweep", "datasize", "plot"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--n", 1000, "--sigma", 1, "--seed", 7, "--out", d / "d.bin") == 0
    return d


def test_simulate_writes_requested_samples(data):
    ds = io.read_dataset(data / "d.bin")
    assert len(ds) == 1000 and ds.sigma == 1.0


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_every_flag(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.option_strings and action.dest != "help":
            assert action.help


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "perfnn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in SUBCOMMANDS:
        assert cmd in out.stdout


def test_usage_errors_exit_1(tmp_path):
    assert run("nosuch") == 1
    assert run("simulate", "--bogus") == 1
    assert run("simulate", "--out", tmp_path / "x.bin", "--seed", 1) == 1  # neither --n nor --n-aifs


def test_missing_file_exit_2(tmp_path):
    assert run("train", "--dataset", tmp_path / "missing.bin", "--target", "cbf", "--out", tmp_path / "m") == 2
    assert run("deconv", "--dataset", tmp_path / "missing.bin", "--target", "cbf", "--out", tmp_path / "e") == 2


def test_corrupt_file_exit_2(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("evaluate", "--model", bad, "--dataset", bad, "--target", "cbf") == 2


def test_nan_training_exit_3(tmp_path, data):
    ds = io.read_dataset(data / "d.bin")
    ds.aif[:] = float("nan")
    io.write_dataset(tmp_path / "nan.bin", ds)
    assert run("train", "--dataset", tmp_path / "nan.bin", "--target", "cbf", "--iterations", 2,
               "--seed", 1, "--out", tmp_path / "m.pmlp") == 3


def test_train_then_evaluate(tmp_path, data, capsys):
    m = tmp_path / "m.pmlp"
    assert run("train", "--dataset", data / "d.bin", "--target", "cbf", "--iterations", 20,
               "--batch-size", 256, "--seed", 3, "--out", m) == 0
    assert (tmp_path / "m.pmlp.loss.csv").read_text().count("\n") == 21
    capsys.readouterr()
    assert run("evaluate", "--model", m, "--dataset", data / "d.bin", "--target", "cbf",
               "--out", tmp_path / "est.csv") == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("mad=") and " scale=" in line and line.endswith("n=1000")


def test_deconv_command(tmp_path, data):
    out = tmp_path / "est.csv"
    assert run("deconv", "--dataset", data / "d.bin", "--target", "tmax", "--lambda-rel", 0.08, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "sample_idx,truth,estimate" and len(lines) == 1001


def test_time_seed_is_logged(tmp_path, capsys):
    assert run("simulate", "--n", 5, "--out", tmp_path / "s.bin") == 0
    assert "source=time" in capsys.readouterr().err


def _pipeline(root):
    root.mkdir()
    assert run("simulate", "--n-aifs", 30, "--tccs-per-aif", 10, "--sigma", 1, "--seed", 5,
               "--out", root / "d.bin", "--csv", root / "d.csv") == 0
    assert run("augment", "--in", root / "d.bin", "--factor", 2, "--seed", 6, "--out", root / "a.bin") == 0
    assert run("train", "--dataset", root / "a.bin", "--target", "tmax", "--iterations", 15,
               "--batch-size", 128, "--augment", "--seed", 8, "--out", root / "m.pmlp") == 0
    assert run("deconv", "--dataset", root / "d.bin", "--target", "cbf", "--out", root / "e.csv") == 0
    assert run("datasize", "--size-grid", "3x4", "--test-size", 200, "--nn-iterations", 5, "--targets", "cbf",
               "--seed", 9, "--out-dir", root / "ds") == 0
    assert run("sweep", "--sigmas", "0.5", "--train-size", 300, "--test-size", 200, "--nn-iterations", 5,
               "--lambda-samples", 100, "--targets", "tmax", "--seed", 9, "--out-dir", root / "sw") == 0
    return sorted(p for p in root.rglob("*") if p.is_file())


def test_reruns_are_byte_identical(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    rel_a = [p.relative_to(tmp_path / "a") for p in a]
    assert rel_a == [p.relative_to(tmp_path / "b") for p in b]
    assert any(p.suffix == ".svg" for p in a)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa


def test_plot_command(tmp_path):
    assert run("sweep", "--sigmas", "0.5,1", "--train-size", 200, "--test-size", 100, "--nn-iterations", 3,
               "--lambda-samples", 50, "--seed", 2, "--out-dir", tmp_path / "sw", "--no-plots") == 0
    assert not (tmp_path / "sw" / "figures").exists()
    assert run("simulate", "--n", 50, "--seed", 1, "--out", tmp_path / "h.bin") == 0
    assert run("plot", "--results", tmp_path / "sw" / "results.csv", "--scatter-dir", tmp_path / "sw",
               "--histogram-dataset", tmp_path / "h.bin", "--out-dir", tmp_path / "fig") == 0
    names = sorted(p.name for p in (tmp_path / "fig").iterdir())
    assert "noise_sweep_cbf.svg" in names and "parameter_histograms.svg" in names
    assert sum(n.startswith("scatter_") for n in names) == 8


def test_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PERFNN_OUT_DIR", str(tmp_path / "env"))
    assert run("datasize", "--size-grid", "2x2", "--test-size", 50, "--nn-iterations", 2, "--targets", "cbf",
               "--seed", 1, "--no-plots") == 0
    assert (tmp_path / "env" / "results.csv").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nseed = 4\nsigmas = 0.3\ntrain_size = 150\ntest_size = 60\n"
                   "nn_iterations = 2\nlambda_samples = 40\ntargets = cbf\n")
    assert run("sweep", "--config", cfg, "--sigmas", "0.7", "--out-dir", tmp_path / "o", "--no-plots") == 0
    from perfnn.harness import read_results

    rows = read_results(tmp_path / "o" / "results.csv")
    assert {r.sigma for r in rows} == {0.7} and {r.n_aifs for r in rows} == {150}
    assert run("sweep", "--config", tmp_path / "missing.ini", "--out-dir", tmp_path / "p") == 2
