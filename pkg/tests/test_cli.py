import csv
import hashlib
import json

import numpy as np
import pytest

from mufigp import cli
from mufigp.benchmarks import sample_design
from mufigp.dataset_io import save_dataset
from mufigp.exceptions import ConditioningError


@pytest.fixture()
def workspace(tmp_path):
    ds = sample_design("linear", (20, 6), np.random.default_rng(0))
    save_dataset(ds, tmp_path / "data.json")
    top = ds.levels[-1]
    with open(tmp_path / "points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1"])
        w.writerows(top.X.tolist())
    return tmp_path, ds


def _read_predictions(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def test_fit_then_predict_reproduces_training_outputs(workspace):
    d, ds = workspace
    assert cli.main(["fit", "--data", str(d / "data.json"), "--method", "gp",
                     "--out", str(d / "gp.json"), "--restarts", "3", "--seed", "1"]) == 0
    assert cli.main(["predict", "--model", str(d / "gp.json"), "--points", str(d / "points.csv"),
                     "--out", str(d / "pred.csv")]) == 0
    p = _read_predictions(d / "pred.csv")
    np.testing.assert_allclose(p["mean"], ds.levels[-1].y, atol=1e-4)
    assert np.all(p["lower95"] <= p["mean"]) and np.all(p["mean"] <= p["upper95"])


@pytest.mark.parametrize("method", ["ar1", "nargp", "gpdfc"])
def test_multi_fidelity_fit_and_predict(workspace, method):
    d, _ = workspace
    code = cli.main(["fit", "--data", str(d / "data.json"), "--method", method,
                     "--out", str(d / "m.json"), "--restarts", "2"])
    if method == "gpdfc":
        # the delay columns need an oracle or stored delay values
        assert code == cli.EXIT_DATA
        return
    assert code == 0
    assert cli.main(["predict", "--model", str(d / "m.json"), "--points", str(d / "points.csv"),
                     "--out", str(d / "p.csv"), "--samples", "100"]) == 0
    assert np.all(np.isfinite(_read_predictions(d / "p.csv")["std"]))


def test_unknown_method_lists_valid_ones(workspace, capsys):
    d, _ = workspace
    code = cli.main(["fit", "--data", str(d / "data.json"), "--method", "kriging", "--out", "x"])
    assert code == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert all(m in err for m in cli.FIT_METHODS)


def test_unknown_flag_and_missing_seed(workspace):
    d, _ = workspace
    assert cli.main(["fit", "--data", "a", "--method", "gp", "--out", "b", "--bogus"]) == 1
    assert cli.main(["bench", "--config", "c.json", "--out", str(d)]) == 1
    assert cli.main(["adapt", "--model", "m", "--config", "c", "--out", str(d)]) == 1
    assert cli.main([]) == 1


def test_missing_and_malformed_files(workspace, capsys):
    d, _ = workspace
    assert cli.main(["fit", "--data", str(d / "nope.json"), "--method", "gp", "--out", "x"]) == 2
    (d / "bad.json").write_text("{")
    assert cli.main(["fit", "--data", str(d / "bad.json"), "--method", "gp", "--out", "x"]) == 2
    assert "bad.json:1" in capsys.readouterr().err


def test_numerical_failure_exit_code(workspace, monkeypatch):
    import mufigp.benchmarks as B

    def boom(*a, **k):
        raise ConditioningError("not positive definite")

    monkeypatch.setattr(B, "fit_method", boom)
    d, _ = workspace
    assert cli.main(["fit", "--data", str(d / "data.json"), "--method", "gp",
                     "--out", str(d / "g.json")]) == cli.EXIT_NUMERIC


def _digest(path, drop_seconds=False):
    text = path.read_text()
    if drop_seconds:
        text = "\n".join(",".join(r.split(",")[:-1]) for r in text.splitlines())
    return hashlib.sha256(text.encode()).hexdigest()


def test_bench_outputs_are_reproducible(tmp_path, capsys):
    cfg = {"problems": ["linear"], "methods": ["gp", "ar1"], "seeds": 2, "n_lf": 20, "n_hf": 6,
           "restarts": 2}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    for run in ("a", "b"):
        assert cli.main(["bench", "--config", str(tmp_path / "cfg.json"), "--out",
                         str(tmp_path / run), "--seed", "7"]) == 0
    assert "ar1" in capsys.readouterr().out
    for name, drop in (("results.csv", True), ("summary.json", False)):
        assert _digest(tmp_path / "a" / name, drop) == _digest(tmp_path / "b" / name, drop)
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert set(summary["mean_mse"]) == {"gp", "ar1"}
    assert summary["config"]["base_seed"] == 7
    assert cli.main(["bench", "--config", str(tmp_path / "cfg.json"), "--out",
                     str(tmp_path / "c"), "--seed", "8"]) == 0
    assert _digest(tmp_path / "a" / "results.csv", True) != _digest(tmp_path / "c" / "results.csv", True)


def test_adapt_and_calibrate(workspace):
    d, _ = workspace
    assert cli.main(["fit", "--data", str(d / "data.json"), "--method", "ar1",
                     "--out", str(d / "m.json"), "--restarts", "2"]) == 0
    (d / "adapt.json").write_text(json.dumps({"problem": "linear", "steps": 2, "warm_restarts": 1,
                                              "full_restarts": 1, "heldout_points": 100}))
    outs = []
    for run in ("r1", "r2"):
        assert cli.main(["adapt", "--model", str(d / "m.json"), "--config", str(d / "adapt.json"),
                         "--out", str(d / run), "--seed", "3"]) == 0
        outs.append((d / run / "history.csv").read_text())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 3
    assert (d / "r1" / "data.json").exists() and (d / "r1" / "model.json").exists()
    calib = sample_design("linear", (40, 30), np.random.default_rng(9))
    save_dataset(calib, d / "calib.json")
    assert cli.main(["calibrate", "--model", str(d / "m.json"), "--calib-data", str(d / "calib.json"),
                     "--method", "normal", "--out", str(d / "cal.json")]) == 0
    assert cli.main(["predict", "--model", str(d / "cal.json"), "--points", str(d / "points.csv"),
                     "--out", str(d / "cp.csv")]) == 0


def test_log_level_from_environment(monkeypatch):
    import logging
    monkeypatch.setenv("MUFIGP_LOG", "debug")
    cli.configure_logging()
    assert logging.getLogger("mufigp").level == logging.DEBUG
    monkeypatch.setenv("MUFIGP_LOG", "error")
    cli.configure_logging()
    assert logging.getLogger("mufigp").level == logging.ERROR
