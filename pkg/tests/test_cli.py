import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from msmpam.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--dgp", "ssts_tableA1", "--n", "300", "--seed", "7", "--out", str(d / "sim")]) == 0
    assert main(["transform", "--data", str(d / "sim" / "transitions.csv"), "--cuts", '{"step": 0.5}',
                 "--out", str(d / "p.csv")]) == 0
    assert main(["fit", "--ped", str(d / "p.csv"), "--spec", '{"builtin": "ssts", "covariates": ["x1"], "k": 8}',
                 "--out", str(d / "fit")]) == 0
    return d


def test_simulate_outputs(workdir):
    tr = pd.read_csv(workdir / "sim" / "transitions.csv")
    assert {"subject_id", "from_state", "to_state", "t_entry", "t_exit", "x1"} <= set(tr.columns)
    assert tr["subject_id"].nunique() == 300
    meta = json.loads((workdir / "sim" / "meta.json").read_text())
    assert meta["seed"] == 7 and meta["command"] == "simulate" and "config_hash" in meta


def test_simulate_is_reproducible(workdir, tmp_path):
    assert main(["simulate", "--dgp", "ssts_tableA1", "--n", "300", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "transitions.csv").read_bytes() == (workdir / "sim" / "transitions.csv").read_bytes()


def test_fit_outputs(workdir):
    for name in ("fit.json", "V.npy", "spec.json", "coefficients.csv", "meta.json"):
        assert (workdir / "fit" / name).exists()
    coef = pd.read_csv(workdir / "fit" / "coefficients.csv")
    assert "x1" in set(coef["term"])


def test_predict_pipeline(workdir):
    out = workdir / "pred.csv"
    rc = main(["predict", "--fit", str(workdir / "fit"), "--grid", '{"start": 0.5, "stop": 5.0, "step": 0.5}',
               "--profile", '{"x1": 0}', "--n-draws", "20", "--out", str(out)])
    assert rc == 0
    pred = pd.read_csv(out)
    assert list(pred.columns) == ["quantity", "transition", "t", "t_entry_1", "t_entry_2", "estimate", "lo", "hi"]
    assert set(pred["quantity"]) == {"loghazard", "cumhazard", "transprob"}
    assert set(pred["transition"]) == {"0->1", "0->3", "1->2", "1->3"}
    assert (pred["lo"] <= pred["hi"]).all()
    assert (workdir / "pred.csv.meta.json").exists()


def test_weights_roundtrip_into_fit(workdir):
    w = workdir / "w.csv"
    assert main(["weights", "--data", str(workdir / "sim" / "transitions.csv"), "--exposure", "x1",
                 "--out", str(w)]) == 0
    tab = pd.read_csv(w)
    assert np.all(tab["weight"] == 1.0)
    assert main(["fit", "--ped", str(workdir / "p.csv"), "--spec",
                 '{"builtin": "ssts", "covariates": ["x1"], "k": 8}', "--weights", str(w),
                 "--out", str(workdir / "fitw")]) == 0
    a = pd.read_csv(workdir / "fit" / "coefficients.csv")
    b = pd.read_csv(workdir / "fitw" / "coefficients.csv")
    pd.testing.assert_frame_equal(a, b)


def test_exit_codes(workdir, tmp_path, capsys):
    assert main([]) == 2
    assert main(["simulate", "--dgp", "ssts_tableA1", "--n", "10", "--out", str(tmp_path)]) == 2
    assert main(["fit", "--ped", str(tmp_path / "missing.csv"), "--spec", "ssts", "--out", str(tmp_path)]) == 3
    assert main(["study", "--config", '{"dgp": "ssts_tableA1", "models": []}', "--out", str(tmp_path)]) == 2
    # exposure perfectly predicted by its own copy: separation is a numeric failure
    tr = pd.read_csv(workdir / "sim" / "transitions.csv")
    tr["z"] = tr["x1"]
    tr.to_csv(tmp_path / "tr.csv", index=False)
    rc = main(["weights", "--data", str(tmp_path / "tr.csv"), "--exposure", "x1", "--confounders", "z",
               "--out", str(tmp_path / "w.csv")])
    assert rc == 4
    err = capsys.readouterr().err
    assert "numeric failure" in err


def test_help_documents_schemas():
    r = subprocess.run([sys.executable, "-m", "msmpam.cli", "fit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "schema" in r.stdout.lower()


STUDY = json.dumps({
    "dgp": "ssts_tableA1", "seed": 3, "runs": 2, "n": 300,
    "models": [{"name": "ssts_pam", "spec": "ssts", "covariates": ["x1"]}],
    "grid": {"start": 1.0, "stop": 7.0, "step": 2.0}, "cuts": {"step": 0.5}, "n_draws": 10,
    "profile": {"x1": 0.0},
})


def test_study_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["study", "--config", STUDY, "--out", str(tmp_path / d), "--threads", "1"]) == 0
    for name in ("coverage.csv", "bias_rmse.csv", "fixed_effects.csv", "coverage_pointwise.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["command"] == "study" and meta["seed"] == 3
