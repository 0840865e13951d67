import math

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import quad

from msmpam.errors import DegenerateVariance, GridMismatch, TermNotFound
from msmpam.harness import (
    KEYS,
    bias_rmse,
    clopper_pearson,
    fixed_effect_summary,
    load_study_config,
    overall_coverage,
    pointwise_coverage,
    run_study,
    state_correlation,
    state_r,
    study_truth,
)
from msmpam.sim import builtin_dgp, dgp_from_dict, generate_study
from msmpam.truth import true_cumhaz, true_first_transition_prob, true_loghazard

from oracles import clopper_pearson_by_inversion

# ------------------------------------------------------------ Clopper-Pearson


def test_cp_all_covered():
    lo, hi = clopper_pearson(500, 500)
    assert float(lo) == pytest.approx(0.9926, abs=1e-4)
    assert float(lo) == pytest.approx(0.025 ** (1 / 500), abs=1e-12)
    assert float(hi) == 1.0


def test_cp_475_of_500():
    lo, hi = clopper_pearson(475, 500)
    assert (float(lo), float(hi)) == pytest.approx((0.927, 0.967), abs=1e-3)


def test_cp_matches_inversion_oracle():
    r = np.random.default_rng(2)
    cases = [(0, 10), (10, 10)]
    while len(cases) < 20:
        n = int(r.integers(1, 600))
        cases.append((int(r.integers(0, n + 1)), n))
    for x, n in cases:
        lo, hi = clopper_pearson(x, n)
        want = clopper_pearson_by_inversion(x, n)
        assert (float(lo), float(hi)) == pytest.approx(want, abs=1e-9), (x, n)


# ------------------------------------------------------------ coverage, bias


def make_truth(values):
    n = len(values)
    return pd.DataFrame({"quantity": "loghazard", "transition": "0->1", "t": np.arange(1, n + 1) * 0.5,
                         "t_entry_1": 0.0, "truth": values})


def make_run(truth, est, half):
    f = truth[KEYS].copy()
    f["estimate"] = est
    f["lo"] = np.asarray(est) - half
    f["hi"] = np.asarray(est) + half
    return f


def test_pointwise_and_overall_coverage(rng):
    truth = make_truth(np.zeros(5))
    runs = [make_run(truth, rng.normal(size=5), 1.0) for _ in range(40)]
    pw = pointwise_coverage(runs, truth)
    manual = np.mean([(np.abs(r["estimate"]) <= 1.0).to_numpy() for r in runs], axis=0)
    np.testing.assert_allclose(pw["coverage"], manual)
    assert np.all(pw["cp_lo"] <= pw["coverage"]) and np.all(pw["coverage"] <= pw["cp_hi"])
    ov = overall_coverage(pw)
    assert ov["coverage"].iloc[0] == pytest.approx(pw["coverage"].mean(), abs=1e-15)
    assert ov["cp_lo_mean"].iloc[0] == pytest.approx(pw["cp_lo"].mean())
    lo, hi = clopper_pearson(pw["covered"].sum(), 200)
    assert ov["cp_lo_pooled"].iloc[0] == pytest.approx(float(lo))


def test_grid_mismatch():
    truth = make_truth(np.zeros(4))
    run = make_run(truth, np.zeros(4), 1.0)
    run.loc[2, "t"] += 0.1
    with pytest.raises(GridMismatch):
        pointwise_coverage([run], truth)
    with pytest.raises(GridMismatch):
        bias_rmse([run.iloc[:3]], truth)


def test_bias_rmse_trivial():
    truth = make_truth(np.linspace(-2, 1, 6))
    exact = [make_run(truth, truth["truth"], 0.1) for _ in range(3)]
    br = bias_rmse(exact, truth)
    assert np.all(br["bias"] == 0) and np.all(br["rmse"] == 0)
    shifted = [make_run(truth, truth["truth"] - 0.25, 0.1) for _ in range(3)]
    br = bias_rmse(shifted, truth)
    np.testing.assert_allclose(br["bias"], -0.25, atol=1e-15)
    np.testing.assert_allclose(br["rmse"], 0.25, atol=1e-15)


# ------------------------------------------------------------ correlations


def test_identical_covariates_correlate_perfectly(rng):
    ds = generate_study(builtin_dgp("ieb_large_nn"), 300, seed=1, run_index=0).dataset
    f = ds.frame.copy()
    f["x3"] = f["x1"]
    assert state_r(f, "x1", "x3", 0) == pytest.approx(1.0)
    assert state_r(f, "x1", "x3", 1) == pytest.approx(1.0)


def test_degenerate_variance():
    ds = generate_study(builtin_dgp("ieb_large_nn"), 100, seed=1, run_index=0).dataset
    f = ds.frame.copy()
    f["c"] = 1.0
    with pytest.raises(DegenerateVariance):
        state_r(f, "x1", "c", 0)


def test_state_membership_by_entry():
    f = pd.DataFrame({"subject_id": [1, 1, 2, 3, 3], "from_state": [0, 1, 0, 0, 1],
                      "to_state": [1, 2, -1, 1, -1], "t_entry": 0.0, "t_exit": 1.0,
                      "a": [1.0, 1.0, 2.0, 3.0, 3.0], "b": [2.0, 2.0, 1.0, 5.0, 5.0]})
    # state 1 holds subjects 1 and 3 only
    with pytest.raises(DegenerateVariance):
        state_r(f.assign(b=np.where(f["subject_id"] == 2, 9.0, 4.0)), "a", "b", 1)
    assert state_r(f, "a", "b", 0) == pytest.approx(np.corrcoef([1, 2, 3], [2, 1, 5])[0, 1])


def test_state0_correlation_near_zero():
    ds = [generate_study(builtin_dgp("ieb_large_nn"), 1500, seed=5, run_index=r).dataset for r in range(4)]
    tab = state_correlation(ds, "x1", "x2", states=(0,))
    assert abs(tab["mean_r"].iloc[0]) < 0.05
    assert tab["runs"].iloc[0] == 4


# ------------------------------------------------------------ fixed effects


def coef_runs(est, se):
    return [pd.DataFrame({"term": ["x1", "x2"], "transition": ["0->1", "0->1"], "estimate": [e, 0.0],
                          "se": [s, 1.0]}) for e, s in zip(est, se)]


def test_fixed_effects_collapse_when_exact():
    s = fixed_effect_summary(coef_runs([0.6] * 10, [0.05] * 10), "x1", "0->1", truth=0.6)
    assert s["q25"] == s["median"] == s["q75"] == pytest.approx(0.6)
    assert s["coverage"] == 1.0 and s["bias"] == pytest.approx(0.0, abs=1e-15) and s["sd"] < 1e-15


def test_fixed_effects_counts(rng):
    est = 0.2 + 0.1 * rng.standard_normal(200)
    s = fixed_effect_summary(coef_runs(est, [0.1] * 200), "x1", "0->1", truth=0.2)
    manual = np.mean(np.abs(est - 0.2) <= 1.959963984540054 * 0.1)
    assert s["coverage"] == pytest.approx(manual)
    assert s["cp_lo"] <= s["coverage"] <= s["cp_hi"]
    assert s["mean"] == pytest.approx(est.mean())


def test_fixed_effects_term_not_found():
    with pytest.raises(TermNotFound):
        fixed_effect_summary(coef_runs([0.1], [0.1]), "x9", "0->1")
    with pytest.raises(TermNotFound):
        fixed_effect_summary(coef_runs([0.1], [0.1]), "x1", "1->2")


# ------------------------------------------------------------ truth


COMPETING = {"transitions": [[0, 1], [0, 3]], "progression_chain": [0, 1], "terminal_risks": [3]}


def test_truth_constant_hazards():
    d = dgp_from_dict({"diagram": COMPETING, "loghazards": {"0->1": repr(math.log(0.2)), "0->3": repr(math.log(0.1))}})
    t = np.array([0.5, 2.0, 7.5])
    np.testing.assert_allclose(true_cumhaz(d, "0->1", t), 0.2 * t, rtol=1e-9)
    np.testing.assert_allclose(true_loghazard(d, "0->3", t), math.log(0.1))
    p = true_first_transition_prob(d, "0->1", t)
    np.testing.assert_allclose(p, 2 / 3 * (1 - np.exp(-0.3 * t)), atol=1e-9)


def test_truth_matches_quadrature_with_entry_time():
    d = builtin_dgp("mts_tableA1", x1=False)
    t, te = np.array([3.0, 6.0, 9.5]), np.array([1.0, 2.5, 2.5])
    got = true_cumhaz(d, "1->2", t, te)
    for i in range(3):
        want = quad(lambda u: math.exp(d.loghazard("1->2", u, u - te[i], te[i])), te[i], t[i],
                    epsabs=1e-12, epsrel=1e-12)[0]
        assert got[i] == pytest.approx(want, abs=1e-8)


def test_study_truth_grid_shape():
    cfg = load_study_config({"builtin": "tableA2_small"})
    tr = study_truth(builtin_dgp("ssts_tableA1"), cfg)
    counts = tr.groupby(["quantity", "transition"]).size()
    assert counts[("loghazard", "0->1")] == 100
    assert counts[("cumhazard", "1->2")] == 5050
    assert len(counts) == 12


# ------------------------------------------------------------ configs and a tiny study


def test_config_loading():
    cfg = load_study_config({"builtin": "ieb_large_nn_small", "runs": 3})
    assert cfg["runs"] == 3 and cfg["seed"] == 20240502
    with pytest.raises(ValueError, match="seed"):
        load_study_config({"dgp": "ssts_tableA1", "models": []})
    with pytest.raises(ValueError):
        load_study_config({"dgp": "ssts_tableA1", "seed": 1, "models": [{"name": "m", "spec": "cox"}]})
    with pytest.raises(FileNotFoundError):
        load_study_config("no_such_study")


TINY = {
    "dgp": "ssts_tableA1", "seed": 17, "runs": 2, "n": 400,
    "models": [{"name": "ssts_pam", "spec": "ssts", "covariates": ["x1"]}],
    "grid": {"start": 1.0, "stop": 8.0, "step": 1.0}, "cuts": {"step": 0.5},
    "profile": {"x1": 0.0}, "n_draws": 20,
}


def test_tiny_study_tables(tmp_path):
    tabs = run_study(TINY, tmp_path / "a", threads=1)
    cov = tabs["coverage"]
    assert len(cov) == 12 and set(cov["quantity"]) == {"loghazard", "cumhazard", "transprob"}
    assert (cov["runs"] == 2).all() and (cov["failed"] == 0).all()
    fe = tabs["fixed_effects"]
    assert set(fe["transition"]) == {"0->1", "0->3", "1->2", "1->3"}
    assert fe.loc[fe["transition"] == "0->1", "truth"].iloc[0] == 0.2
    for name in ("coverage", "coverage_pointwise", "bias_rmse", "fixed_effects", "correlations", "failures"):
        assert (tmp_path / "a" / f"{name}.csv").exists()
    assert (tmp_path / "a" / "meta.json").exists()


def test_tiny_study_independent_of_threads(tmp_path):
    run_study(TINY, tmp_path / "one", threads=1)
    run_study(TINY, tmp_path / "two", threads=2)
    for name in ("coverage", "coverage_pointwise", "bias_rmse", "fixed_effects"):
        assert (tmp_path / "one" / f"{name}.csv").read_bytes() == (tmp_path / "two" / f"{name}.csv").read_bytes()
