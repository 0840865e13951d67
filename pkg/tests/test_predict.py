import dataclasses

import numpy as np
import pandas as pd
import pytest

from msmpam.errors import GridMismatch, StepTooCoarse
from msmpam.events import StateDiagram
from msmpam.pam import FittedPam, ModelSpec, Smooth, TransitionIntercepts, build_layout, fit, ssts_spec
from msmpam.ped import CutPoints, prediction_frame, to_ped
from msmpam.predict import (
    EvalGrid,
    cumulative_hazard,
    first_transition_probability,
    predict_loghazard,
    product_integral,
    state_summary,
    transition_matrix,
    transprob_ci,
)
from msmpam.sim import dgp_from_dict, generate_study
from msmpam.splines import SmoothSpec

from oracles import illness_death_closed_form, illness_death_constant

ID = StateDiagram.illness_death()
TWO = StateDiagram.two_state()


def handmade(diagram, spec, frame, beta, V=None):
    layout = build_layout(frame, spec)
    beta = np.asarray(beta, dtype=float)
    V = np.zeros((len(beta), len(beta))) if V is None else V
    return FittedPam(layout, beta, V, {}, {}, 0.0, 0.0, 0.0, diagram)


def constant_fit(diagram, hazards, V=None):
    """Intercept-only model with the given hazard per transition label."""
    frame = pd.DataFrame({"transition": pd.Categorical(list(diagram.labels), categories=list(diagram.labels)),
                          "status": 1, "offset": 0.0})
    spec = ModelSpec((TransitionIntercepts(),))
    layout = build_layout(frame, spec)
    beta = [np.log(hazards[lv]) for lv in layout.intercept_levels]
    return handmade(diagram, spec, frame, beta, V)


def linear_hazard_fit():
    """Two-state model whose log hazard is log(t), interpolated exactly at a 0.01 knot grid."""
    knots_inner = np.round(np.arange(1001) * 0.01, 10)
    knots = np.r_[0.0, knots_inner, 10.0]
    sspec = SmoothSpec("t", k=1001, degree=1, by="transition", knots=tuple(knots))
    spec = ModelSpec((TransitionIntercepts(), Smooth(sspec)))
    frame = pd.DataFrame({"transition": pd.Categorical(["0->1"] * 1001), "t": knots_inner,
                          "status": 1, "offset": 0.0})
    layout = build_layout(frame, spec)
    T = layout.transform().toarray()
    # effective spline coefficient = intercept + block coefficient (B-spline partition of unity)
    eff = T[1:] + T[0][None, :]
    target = np.log(np.maximum(knots_inner, 1e-300))
    target[0] = -700.0
    beta = np.linalg.lstsq(eff, target, rcond=None)[0]
    return handmade(TWO, spec, frame, beta)


# ------------------------------------------------------------ log-hazard


def test_intercept_only_loghazard_constant(ssts_small_ped):
    f = fit(ssts_small_ped, ModelSpec((TransitionIntercepts(),)))
    nd = prediction_frame(ID, "0->1", np.linspace(0.1, 9.9, 7))
    p = predict_loghazard(f, nd)
    j = f.layout.intercept_levels.index("0->1")
    np.testing.assert_allclose(p["value"], f.beta[j], atol=1e-12)
    assert np.ptp(p["se"]) < 1e-12
    np.testing.assert_allclose(p["hi"] - p["value"], 1.959963984540054 * p["se"], rtol=1e-12)


def test_training_row_matches_prediction_frame(ssts_small_ped):
    f = fit(ssts_small_ped, ssts_spec(ID, k=8))
    rows = ssts_small_ped.frame.groupby("transition", observed=True).head(15)
    fitted = predict_loghazard(f, rows)["value"].to_numpy()
    rebuilt = []
    for _, r in rows.iterrows():
        entry = {1: r["t_entry_1"]} if ID.chain_position(r["from_state"]) >= 1 else {}
        nd = prediction_frame(ID, str(r["transition"]), [r["t"]], entry)
        rebuilt.append(predict_loghazard(f, nd)["value"].iloc[0])
    np.testing.assert_allclose(fitted, rebuilt, atol=1e-12)


def constant_two_state_ped(n, h, seed):
    dgp = dgp_from_dict({"name": "exp", "diagram": TWO.to_dict(), "loghazards": {"0->1": repr(float(np.log(h)))},
                         "censoring": None, "horizon": 10.0})
    ds = generate_study(dgp, n, seed=seed, run_index=0).dataset
    return to_ped(ds, CutPoints.grid(10.0, 0.1))


def test_constant_hazard_ssts_ci_covers_truth():
    ped = constant_two_state_ped(5000, 0.1, seed=3)
    f = fit(ped, ssts_spec(TWO, k=10))
    t = EvalGrid.one_d().t
    p = predict_loghazard(f, prediction_frame(TWO, "0->1", t))
    inside = (p["lo"] <= np.log(0.1)) & (np.log(0.1) <= p["hi"])
    assert inside.mean() >= 0.90


# ------------------------------------------------------------ cumulative hazard


def test_constant_hazard_cumhaz_is_linear():
    f = constant_fit(TWO, {"0->1": 0.3})
    g = EvalGrid.one_d()
    H = cumulative_hazard(f, "0->1", g, n_draws=0)
    np.testing.assert_allclose(H["estimate"], 0.3 * np.asarray(g.t), rtol=1e-10)


def test_linear_hazard_riemann_sum():
    f = linear_hazard_fit()
    H = cumulative_hazard(f, "0->1", [10.0], n_draws=0)["estimate"].iloc[0]
    # left sum of u over 0, 0.01, ..., 9.99 is 49.95; integral is 50
    assert H == pytest.approx(49.95, rel=1e-9)
    assert abs(H - 50.0) / 50.0 < 0.005


def test_zero_hazard_gives_zero_cumhaz():
    f = constant_fit(TWO, {"0->1": np.exp(-800.0)})
    H = cumulative_hazard(f, "0->1", EvalGrid.one_d(), n_draws=0)
    assert np.all(H["estimate"] == 0.0)


# ------------------------------------------------------------ transition probabilities


def test_two_state_survival_matches_exponential():
    f = constant_fit(TWO, {"0->1": 0.4})
    t = np.asarray(EvalGrid.one_d().t)
    res = transition_matrix(f, 0.0, t)
    assert np.max(np.abs(res.element(0, 0)["estimate"] - np.exp(-0.4 * t))) < 1e-3


HAZ = {"0->1": 0.12, "0->3": 0.05, "1->2": 0.3, "1->3": 0.1}


def test_illness_death_matches_closed_form():
    f = constant_fit(ID, HAZ)
    t = np.asarray(EvalGrid.one_d().t)
    res = transition_matrix(f, 0.0, t)
    want = np.array(illness_death_closed_form(HAZ["0->1"], HAZ["0->3"], HAZ["1->2"], HAZ["1->3"], t))
    got = np.stack([res.element(0, b)["estimate"] for b in (0, 1, 2, 3)])
    assert np.max(np.abs(got - want)) < 1e-3
    full = illness_death_constant(HAZ["0->1"], HAZ["0->3"], HAZ["1->2"], HAZ["1->3"], 10.0)
    assert np.max(np.abs(res.P[-1] - full)) < 1e-3


def test_later_start_uses_elapsed_time():
    f = constant_fit(ID, HAZ)
    res = transition_matrix(f, 2.0, [2.0, 5.0])
    assert np.max(np.abs(res.P[1][1, 1] - np.exp(-0.4 * 3.0))) < 1e-3


def test_t_equal_s_is_identity():
    f = constant_fit(ID, HAZ)
    for s in (0.0, 3.5):
        res = transition_matrix(f, s, [s])
        np.testing.assert_array_equal(res.P[0], np.eye(4))


def test_invariants_on_fitted_ssts(ssts_small_ped):
    f = fit(ssts_small_ped, ssts_spec(ID, k=8))
    t = np.asarray(EvalGrid.one_d(0.0, 9.0, 0.1).t)
    P = transition_matrix(f, 0.0, t, profile={"t_entry_1": 0.0}).P
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-9)
    assert P.min() >= 0.0 and P.max() <= 1.0
    for absorbing in (2, 3):
        np.testing.assert_array_equal(P[:, absorbing], np.broadcast_to(np.eye(4)[absorbing], (len(t), 4)))
    for transient in (0, 1):
        assert np.all(np.diff(P[:, transient, transient]) <= 1e-15)


def random_increments(rng, m):
    return rng.uniform(0, 0.02, size=(m, 1, ID.q))


def test_product_integral_associative(rng):
    dH = random_increments(rng, 300)
    full = product_integral(dH, ID, [300])[0, 0]
    left = product_integral(dH[:120], ID, [120])[0, 0]
    right = product_integral(dH[120:], ID, [180])[0, 0]
    np.testing.assert_allclose(left @ right, full, atol=1e-12)


def test_single_transition_survival_is_product(rng):
    dH = rng.uniform(0, 0.05, size=(400, 1, 1))
    P = product_integral(dH, TWO, np.arange(401))[:, 0]
    prod = np.r_[1.0, np.cumprod(1 - dH[:, 0, 0])]
    np.testing.assert_allclose(1 - P[:, 0, 0], 1 - prod, atol=1e-12)
    # the gap to exp(-H) is second order in the increments
    H = np.r_[0.0, np.cumsum(dH[:, 0, 0])]
    assert np.max(np.abs(P[:, 0, 0] - np.exp(-H))) < 0.5 * np.sum(dH**2) + 1e-12


def test_step_too_coarse():
    f = constant_fit(TWO, {"0->1": 250.0})
    with pytest.raises(StepTooCoarse):
        transition_matrix(f, 0.0, [1.0])
    with pytest.raises(StepTooCoarse):
        state_summary(f, 0, [1.0], n_draws=0)
    out = state_summary(f, 0, [1.0], n_draws=0, on_coarse="clamp")
    assert out.attrs["clamped_steps"] == 100
    p = out[out["quantity"] == "transprob"]["estimate"].iloc[0]
    assert p == pytest.approx(1.0)


def test_grid_off_step_raises():
    f = constant_fit(TWO, {"0->1": 0.2})
    with pytest.raises(GridMismatch):
        transition_matrix(f, 0.0, [0.105])


def test_triangular_grid_rejects_entry_after_t():
    with pytest.raises(GridMismatch):
        EvalGrid((1.0, 2.0), (0.5, 2.5))
    g = EvalGrid.triangular(0.1, 1.0, 0.1)
    assert len(g) == 55 and all(e <= t for t, e in zip(g.t, g.t_entry))


def test_state_summary_matches_product_integral(ssts_small_ped):
    f = fit(ssts_small_ped, ssts_spec(ID, k=8))
    t = np.asarray(EvalGrid.one_d(0.5, 6.0, 0.5).t)
    direct = transition_matrix(f, 0.0, t, first_transition_only=0)
    fast = first_transition_probability(f, "0->1", t, n_draws=0)
    np.testing.assert_allclose(fast["estimate"], direct.element(0, 1)["estimate"], atol=1e-12)
    g = EvalGrid((3.0, 5.0), (1.0, 2.0))
    tp = first_transition_probability(f, "1->2", g, n_draws=0)
    for i, (tt, te) in enumerate([(3.0, 1.0), (5.0, 2.0)]):
        r = transition_matrix(f, te, [tt], profile={"t_entry_1": te}, first_transition_only=1)
        assert tp["estimate"].iloc[i] == pytest.approx(r.element(1, 2)["estimate"][0], abs=1e-12)


# ------------------------------------------------------------ bands


def test_bands_collapse_when_covariance_vanishes(ssts_small_ped):
    f = fit(ssts_small_ped, ssts_spec(ID, k=8))
    g = dataclasses.replace(f, V=f.V * 1e-12)
    res = transprob_ci(g, 0.0, [2.0, 5.0], n_draws=50, seed=1)
    np.testing.assert_allclose(res.lo, res.P, atol=1e-5)
    np.testing.assert_allclose(res.hi, res.P, atol=1e-5)
    H = cumulative_hazard(g, "0->1", [2.0, 5.0], n_draws=50, seed=1)
    np.testing.assert_allclose(H["lo"], H["estimate"], rtol=1e-5)


def test_bands_deterministic_given_seed(ssts_small_ped):
    f = fit(ssts_small_ped, ssts_spec(ID, k=8))
    a = transprob_ci(f, 0.0, [2.0, 5.0], n_draws=200, seed=7)
    b = transprob_ci(f, 0.0, [2.0, 5.0], n_draws=200, seed=7)
    c = transprob_ci(f, 0.0, [2.0, 5.0], n_draws=200, seed=8)
    np.testing.assert_array_equal(a.lo, b.lo)
    np.testing.assert_array_equal(a.hi, b.hi)
    assert not np.array_equal(a.lo, c.lo)


def test_two_state_band_coverage_across_runs():
    h = 0.15
    t = np.asarray(EvalGrid.one_d(0.5, 9.5, 0.5).t)
    cover = []
    for run in range(100):
        dgp = dgp_from_dict({"name": "exp", "diagram": TWO.to_dict(), "loghazards": {"0->1": repr(float(np.log(h)))},
                             "censoring": None, "horizon": 10.0})
        ds = generate_study(dgp, 5000, seed=99, run_index=run).dataset
        f = fit(to_ped(ds, CutPoints.grid(10.0, 0.5)), ssts_spec(TWO, k=8))
        res = transprob_ci(f, 0.0, t, n_draws=200, seed=run)
        e = res.element(0, 0)
        truth = np.exp(-h * t)
        cover.append((e["lo"] <= truth) & (truth <= e["hi"]))
    assert np.mean(cover) >= 0.90
