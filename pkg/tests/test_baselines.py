import numpy as np
import pytest
from scipy import optimize, stats

from msmpam.baselines import fit_weibull_aft, nelson_aalen
from msmpam.errors import ZeroLengthInterval
from msmpam.sim import IcMechanism, builtin_dgp, generate_study


def weibull_sample(rng, n, shape, scale, x=None, gamma=0.0):
    """Weibull AFT draws: log T = log(scale) + gamma*x + W/shape."""
    x = np.zeros(n) if x is None else x
    w = np.log(-np.log(rng.uniform(size=n)))
    return np.exp(np.log(scale) + gamma * x + w / shape)


def test_exponential_shape_one(rng):
    t = rng.exponential(2.0, 5000)
    f = fit_weibull_aft(t, np.ones(5000, dtype=int))
    assert abs(f.shape - 1.0) < 0.03
    assert f.scale == pytest.approx(2.0, rel=0.05)
    assert f.grad_norm < 1e-8


def test_exact_mle_matches_direct_optimizer(rng):
    n = 800
    x = rng.normal(size=n)
    t = weibull_sample(rng, n, 1.7, 3.0, x, 0.4)
    c = rng.uniform(1, 8, n)
    status = (t <= c).astype(int)
    y = np.minimum(t, c)

    def nll(th):
        k = np.exp(th[0])
        z = k * (np.log(y) - th[1] - th[2] * x)
        return -np.sum(status * (th[0] - np.log(y) + z) - np.exp(z))

    ref = optimize.minimize(nll, [0.0, 1.0, 0.0], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000}).x
    f = fit_weibull_aft(y, status, x[:, None], ("x",))
    np.testing.assert_allclose(f.theta, ref, atol=1e-5)
    assert f.loglik == pytest.approx(-nll(ref), abs=1e-6)


def test_interval_limit_equals_exact(rng):
    n = 600
    x = rng.binomial(1, 0.5, n).astype(float)
    t = weibull_sample(rng, n, 1.4, 4.0, x, -0.5)
    status = (t <= 9.0).astype(int)
    y = np.minimum(t, 9.0)
    exact = fit_weibull_aft(y, status, x[:, None], ("x",))
    ic = fit_weibull_aft(y, status, x[:, None], ("x",), likelihood="interval", L=y, R=y + 1e-6)
    np.testing.assert_allclose(ic.theta, exact.theta, atol=1e-3)


def test_zero_length_interval_rejected():
    with pytest.raises(ZeroLengthInterval):
        fit_weibull_aft(None, [1, 1], likelihood="interval", L=[1.0, 2.0], R=[1.5, 2.0])
    with pytest.raises(ZeroLengthInterval):
        fit_weibull_aft([0.0, 1.0], [1, 1])


def test_interval_likelihood_covers_true_shape():
    hits, effs = 0, []
    for run in range(20):
        s = generate_study(builtin_dgp("ic_weibull"), 5000, seed=31, run_index=run, mechanism=IcMechanism("beta"))
        f = s.ic_view.frame
        w = fit_weibull_aft(f["R"], f["status"], f[["x1"]].to_numpy(), ("x1",), likelihood="interval",
                            L=f["L"], R=f["R"])
        se = np.sqrt(w.cov[0, 0])
        hits += abs(w.theta[0] - np.log(1.5)) <= 1.96 * se
        effs.append(w.ph_effects()["x1"][0])
    # Binomial(20, 0.95) falls below 17 with probability about 0.016
    assert hits >= 17
    assert np.mean(effs) == pytest.approx(-1.3, abs=0.05)


def test_wald_null_rejection_rate():
    rej = 0
    for run in range(100):
        r = np.random.default_rng([7, run])
        x = r.normal(size=400)
        t = weibull_sample(r, 400, 1.5, 2.0)
        f = fit_weibull_aft(t, np.ones(400, dtype=int), x[:, None], ("x",))
        z = f.theta[2] / np.sqrt(f.cov[2, 2])
        rej += abs(z) > stats.norm.ppf(0.975)
    # Binomial(100, 0.05) exceeds 12 with probability below 0.002
    assert rej <= 12


def test_ph_effect_delta_method(rng):
    n = 3000
    x = rng.binomial(1, 0.5, n).astype(float)
    t = weibull_sample(rng, n, 2.0, 3.0, x, 0.3)
    f = fit_weibull_aft(t, np.ones(n, dtype=int), x[:, None], ("x",))
    b, se = f.ph_effects()["x"]
    assert b == pytest.approx(-f.shape * f.gamma[0], rel=1e-12)
    assert abs(b + 0.6) < 3 * se


def test_weibull_cumhaz_and_loghazard_consistent(rng):
    t = weibull_sample(rng, 2000, 1.5, 4.0)
    f = fit_weibull_aft(t, np.ones(2000, dtype=int))
    g = np.array([0.5, 1.0, 3.0])
    H, lo, hi = f.cumhaz(g)
    lh, _, _ = f.loghazard(g)
    dH = (f.cumhaz(g * (1 + 1e-6))[0] - H) / (g * 1e-6)
    np.testing.assert_allclose(np.log(dH), lh, atol=1e-4)
    assert np.all(lo < H) and np.all(H < hi)


# ------------------------------------------------------------ Nelson-Aalen


def test_single_event_increment():
    na = nelson_aalen([1.0, 2.0, 3.0, 4.0, 5.0], [0, 1, 0, 0, 0])
    assert na.cumhaz([1.9, 2.0, 10.0]).tolist() == [0.0, 0.25, 0.25]
    assert na.variance([2.0])[0] == pytest.approx(1 / 16)


def test_ties_and_delayed_entry():
    # at u=2: subjects with entry < 2 and exit >= 2 are at risk
    na = nelson_aalen([2.0, 2.0, 3.0, 4.0], [1, 1, 1, 0], entry=[0.0, 0.0, 2.5, 0.0])
    assert na.n_risk.tolist() == [3, 2]
    assert na.cumhaz([3.0])[0] == pytest.approx(2 / 3 + 1 / 2)


def test_all_censored_is_zero(rng):
    na = nelson_aalen(rng.uniform(0, 5, 50), np.zeros(50, dtype=int))
    assert np.all(na.cumhaz(np.linspace(0, 6, 20)) == 0.0)
    assert np.all(na.survival([1.0, 4.0]) == 1.0)


def test_constant_hazard_large_sample(rng):
    n, h = 100_000, 0.2
    t = rng.exponential(1 / h, n)
    c = rng.uniform(0, 12, n)
    na = nelson_aalen(np.minimum(t, c), (t <= c).astype(int))
    g = np.linspace(1, 8, 29)
    np.testing.assert_allclose(na.cumhaz(g) / g, h, rtol=0.02)


def test_monotone_with_jumps_only_at_events(rng):
    t = np.round(rng.exponential(3, 300), 2)
    st = rng.binomial(1, 0.6, 300)
    na = nelson_aalen(t, st)
    g = np.sort(np.unique(np.r_[t, t - 0.005, t + 0.005]))
    H = na.cumhaz(g)
    assert np.all(np.diff(H) >= 0)
    ev_times = np.unique(t[st == 1])
    for lo, hi in zip(g[:-1][np.diff(H) > 0], g[1:][np.diff(H) > 0]):
        assert np.any((ev_times > lo) & (ev_times <= hi))
    np.testing.assert_array_equal(na.times, ev_times)
