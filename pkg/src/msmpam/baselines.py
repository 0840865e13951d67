"""Parametric and nonparametric comparators for single-event data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import NonConvergence, ZeroLengthInterval

Z95 = 1.959963984540054


@dataclass
class WeibullFit:
    """Weibull AFT fit: ``log T = mu + x'gamma + W / shape`` with standard minimum-extreme-value ``W``.

    ``theta`` holds ``(log shape, mu, gamma...)`` and ``cov`` its covariance
    from the observed information.
    """

    theta: np.ndarray
    cov: np.ndarray
    covariates: tuple
    loglik: float
    likelihood: str
    n_iter: int
    grad_norm: float

    @property
    def shape(self) -> float:
        return float(np.exp(self.theta[0]))

    @property
    def scale(self) -> float:
        return float(np.exp(self.theta[1]))

    @property
    def gamma(self) -> np.ndarray:
        return self.theta[2:]

    @property
    def intercept(self) -> float:
        """Log-hazard intercept ``log(shape) - shape*mu`` (hazard at ``t = 1``, zero covariates)."""
        return float(self.theta[0] - self.shape * self.theta[1])

    def ph_effects(self) -> dict:
        """Effects on the log-hazard scale, ``-shape * gamma``, with delta-method SEs."""
        k = self.shape
        out = {}
        for j, c in enumerate(self.covariates):
            g = self.theta[2 + j]
            grad = np.zeros(len(self.theta))
            grad[0] = -k * g
            grad[2 + j] = -k
            se = float(np.sqrt(grad @ self.cov @ grad))
            out[c] = (float(-k * g), se)
        return out

    def loghazard(self, t, x=None, level=0.95):
        """Log-hazard with Wald bands; returns ``(value, lo, hi)``."""
        t = np.asarray(t, dtype=float)
        x = np.zeros(len(self.covariates)) if x is None else np.asarray(x, dtype=float)
        k = self.shape
        m = self.theta[1] + x @ self.gamma
        val = self.theta[0] + (k - 1) * np.log(t) - k * m
        G = np.empty((len(t), len(self.theta)))
        G[:, 0] = 1 + k * np.log(t) - k * m
        G[:, 1] = -k
        G[:, 2:] = -k * x[None, :]
        se = np.sqrt(np.einsum("ij,jk,ik->i", G, self.cov, G))
        z = _z(level)
        return val, val - z * se, val + z * se

    def cumhaz(self, t, x=None, level=0.95):
        """Cumulative hazard with bands from a Wald interval on the log scale."""
        t = np.asarray(t, dtype=float)
        x = np.zeros(len(self.covariates)) if x is None else np.asarray(x, dtype=float)
        k = self.shape
        m = self.theta[1] + x @ self.gamma
        lz = k * (np.log(t) - m)
        G = np.empty((len(t), len(self.theta)))
        G[:, 0] = lz
        G[:, 1] = -k
        G[:, 2:] = -k * x[None, :]
        se = np.sqrt(np.einsum("ij,jk,ik->i", G, self.cov, G))
        z = _z(level)
        return np.exp(lz), np.exp(lz - z * se), np.exp(lz + z * se)


def _z(level):
    from scipy import stats

    return Z95 if level == 0.95 else float(stats.norm.ppf(0.5 + level / 2))


class _WeibullLik:
    """Negative log-likelihood and score in ``theta = (log k, mu, gamma)``."""

    def __init__(self, X, t, status, L=None, R=None):
        self.X = X
        self.t = t
        self.status = status
        self.L = L
        self.R = R

    def _z(self, theta, tt):
        k = np.exp(theta[0])
        m = theta[1] + self.X @ theta[2:]
        with np.errstate(divide="ignore"):
            return k, k * (np.log(tt) - m)

    def value_grad(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            f, g = self._value_grad(theta)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(g)
        return f, g

    def _value_grad(self, theta):
        X = self.X
        p = len(theta)
        if self.L is None:
            k, z = self._z(theta, self.t)
            ez = np.exp(z)
            ev = self.status == 1
            ll = np.sum(np.where(ev, theta[0] - np.log(self.t) + z, 0.0) - ez)
            a = np.where(ev, 1.0, 0.0) - ez  # d ll_i / d z_i
            g = np.empty(p)
            g[0] = ev.sum() + np.sum(a * z)
            g[1] = -k * a.sum()
            g[2:] = -k * (X.T @ a)
            return -ll, -g
        # interval: log(S(L) - S(R)) for events, log S(t) for right-censored
        k, zl = self._z(theta, self.L)
        _, zr = self._z(theta, self.R)
        ev = self.status == 1
        hl = np.where(self.L > 0, np.exp(zl), 0.0)
        hr = np.where(ev, np.exp(np.where(ev, zr, 0.0)), 0.0)
        dl = np.where(ev, hr - hl, 1.0)
        lg = np.where(ev, np.log(-np.expm1(-dl)), 0.0)
        ll = np.sum(-hl + lg)
        # d/dz_L and d/dz_R
        r = np.where(ev, np.exp(-dl) / -np.expm1(-dl), 0.0)
        aL = np.where(self.L > 0, -hl * (1 + np.where(ev, r, 0.0)), 0.0)
        aL = np.where(ev, aL, -hl)
        aR = np.where(ev, hr * r, 0.0)
        zl0 = np.where(self.L > 0, zl, 0.0)
        g = np.empty(p)
        g[0] = np.sum(aL * zl0 + aR * np.where(ev, zr, 0.0))
        s = aL + aR
        g[1] = -k * s.sum()
        g[2:] = -k * (X.T @ s)
        return -ll, -g


def _num_hessian(fg, theta, h=1e-5):
    p = len(theta)
    H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h * max(1.0, abs(theta[j]))
        H[:, j] = (fg(theta + e)[1] - fg(theta - e)[1]) / (2 * e[j])
    return 0.5 * (H + H.T)


def fit_weibull_aft(time=None, status=None, X=None, covariates=(), likelihood="exact", L=None, R=None,
                    tol=1e-8, maxit=200) -> WeibullFit:
    """Maximum-likelihood Weibull AFT.

    Parameters
    ----------
    time, status : array_like
        Exact mode: observed times and event indicators. Interval mode:
        ``time`` is the right-censoring time for ``status == 0``.
    X : array_like, optional
        ``n × p`` covariate matrix with columns named by ``covariates``.
    likelihood : {"exact", "interval"}
        Interval mode uses ``log(S(L) - S(R))`` for events in ``(L, R]``.

    Raises
    ------
    ZeroLengthInterval
        An event interval with ``R <= L``.
    NonConvergence
        The score max-norm does not reach ``tol``.
    """
    status = np.asarray(status, dtype=int)
    n = len(status)
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    if likelihood == "exact":
        t = np.asarray(time, dtype=float)
        if np.any(t <= 0):
            raise ZeroLengthInterval("exact times must be positive")
        lik = _WeibullLik(X, t, status)
        tref = t
    elif likelihood == "interval":
        ev = status == 1
        L = np.asarray(L, dtype=float).copy()
        R = np.asarray(R, dtype=float).copy()
        if np.any(ev & (R <= L)):
            raise ZeroLengthInterval(f"{int(np.sum(ev & (R <= L)))} event interval(s) with R <= L")
        tc = np.asarray(time if time is not None else R, dtype=float)
        L = np.where(ev, L, tc)  # right-censored rows: S(t) via the L slot
        R = np.where(ev, R, np.inf)
        lik = _WeibullLik(X, None, status, L, R)
        tref = np.where(ev, 0.5 * (L + R), L)
        if np.any(tref <= 0):
            raise ZeroLengthInterval("non-positive censoring time")
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    d = max(int(status.sum()), 1)
    theta0 = np.r_[0.0, np.log(tref.sum() / d), np.zeros(X.shape[1])]
    res = optimize.minimize(lik.value_grad, theta0, jac=True, method="BFGS",
                            options={"gtol": 1e-6, "maxiter": maxit})
    theta = res.x
    it = res.nit
    for _ in range(50):
        f, g = lik.value_grad(theta)
        if np.max(np.abs(g)) < tol:
            break
        H = _num_hessian(lik.value_grad, theta)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise NonConvergence("singular information matrix") from None
        s = 1.0
        while s > 1e-10:
            f1, _ = lik.value_grad(theta - s * step)
            if np.isfinite(f1) and f1 <= f + 1e-12 * abs(f):
                break
            s *= 0.5
        theta = theta - s * step
        it += 1
    f, g = lik.value_grad(theta)
    gn = float(np.max(np.abs(g)))
    if not gn < tol:
        raise NonConvergence(f"Weibull score max-norm {gn:.3g} above {tol:g}")
    H = _num_hessian(lik.value_grad, theta)
    cov = np.linalg.inv(H)
    return WeibullFit(theta, 0.5 * (cov + cov.T), tuple(covariates), -float(f), likelihood, it, gn)


@dataclass
class NelsonAalen:
    """Step-function cumulative hazard with Aalen variance."""

    times: np.ndarray
    increments: np.ndarray
    variance_increments: np.ndarray
    n_risk: np.ndarray
    n_events: np.ndarray

    def cumhaz(self, t) -> np.ndarray:
        H = np.r_[0.0, np.cumsum(self.increments)]
        return H[np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")]

    def variance(self, t) -> np.ndarray:
        V = np.r_[0.0, np.cumsum(self.variance_increments)]
        return V[np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")]

    def survival(self, t) -> np.ndarray:
        """Breslow estimate ``exp(-H)``."""
        return np.exp(-self.cumhaz(t))

    def confint(self, t, level=0.95):
        """Log-transformed Wald band."""
        H = self.cumhaz(t)
        se = np.sqrt(self.variance(t))
        z = _z(level)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.exp(z * se / H)
        return np.where(H > 0, H / f, 0.0), np.where(H > 0, H * f, 0.0)


def nelson_aalen(time, status, entry=None) -> NelsonAalen:
    """Nelson–Aalen estimator; ``entry`` gives delayed-entry times (default 0)."""
    time = np.asarray(time, dtype=float)
    status = np.asarray(status, dtype=int)
    entry = np.zeros_like(time) if entry is None else np.asarray(entry, dtype=float)
    ut = np.unique(time[status == 1])
    if len(ut) == 0:
        e = np.empty(0)
        return NelsonAalen(e, e, e, e.astype(int), e.astype(int))
    d = np.bincount(np.searchsorted(ut, time[status == 1]), minlength=len(ut))
    exits = np.sort(time)
    entries = np.sort(entry)
    # at risk at u: entered strictly before u and not yet exited
    nr = np.searchsorted(entries, ut, side="left") - np.searchsorted(exits, ut, side="left")
    return NelsonAalen(ut, d / nr, d / nr.astype(float) ** 2, nr, d)
