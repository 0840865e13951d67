"""Independent reference computations shared by several test modules."""

import numpy as np
from scipy.linalg import expm


def dense_newton_penalized_poisson(X, y, offset, w, S, tol=1e-12, maxit=200):
    """Maximize sum w*(y*eta - exp(eta)) - 0.5 b'Sb with plain dense Newton steps.

    Written directly from the objective; shares no code with the package.
    """
    b = np.zeros(X.shape[1])

    def obj(b):
        eta = X @ b + offset
        return np.sum(w * (y * eta - np.exp(eta))) - 0.5 * b @ S @ b

    for _ in range(maxit):
        mu = np.exp(X @ b + offset)
        g = X.T @ (w * (y - mu)) - S @ b
        H = X.T @ (X * (w * mu)[:, None]) + S
        step = np.linalg.solve(H, g)
        f0, s = obj(b), 1.0
        while obj(b + s * step) < f0 - 1e-14 * abs(f0) and s > 1e-12:
            s /= 2
        b = b + s * step
        if np.max(np.abs(g)) < tol:
            break
    return b


def illness_death_constant(h01, h03, h12, h13, t):
    """Transition matrix P(0, t) for constant hazards via the matrix exponential.

    States ordered 0, 1, 2, 3.
    """
    Q = np.array([
        [-(h01 + h03), h01, 0.0, h03],
        [0.0, -(h12 + h13), h12, h13],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    return np.array([expm(Q * u) for u in np.atleast_1d(t)])


def illness_death_closed_form(h01, h03, h12, h13, t):
    """Closed-form solution of the Kolmogorov forward equations (a0 != a1)."""
    t = np.asarray(t, dtype=float)
    a0, a1 = h01 + h03, h12 + h13
    p00 = np.exp(-a0 * t)
    p01 = h01 / (a1 - a0) * (np.exp(-a0 * t) - np.exp(-a1 * t))
    # absorbing states: integrate the inflow, with i01 = integral of p01
    i01 = h01 / (a1 - a0) * ((1 - np.exp(-a0 * t)) / a0 - (1 - np.exp(-a1 * t)) / a1)
    p02 = h12 * i01
    p03 = h03 / a0 * (1 - np.exp(-a0 * t)) + h13 * i01
    return p00, p01, p02, p03


def clopper_pearson_by_inversion(x, n, level=0.95):
    """Solve the binomial tail equations by bisection on the success probability."""
    from scipy.stats import binom

    a = (1 - level) / 2

    def bisect(f, lo=0.0, hi=1.0):
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    lower = 0.0 if x == 0 else bisect(lambda p: a - binom.sf(x - 1, n, p))
    upper = 1.0 if x == n else bisect(lambda p: binom.cdf(x, n, p) - a)
    return lower, upper
