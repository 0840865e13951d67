"""True cumulative hazards and transition probabilities of a DGP."""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .sim import DgpSpec

RTOL = 1e-10
ATOL = 1e-12


def _label(transition):
    return transition if isinstance(transition, str) else f"{transition[0]}->{transition[1]}"


def _hazard_fn(dgp: DgpSpec, label, s, covariates, entry):
    a = int(label.split("->")[0])
    later = dgp.diagram.chain_position(a) >= 1

    def h(u):
        u = np.asarray(u, dtype=float)
        if later:
            return np.exp(dgp.loghazard(label, u, np.maximum(0.0, u - entry), entry, covariates))
        return np.exp(dgp.loghazard(label, u, 0.0, 0.0, covariates))

    return h


def _entries(dgp, label, t, t_entry):
    a = int(label.split("->")[0])
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if dgp.diagram.chain_position(a) == 0:
        return t, np.zeros(len(t))
    te = np.broadcast_to(np.asarray(t_entry if t_entry is not None else 0.0, dtype=float), t.shape)
    return t, np.asarray(te, dtype=float)


def true_loghazard(dgp: DgpSpec, transition, t, t_entry=None, covariates=None) -> np.ndarray:
    label = _label(transition)
    t, te = _entries(dgp, label, t, t_entry)
    a = int(label.split("->")[0])
    if dgp.diagram.chain_position(a) == 0:
        return np.asarray(dgp.loghazard(label, t, 0.0, 0.0, covariates), dtype=float) * np.ones(len(t))
    return np.asarray(dgp.loghazard(label, t, np.maximum(0.0, t - te), te, covariates), dtype=float) * np.ones(len(t))


def true_cumhaz(dgp: DgpSpec, transition, t, t_entry=None, covariates=None) -> np.ndarray:
    """``H(t) = ∫_s^t h(u) du`` with ``s = 0`` or the entry time."""
    label = _label(transition)
    t, te = _entries(dgp, label, t, t_entry)
    out = np.empty(len(t))
    for s in np.unique(te):
        sel = np.flatnonzero(te == s)
        h = _hazard_fn(dgp, label, s, covariates, s)
        tt = t[sel]
        order = np.argsort(tt)
        ts = tt[order]
        if ts[-1] <= s:
            out[sel] = 0.0
            continue
        sol = solve_ivp(lambda u, y: [float(h(u))], (s, ts[-1]), [0.0], t_eval=np.maximum(ts, s),
                        rtol=RTOL, atol=ATOL, method="DOP853")
        res = np.empty(len(ts))
        res[order] = sol.y[0]
        out[sel] = res
    return out


def true_first_transition_prob(dgp: DgpSpec, transition, t, t_entry=None, covariates=None) -> np.ndarray:
    """Probability of moving along ``transition`` by ``t`` from its from-state.

    Starts in the from-state at ``s`` (0 or the entry time) with every other
    state absorbing.
    """
    label = _label(transition)
    a, b = (int(v) for v in label.split("->"))
    others = [f"{f}->{g}" for f, g in dgp.diagram.transitions if f == a]
    j = others.index(label)
    t, te = _entries(dgp, label, t, t_entry)
    out = np.empty(len(t))
    for s in np.unique(te):
        sel = np.flatnonzero(te == s)
        hs = [_hazard_fn(dgp, lab, s, covariates, s) for lab in others]

        def rhs(u, y):
            rates = np.array([float(h(u)) for h in hs])
            return np.r_[-y[0] * rates.sum(), y[0] * rates]

        tt = t[sel]
        order = np.argsort(tt)
        ts = tt[order]
        if ts[-1] <= s:
            out[sel] = 0.0
            continue
        sol = solve_ivp(rhs, (s, ts[-1]), np.r_[1.0, np.zeros(len(hs))], t_eval=np.maximum(ts, s),
                        rtol=RTOL, atol=ATOL, method="DOP853")
        res = np.empty(len(ts))
        res[order] = sol.y[1 + j]
        out[sel] = res
    return out
