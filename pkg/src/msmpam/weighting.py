"""Stabilized inverse-propensity weights per subject and from-state."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    ExtremePropensity,
    MissingColumn,
    NonConvergence,
    RankDeficiency,
    Separation,
)


@dataclass
class MultinomialFit:
    """Softmax regression with the first class as reference.

    ``coef`` is ``p × (C-1)``; ``classes`` lists the class labels in column
    order of :meth:`predict_proba`.
    """

    coef: np.ndarray
    classes: tuple
    n_iter: int
    grad_norm: float
    loglik: float

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        eta = np.column_stack([np.zeros(len(X)), X @ self.coef])
        eta -= eta.max(axis=1, keepdims=True)
        P = np.exp(eta)
        return P / P.sum(axis=1, keepdims=True)


def _mlogit_loglik(X, Y, B):
    eta = np.column_stack([np.zeros(len(X)), X @ B])
    m = eta.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(eta - m).sum(axis=1, keepdims=True))).ravel()
    return float(np.sum(eta[Y.astype(bool)]) - lse.sum())


def fit_multinomial_logit(X, classes, tol=1e-8, maxit=100, max_norm=50.0) -> MultinomialFit:
    """Multinomial logistic regression by Newton's method with step-halving.

    Parameters
    ----------
    X : array_like
        ``n × p`` design including any intercept column.
    classes : array_like
        Class label per row; at least two distinct labels.

    Raises
    ------
    RankDeficiency
        ``X`` lacks full column rank.
    Separation
        Coefficient norm exceeds ``max_norm`` (probabilities tending to 0 or 1).
    NonConvergence
        Score max-norm above ``tol`` after ``maxit`` iterations.
    """
    X = np.asarray(X, dtype=float)
    labels, y = np.unique(np.asarray(classes), return_inverse=True)
    C = len(labels)
    if C < 2:
        raise ValueError("need at least two classes")
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficiency("propensity design is rank deficient")
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    B = np.zeros((p, C - 1))
    ll = _mlogit_loglik(X, Y, B)
    it = 0
    gn = np.inf
    for it in range(1, maxit + 1):
        fit = MultinomialFit(B, tuple(labels), it, gn, ll)
        P = fit.predict_proba(X)
        R = Y[:, 1:] - P[:, 1:]
        g = (X.T @ R).ravel(order="F")
        gn = float(np.max(np.abs(g)))
        if gn < tol:
            break
        q = C - 1
        H = np.empty((p * q, p * q))
        for a in range(q):
            for b in range(a, q):
                w = P[:, a + 1] * ((a == b) - P[:, b + 1])
                blk = X.T @ (X * w[:, None])
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk
        step = np.linalg.solve(H, g).reshape((p, q), order="F")
        s = 1.0
        while True:
            Bn = B + s * step
            lln = _mlogit_loglik(X, Y, Bn)
            if lln >= ll - 1e-12 * abs(ll) or s < 1e-10:
                break
            s *= 0.5
        B, ll = Bn, lln
        if np.linalg.norm(B) > max_norm:
            raise Separation(f"coefficient norm {np.linalg.norm(B):.1f} exceeds {max_norm}; classes separable")
    else:
        raise NonConvergence(f"multinomial logit score max-norm {gn:.2e} after {maxit} iterations")
    return MultinomialFit(B, tuple(labels), it, gn, ll)


@dataclass
class WeightTable:
    """Weights keyed by ``(subject_id, from_state)``."""

    frame: pd.DataFrame
    diagnostics: dict = field(default_factory=dict)

    def row_weights(self, ped_frame: pd.DataFrame) -> np.ndarray:
        """Weight for each PED row, matched on subject and from-state."""
        key = pd.MultiIndex.from_frame(self.frame[["subject_id", "from_state"]])
        s = pd.Series(self.frame["weight"].to_numpy(), index=key)
        idx = pd.MultiIndex.from_arrays([ped_frame["subject_id"].to_numpy(), ped_frame["from_state"].to_numpy()])
        w = s.reindex(idx).to_numpy(dtype=float)
        if np.isnan(w).any():
            raise MissingColumn(f"{int(np.isnan(w).sum())} PED row(s) have no weight")
        return w

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def read_csv(cls, path) -> "WeightTable":
        df = pd.read_csv(path)
        for c in ("subject_id", "from_state", "weight"):
            if c not in df.columns:
                raise MissingColumn(c)
        return cls(df[["subject_id", "from_state", "weight"]])


def _design(df, confounders, states, pooled):
    cols = [np.ones(len(df))]
    if pooled:
        for s in states[1:]:
            cols.append((df["from_state"].to_numpy() == s).astype(float))
    for c in confounders:
        cols.append(df[c].to_numpy(dtype=float))
    return np.column_stack(cols)


def stabilized_weights(dataset, exposure: str, confounders=(), pooled: bool = True,
                       cap_quantile: float | None = 0.99, extreme: float = 1e-4) -> WeightTable:
    """Stabilized weights for a categorical exposure.

    Each (subject, from-state) gets the state's marginal frequency of the
    subject's exposure class divided by the propensity of that class given
    the confounders. ``pooled`` fits one model with state indicators;
    otherwise one model per state. Weights above the per-state
    ``cap_quantile`` are capped.
    """
    df = dataset.frame if hasattr(dataset, "frame") else dataset
    for c in [exposure, *confounders]:
        if c not in df.columns:
            raise MissingColumn(c)
    ep = df.drop_duplicates(["subject_id", "from_state"]).reset_index(drop=True)
    states = sorted(ep["from_state"].unique().tolist())
    cls = ep[exposure].astype(str).to_numpy()
    st = ep["from_state"].to_numpy()
    marg = np.empty(len(ep))
    for s in states:
        m = st == s
        u, inv, cnt = np.unique(cls[m], return_inverse=True, return_counts=True)
        marg[m] = (cnt / m.sum())[inv]
    confounders = list(confounders)
    diag = {"pooled": pooled, "cap_quantile": cap_quantile, "n_extreme": 0, "n_capped": 0, "states": {}}
    if not confounders:
        prop = marg.copy()
    else:
        prop = np.empty(len(ep))
        groups = [np.ones(len(ep), dtype=bool)] if pooled else [st == s for s in states]
        for g in groups:
            sub = ep[g]
            X = _design(sub, confounders, sorted(sub["from_state"].unique().tolist()), pooled)
            f = fit_multinomial_logit(X, cls[g])
            P = f.predict_proba(X)
            col = np.searchsorted(np.asarray(f.classes), cls[g])
            prop[g] = P[np.arange(len(sub)), col]
    n_ext = int(np.sum(prop < extreme))
    if n_ext:
        warnings.warn(f"{n_ext} propensities below {extreme:g}", ExtremePropensity, stacklevel=2)
    w = marg / prop
    diag["n_extreme"] = n_ext
    if cap_quantile is not None and confounders:
        for s in states:
            m = st == s
            cap = np.quantile(w[m], cap_quantile)
            over = m & (w > cap)
            diag["n_capped"] += int(over.sum())
            w[over] = cap
    for s in states:
        ws = w[st == s]
        diag["states"][int(s)] = {"n": int(len(ws)), "mean": float(ws.mean()), "min": float(ws.min()),
                                  "max": float(ws.max())}
    out = pd.DataFrame({"subject_id": ep["subject_id"].to_numpy(), "from_state": st, "weight": w})
    return WeightTable(out, diag)
