"""Piecewise exponential additive models: design assembly and penalized fitting.

The model is a Poisson GLM on PED rows with log link, offset ``log(y_ij)``
and penalized B-spline terms. Fitting is penalized IRLS; smoothing
parameters minimize ``deviance + 2 * edf`` (Poisson scale fixed at 1).

Internally the design is kept as a sparse matrix of raw B-spline values
``Xr`` together with a block transform ``T`` that applies the
identifiability constraints, so ``X = Xr @ T`` is never formed densely.
PED rows that share a design row are collapsed before fitting; this leaves
the likelihood unchanged up to an additive constant and the exact deviance
is recomputed on the original rows.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import stats

from .errors import (
    CriterionNonFinite,
    Divergence,
    MissingColumn,
    NonFiniteLinearPredictor,
    RankDeficiency,
    TermNotFound,
)
from .events import StateDiagram
from .splines import NONE, BasisBlock, SmoothSpec, stratified_smooth

# ------------------------------------------------------------------ spec


@dataclass(frozen=True)
class TransitionIntercepts:
    column: str = "transition"


@dataclass(frozen=True)
class Linear:
    column: str
    by: str | None = None
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or self.column


@dataclass(frozen=True)
class Smooth:
    spec: SmoothSpec


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple
    offset: str = "offset"
    response: str = "status"
    weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        n = sum(isinstance(t, TransitionIntercepts) for t in self.terms)
        if n != 1:
            raise ValueError("ModelSpec needs exactly one TransitionIntercepts term")

    def columns(self) -> list:
        out = [self.offset, self.response]
        for t in self.terms:
            if isinstance(t, TransitionIntercepts):
                out.append(t.column)
            elif isinstance(t, Linear):
                out += [t.column] + ([t.by] if t.by else [])
            else:
                out += [t.spec.variable] + ([t.spec.by] if t.spec.by else [])
        if self.weights:
            out.append(self.weights)
        return list(dict.fromkeys(out))

    def to_dict(self) -> dict:
        terms = []
        for t in self.terms:
            if isinstance(t, TransitionIntercepts):
                terms.append({"type": "intercepts", "column": t.column})
            elif isinstance(t, Linear):
                terms.append({"type": "linear", "column": t.column, "by": t.by, "name": t.name})
            else:
                terms.append({"type": "smooth", **t.spec.to_dict()})
        return {"terms": terms, "offset": self.offset, "response": self.response, "weights": self.weights}

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        terms = []
        for t in d["terms"]:
            t = dict(t)
            kind = t.pop("type")
            if kind == "intercepts":
                terms.append(TransitionIntercepts(**t))
            elif kind == "linear":
                terms.append(Linear(**t))
            elif kind == "smooth":
                terms.append(Smooth(SmoothSpec.from_dict(t)))
            else:
                raise ValueError(f"unknown term type {kind!r}")
        return cls(tuple(terms), d.get("offset", "offset"), d.get("response", "status"), d.get("weights"))


def ssts_spec(diagram: StateDiagram, covariates=(), k: int = 20, entry_mode: str = "ps", entry=True) -> ModelSpec:
    """Stratified single time scale model.

    One smooth of ``t`` per transition, plus state-entry-time smooths for
    transitions out of later states, and covariates with
    transition-specific effects.
    """
    terms = [TransitionIntercepts()]
    terms += [Linear(c, by="transition") for c in covariates]
    terms.append(Smooth(SmoothSpec("t", k=k, by="transition")))
    if entry:
        for d in range(1, diagram.D):
            terms.append(Smooth(SmoothSpec(f"t_entry_{d}", k=k, by=f"trans_after_{d}_exact", mode=entry_mode)))
    return ModelSpec(tuple(terms))


def mts_spec(diagram: StateDiagram, covariates=(), k: int = 20, mode: str = "ps", entry=True) -> ModelSpec:
    """Multiple time scales model.

    ``t`` smooths are shared by progression transitions and by transitions
    into each terminal risk (stratified by ``trans_after_0``); each later
    state adds smooths of its own clock ``t{d}`` and entry time.
    """
    terms = [TransitionIntercepts()]
    terms += [Linear(c, by="transition") for c in covariates]
    terms.append(Smooth(SmoothSpec("t", k=k, by="trans_after_0")))
    for d in range(1, diagram.D):
        terms.append(Smooth(SmoothSpec(f"t{d}", k=k, by=f"trans_after_{d}", mode=mode)))
        if entry:
            terms.append(Smooth(SmoothSpec(f"t_entry_{d}", k=k, by=f"trans_after_{d}", mode=mode)))
    return ModelSpec(tuple(terms))


# ---------------------------------------------------------------- layout


@dataclass
class ColumnInfo:
    name: str
    term: str
    level: str | None
    kind: str  # intercept | linear | smooth


@dataclass
class Layout:
    """Column structure of an assembled design, reusable on new data."""

    spec: ModelSpec
    intercept_levels: list
    linear: list  # dicts: term, column, by, by_levels, cat_levels, raw_start, n
    blocks: list  # BasisBlock
    block_raw: list  # raw column start per block
    block_coef: list  # coef column start per block
    n_raw: int
    n_coef: int
    columns: list

    def penalty_groups(self) -> dict:
        groups = {}
        for b, start in zip(self.blocks, self.block_coef):
            idx = np.arange(start, start + b.n_coef)
            groups.setdefault(b.lambda_group, []).append((idx, b.penalty))
        return groups

    def transform(self):
        """Sparse ``n_raw × n_coef`` constraint transform."""
        rows, cols, vals = [], [], []
        n_lin = self.block_raw[0] if self.blocks else self.n_raw
        rows.append(np.arange(n_lin))
        cols.append(np.arange(n_lin))
        vals.append(np.ones(n_lin))
        for b, r0, c0 in zip(self.blocks, self.block_raw, self.block_coef):
            Z = sp.coo_matrix(b.transform)
            rows.append(Z.row + r0)
            cols.append(Z.col + c0)
            vals.append(Z.data)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_raw, self.n_coef),
        )

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "intercept_levels": self.intercept_levels,
            "linear": self.linear,
            "blocks": [b.to_dict() for b in self.blocks],
            "block_raw": self.block_raw,
            "block_coef": self.block_coef,
            "n_raw": self.n_raw,
            "n_coef": self.n_coef,
            "columns": [c.__dict__ for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d) -> "Layout":
        return cls(
            ModelSpec.from_dict(d["spec"]), d["intercept_levels"], d["linear"],
            [BasisBlock.from_dict(b) for b in d["blocks"]], d["block_raw"], d["block_coef"],
            d["n_raw"], d["n_coef"], [ColumnInfo(**c) for c in d["columns"]],
        )


def _levels(series) -> list:
    if isinstance(series.dtype, pd.CategoricalDtype):
        return [str(v) for v in series.cat.categories]
    return sorted({str(v) for v in series.unique()})


def _require(frame, cols):
    for c in cols:
        if c not in frame.columns:
            raise MissingColumn(f"column {c!r} required by the model is missing")


def build_layout(frame: pd.DataFrame, spec: ModelSpec) -> Layout:
    """Decide columns, knots and constraints from training rows."""
    _require(frame, [c for c in spec.columns() if c != spec.weights])
    cols: list = []
    icpt = next(t for t in spec.terms if isinstance(t, TransitionIntercepts))
    levels = _levels(frame[icpt.column])
    cols += [ColumnInfo(f"(Intercept):{lv}", "intercept", lv, "intercept") for lv in levels]
    raw = len(levels)
    linear = []
    for t in spec.terms:
        if not isinstance(t, Linear):
            continue
        s = frame[t.column]
        cat = None
        if isinstance(s.dtype, pd.CategoricalDtype) or s.dtype == object:
            cat = _levels(s)
        by_levels = None
        if t.by:
            by_levels = [lv for lv in _levels(frame[t.by]) if lv != NONE]
        n_x = 1 if cat is None else len(cat) - 1
        n = n_x * (len(by_levels) if by_levels else 1)
        for bi, bl in enumerate(by_levels or [None]):
            for ci in range(n_x):
                nm = t.label if cat is None else f"{t.label}[{cat[ci + 1]}]"
                cols.append(ColumnInfo(nm if bl is None else f"{nm}:{bl}", nm, bl, "linear"))
        linear.append({"term": t.label, "column": t.column, "by": t.by, "by_levels": by_levels,
                       "cat_levels": cat, "raw_start": raw, "n": n})
        raw += n
    blocks, block_raw = [], []
    for t in spec.terms:
        if not isinstance(t, Smooth):
            continue
        sspec = t.spec
        by_vals = frame[sspec.by].astype(str).to_numpy() if sspec.by else None
        lv = _levels(frame[sspec.by]) if sspec.by else None
        for b in stratified_smooth(frame[sspec.variable].to_numpy(dtype=float), by_vals, sspec, lv):
            blocks.append(b)
            block_raw.append(raw)
            raw += b.n_raw
    c0 = raw - sum(b.n_raw for b in blocks)
    block_coef = []
    for b in blocks:
        block_coef.append(c0)
        for i in range(b.n_coef):
            cols.append(ColumnInfo(f"{b.name}.{i + 1}", f"s({b.spec.variable})", b.level, "smooth"))
        c0 += b.n_coef
    return Layout(spec, levels, linear, blocks, block_raw, block_coef, raw, c0, cols)


def model_matrix(frame: pd.DataFrame, layout: Layout, outside: str = "error"):
    """Sparse raw design (rows of ``frame`` × ``layout.n_raw``)."""
    spec = layout.spec
    icpt = next(t for t in spec.terms if isinstance(t, TransitionIntercepts))
    n = len(frame)
    rows, cols, vals = [], [], []
    lvl_index = {lv: i for i, lv in enumerate(layout.intercept_levels)}
    _require(frame, [icpt.column])
    codes = frame[icpt.column].astype(str).map(lvl_index)
    if codes.isna().any():
        raise MissingColumn(f"unknown level in {icpt.column!r}")
    rows.append(np.arange(n))
    cols.append(codes.to_numpy(dtype=np.int64))
    vals.append(np.ones(n))
    for lin in layout.linear:
        _require(frame, [lin["column"]] + ([lin["by"]] if lin["by"] else []))
        if lin["by"]:
            bl = {lv: i for i, lv in enumerate(lin["by_levels"])}
            bcode = frame[lin["by"]].astype(str).map(bl).to_numpy(dtype=float)
        else:
            bcode = np.zeros(n)
        ok = ~np.isnan(bcode)
        n_x = 1 if lin["cat_levels"] is None else len(lin["cat_levels"]) - 1
        if lin["cat_levels"] is None:
            x = frame[lin["column"]].to_numpy(dtype=float)
            r = np.flatnonzero(ok)
            rows.append(r)
            cols.append(lin["raw_start"] + bcode[r].astype(np.int64) * n_x)
            vals.append(x[r])
        else:
            cl = {lv: i for i, lv in enumerate(lin["cat_levels"])}
            cc = frame[lin["column"]].astype(str).map(cl).to_numpy(dtype=float)
            if np.isnan(cc).any():
                raise MissingColumn(f"unknown level in {lin['column']!r}")
            r = np.flatnonzero(ok & (cc > 0))
            rows.append(r)
            cols.append(lin["raw_start"] + bcode[r].astype(np.int64) * n_x + cc[r].astype(np.int64) - 1)
            vals.append(np.ones(len(r)))
    for b, r0 in zip(layout.blocks, layout.block_raw):
        sspec = b.spec
        _require(frame, [sspec.variable] + ([sspec.by] if sspec.by else []))
        if sspec.by:
            mask = (frame[sspec.by].astype(str) == b.level).to_numpy()
        else:
            mask = np.ones(n, dtype=bool)
        r = np.flatnonzero(mask)
        if len(r) == 0:
            continue
        B = sp.coo_matrix(b.raw_design(frame[sspec.variable].to_numpy(dtype=float)[r], outside=outside))
        rows.append(r[B.row])
        cols.append(B.col + r0)
        vals.append(B.data)
    X = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, layout.n_raw)
    )
    X.sum_duplicates()
    return X


@dataclass
class Design:
    X: object  # raw sparse design
    T: object  # sparse constraint transform
    y: np.ndarray
    offset: np.ndarray
    weights: np.ndarray
    layout: Layout

    @property
    def penalties(self) -> dict:
        return self.layout.penalty_groups()

    def dense(self) -> np.ndarray:
        return np.asarray((self.X @ self.T).todense())


def assemble_design(ped, spec: ModelSpec, weights=None, check_rank: bool = True) -> Design:
    """Design, offset, response and penalty blocks for a PED frame.

    Raises
    ------
    RankDeficiency
        If a design without factor-smooth terms is not of full column rank.
    """
    frame = ped.frame if hasattr(ped, "frame") else ped
    layout = build_layout(frame, spec)
    X = model_matrix(frame, layout)
    w = _weights(frame, spec, weights)
    d = Design(X, layout.transform(), frame[spec.response].to_numpy(dtype=float),
               frame[spec.offset].to_numpy(dtype=float), w, layout)
    if check_rank:
        _check_rank(d.X, d.T, layout)
    return d


def _weights(frame, spec, weights):
    if weights is None and spec.weights:
        weights = spec.weights
    if weights is None:
        return np.ones(len(frame))
    if isinstance(weights, str):
        _require(frame, [weights])
        w = frame[weights].to_numpy(dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    if w.shape != (len(frame),) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite, non-negative and one per row")
    return w


def _check_rank(X, T, layout, tol=1e-10):
    if any(b.spec.mode == "fs" for b in layout.blocks):
        return
    G = np.asarray((T.T @ (X.T @ X) @ T).todense()) if sp.issparse(X) else T.T @ X.T @ X @ T
    d = np.sqrt(np.clip(np.diag(G), 1e-300, None))
    ev = np.linalg.eigvalsh(G / np.outer(d, d))
    if ev[0] <= tol * ev[-1]:
        raise RankDeficiency(
            f"design is rank deficient (smallest scaled eigenvalue {ev[0]:.2e}); check helper variables"
        )


# ---------------------------------------------------------------- fitting


class _Problem:
    """Poisson problem ``y ~ Po(exp(Xr T beta + offset))`` with prior weights."""

    def __init__(self, X, T, y, offset, w):
        self.X = sp.csr_matrix(X) if sp.issparse(X) else None
        self.Xd = None if sp.issparse(X) else np.asarray(X, dtype=float)
        self.T = T
        self.y = np.asarray(y, dtype=float)
        self.off = np.asarray(offset, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.p = T.shape[1]

    def eta(self, beta):
        theta = self.T @ beta
        lin = self.X @ theta if self.X is not None else self.Xd @ theta
        return lin + self.off

    def xtv(self, v):
        r = self.X.T @ v if self.X is not None else self.Xd.T @ v
        return self.T.T @ r

    def xtwx(self, W):
        if self.X is not None:
            A = self.X.T @ sp.diags(W) @ self.X
            A = self.T.T @ A @ self.T
            A = A.toarray() if sp.issparse(A) else np.asarray(A)
        else:
            XT = self.Xd @ self.T if not sp.issparse(self.T) else self.Xd @ self.T.toarray()
            A = XT.T @ (XT * W[:, None])
        return 0.5 * (A + A.T)

    def deviance(self, mu):
        return poisson_deviance(self.y, mu, self.w)


def poisson_deviance(y, mu, w) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(w * (t - (y - mu))))


def penalty_matrix(p: int, groups: dict, lambdas: dict) -> np.ndarray:
    S = np.zeros((p, p))
    for g, parts in groups.items():
        lam = lambdas[g]
        for idx, Sg in parts:
            S[np.ix_(idx, idx)] += lam * Sg
    return S


def _group_mats(p, groups):
    out = {}
    for g, parts in groups.items():
        S = np.zeros((p, p))
        for idx, Sg in parts:
            S[np.ix_(idx, idx)] += Sg
        out[g] = S
    return out


@dataclass
class PirlsResult:
    beta: np.ndarray
    deviance: float
    penalized_deviance: float
    XtWX: np.ndarray
    H: np.ndarray
    grad_norm: float
    n_iter: int
    converged: bool
    mu: np.ndarray


def _safe_exp(eta):
    if not np.all(np.isfinite(eta)):
        raise NonFiniteLinearPredictor("linear predictor is not finite")
    if eta.max() > 700:
        raise NonFiniteLinearPredictor("linear predictor overflows exp()")
    return np.exp(eta)


def _initial_beta(p, icpt_cols, y, off, w, icpt_rows):
    beta = np.zeros(p)
    for j, rows in zip(icpt_cols, icpt_rows):
        E = float(np.sum(w[rows] * y[rows]))
        T = float(np.sum(w[rows] * np.exp(off[rows])))
        if T > 0:
            beta[j] = math.log(max(E, 0.1) / T)
    return beta


def _pirls(prob: _Problem, S: np.ndarray, beta0, maxit=100, tol_dev=1e-8, tol_grad=1e-6, max_halving=30):
    beta = np.array(beta0, dtype=float)
    mu = _safe_exp(prob.eta(beta))
    dev = prob.deviance(mu)
    pdev = dev + beta @ S @ beta
    rel = np.inf
    it = 0
    converged = False
    for it in range(1, maxit + 1):
        W = prob.w * mu
        grad = prob.xtv(prob.w * (prob.y - mu)) - S @ beta
        gnorm = float(np.max(np.abs(grad)))
        if rel < tol_dev and gnorm < tol_grad:
            converged = True
            it -= 1
            break
        A = prob.xtwx(W)
        H = A + S
        try:
            c = sla.cho_factor(H, lower=True, check_finite=False)
            step = sla.cho_solve(c, grad, check_finite=False)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        ok = False
        for _ in range(max_halving + 1):
            cand = beta + step
            try:
                mu_c = _safe_exp(prob.eta(cand))
            except NonFiniteLinearPredictor:
                step = step / 2
                continue
            dev_c = prob.deviance(mu_c)
            pdev_c = dev_c + cand @ S @ cand
            if np.isfinite(pdev_c) and pdev_c <= pdev + 1e-10 * abs(pdev):
                ok = True
                break
            step = step / 2
        if not ok:
            if gnorm < tol_grad:
                converged = True
                break
            raise Divergence("step halving exhausted without decreasing the penalized deviance")
        rel = abs(pdev_c - pdev) / (abs(pdev_c) + 0.1)
        beta, mu, dev, pdev = cand, mu_c, dev_c, pdev_c
    W = prob.w * mu
    A = prob.xtwx(W)
    grad = prob.xtv(prob.w * (prob.y - mu)) - S @ beta
    gnorm = float(np.max(np.abs(grad)))
    converged = converged or (rel < tol_dev and gnorm < tol_grad)
    return PirlsResult(beta, dev, pdev, A, A + S, gnorm, it, converged, mu)


def fit_pirls(X, y, offset, weights, penalties, lambdas, beta0=None, T=None, maxit=100):
    """Penalized IRLS at fixed smoothing parameters.

    Parameters
    ----------
    X : array or sparse matrix
        Design (raw design when ``T`` is given).
    penalties : dict
        ``group -> [(column indices, S), ...]``.
    lambdas : dict
        ``group -> lambda``.

    Returns
    -------
    PirlsResult
    """
    X = X if sp.issparse(X) else np.asarray(X, dtype=float)
    n, p_raw = X.shape
    T = sp.identity(p_raw, format="csr") if T is None else T
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    prob = _Problem(X, T, y, offset, w)
    S = penalty_matrix(prob.p, penalties, lambdas)
    if beta0 is None:
        beta0 = np.zeros(prob.p)
        Xd = (X @ T).toarray() if sp.issparse(X) else X @ (T.toarray() if sp.issparse(T) else T)
        k = np.flatnonzero(np.all(Xd == 1.0, axis=0))
        if len(k):
            E = float(np.sum(w * np.asarray(y, dtype=float)))
            beta0[k[0]] = math.log(max(E, 0.1) / float(np.sum(w * np.exp(np.asarray(offset, dtype=float)))))
    res = _pirls(prob, S, beta0, maxit=maxit)
    if not res.converged:
        warnings.warn("PIRLS did not reach the convergence tolerances", RuntimeWarning, stacklevel=2)
    return res


# --------------------------------------------------- smoothing parameters

_RHO_LO, _RHO_HI = -12.0, 18.0
_GOLD = (math.sqrt(5) - 1) / 2


def _golden(f, a, b, tol):
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _cyclic_search(crit, rho0: dict, names, tol_crit=1e-4, tol_rho=0.01, max_cycles=20, brackets=None,
                   scan_step=1.0):
    """Cyclic coordinate search over log smoothing parameters.

    Each coordinate is bracketed by a coarse scan (the criterion can have
    several local minima) and refined by golden-section search.
    """
    rho = dict(rho0)
    cur = crit(rho)
    if not np.isfinite(cur):
        raise CriterionNonFinite("smoothness criterion is not finite at the starting values")
    for _ in range(max_cycles):
        start = cur
        for g in names:
            lo, hi = (brackets or {}).get(g, (_RHO_LO, _RHO_HI))

            def f(r, g=g):
                trial = dict(rho)
                trial[g] = r
                v = crit(trial)
                return v if np.isfinite(v) else np.inf

            grid = np.arange(lo, hi + 1e-9, scan_step)
            vals = [f(r) for r in grid]
            i = int(np.argmin(vals))
            r_best, v_best = _golden(f, max(lo, grid[i] - scan_step), min(hi, grid[i] + scan_step), tol_rho)
            if vals[i] < v_best:
                r_best, v_best = grid[i], vals[i]
            if v_best < cur:
                rho[g], cur = float(r_best), v_best
        if not np.isfinite(cur):
            raise CriterionNonFinite("smoothness criterion became non-finite")
        if abs(start - cur) < tol_crit:
            break
    return rho, cur


class _WorkingModel:
    """Working linear model of one IRLS step: evaluates rss + 2 edf fast."""

    def __init__(self, A, b, c, Sg, scales):
        self.A, self.b, self.c = A, b, c
        self.Sg, self.scales = Sg, scales

    def solve(self, rho):
        H = self.A.copy()
        for g, S in self.Sg.items():
            H += math.exp(rho[g]) * self.scales[g] * S
        cf = sla.cho_factor(H, lower=True, check_finite=False)
        beta = sla.cho_solve(cf, self.b, check_finite=False)
        return H, cf, beta

    def crit(self, rho):
        try:
            H, cf, beta = self.solve(rho)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        edf = float(np.trace(sla.cho_solve(cf, self.A, check_finite=False)))
        rss = self.c - 2 * beta @ self.b + beta @ self.A @ beta
        return rss + 2.0 * edf


def _penalty_scales(A, Sg):
    out = {}
    for g, S in Sg.items():
        idx = np.flatnonzero(np.any(S != 0, axis=0))
        a = np.linalg.norm(A[np.ix_(idx, idx)])
        s = np.linalg.norm(S)
        out[g] = (a / s) if s > 0 and a > 0 else 1.0
    return out


def select_lambdas(X, y, offset, weights, penalties, T=None, method="performance", beta0=None, maxit=50):
    """Smoothing parameters minimizing ``deviance + 2 * edf``.

    ``method="performance"`` optimizes the criterion of the IRLS working
    model at every step (the deviance is replaced by its working weighted
    residual sum of squares) until the smoothing parameters settle;
    ``method="outer"`` evaluates the exact criterion with a converged
    penalized fit per candidate and is much slower.

    Returns
    -------
    lambdas : dict
    info : dict
    """
    X = X if sp.issparse(X) else np.asarray(X, dtype=float)
    n, p_raw = X.shape
    T = sp.identity(p_raw, format="csr") if T is None else T
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    prob = _Problem(X, T, y, offset, w)
    groups = dict(penalties)
    names = list(groups)
    Sg = _group_mats(prob.p, groups)
    beta = np.zeros(prob.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    mu = _safe_exp(prob.eta(beta))
    A0 = prob.xtwx(prob.w * mu)
    scales = _penalty_scales(A0, Sg)
    rho = {g: 0.0 for g in names}
    if method == "outer":
        state = {"beta": beta}

        def crit(r):
            lam = {g: math.exp(r[g]) * scales[g] for g in names}
            S = penalty_matrix(prob.p, groups, lam)
            res = _pirls(prob, S, state["beta"])
            state["beta"] = res.beta
            edf = float(np.trace(np.linalg.solve(res.H, res.XtWX)))
            return res.deviance + 2 * edf

        rho, cur = _cyclic_search(crit, rho, names)
        return {g: math.exp(rho[g]) * scales[g] for g in names}, {"criterion": cur, "n_iter": 0}

    info = {"n_iter": 0}
    prev_pdev = np.inf
    for it in range(1, maxit + 1):
        eta = prob.eta(beta)
        mu = _safe_exp(eta)
        W = prob.w * mu
        z = eta - prob.off + (prob.y - mu) / mu
        A = prob.xtwx(W)
        b = prob.xtv(W * z)
        c = float(np.sum(W * z * z))
        wm = _WorkingModel(A, b, c, Sg, scales)
        br = None if it == 1 else {g: (max(_RHO_LO, rho[g] - 3), min(_RHO_HI, rho[g] + 3)) for g in names}
        new_rho, _ = _cyclic_search(wm.crit, rho, names, brackets=br)
        _, _, beta_new = wm.solve(new_rho)
        lam = {g: math.exp(new_rho[g]) * scales[g] for g in names}
        S = penalty_matrix(prob.p, groups, lam)
        # guard against overshooting steps
        step = beta_new - beta
        pdev_old = prob.deviance(mu) + beta @ S @ beta
        for _ in range(30):
            try:
                mu_c = _safe_exp(prob.eta(beta + step))
                pdev_new = prob.deviance(mu_c) + (beta + step) @ S @ (beta + step)
                if np.isfinite(pdev_new) and (pdev_new <= pdev_old or it > 3):
                    break
            except NonFiniteLinearPredictor:
                pass
            step = step / 2
        beta = beta + step
        drho = max(abs(new_rho[g] - rho[g]) for g in names)
        rho = new_rho
        rel = abs(pdev_new - prev_pdev) / (abs(pdev_new) + 0.1)
        prev_pdev = pdev_new
        info["n_iter"] = it
        if it > 1 and drho < 0.05 and rel < 1e-6:
            break
    return {g: math.exp(rho[g]) * scales[g] for g in names}, {"beta": beta, **info}


# ------------------------------------------------------------- FittedPam


@dataclass
class FittedPam:
    layout: Layout
    beta: np.ndarray
    V: np.ndarray
    lambdas: dict
    edf: dict
    edf_total: float
    deviance: float
    aic: float
    diagram: StateDiagram | None = None
    info: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.layout.spec

    @property
    def columns(self) -> list:
        return self.layout.columns

    @property
    def theta(self) -> np.ndarray:
        """Raw basis coefficients ``T @ beta``."""
        return self.layout.transform() @ self.beta

    def design(self, frame, outside="clamp"):
        """Constrained design rows for ``frame`` as a sparse matrix."""
        return model_matrix(frame, self.layout, outside=outside) @ self.layout.transform()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "layout": self.layout.to_dict(),
            "beta": self.beta.tolist(),
            "lambdas": self.lambdas,
            "edf": self.edf,
            "edf_total": self.edf_total,
            "deviance": self.deviance,
            "aic": self.aic,
            "diagram": None if self.diagram is None else self.diagram.to_dict(),
            "info": {k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool))},
        }
        with open(d / "fit.json", "w") as fh:
            json.dump(meta, fh, indent=1)
        np.save(d / "V.npy", self.V)

    @classmethod
    def load(cls, directory) -> "FittedPam":
        d = Path(directory)
        with open(d / "fit.json") as fh:
            meta = json.load(fh)
        return cls(
            Layout.from_dict(meta["layout"]), np.asarray(meta["beta"]), np.load(d / "V.npy"),
            meta["lambdas"], meta["edf"], meta["edf_total"], meta["deviance"], meta["aic"],
            None if meta["diagram"] is None else StateDiagram.from_dict(meta["diagram"]), meta["info"],
        )


def _collapse(frame: pd.DataFrame, spec: ModelSpec, w: np.ndarray):
    """Group rows with identical model variables.

    Returns the representative frame, summed weighted events and exposure,
    and the group index of every original row.
    """
    keys = [c for c in spec.columns() if c not in (spec.offset, spec.response, spec.weights)]
    key_df = frame[keys]
    gid = key_df.groupby(keys, sort=True, observed=True, dropna=False).ngroup().to_numpy()
    order = np.argsort(gid, kind="stable")
    n_g = gid.max() + 1
    first = np.full(n_g, -1)
    first[gid[order[::-1]]] = order[::-1]
    y = frame[spec.response].to_numpy(dtype=float)
    e = np.exp(frame[spec.offset].to_numpy(dtype=float))
    ys = np.bincount(gid, weights=w * y, minlength=n_g)
    es = np.bincount(gid, weights=w * e, minlength=n_g)
    rep = frame.iloc[first].reset_index(drop=True)
    return rep, ys, es, gid


def fit(ped, spec: ModelSpec, weights=None, lambdas: dict | None = None, method: str = "performance",
        check_rank: bool = True, collapse: bool = True) -> FittedPam:
    """Fit a PAM.

    Parameters
    ----------
    ped : PedDataset or DataFrame
    spec : ModelSpec
    weights : array, column name or WeightTable, optional
        Per-row prior weights; a WeightTable is matched on
        ``(subject_id, from_state)``.
    lambdas : dict, optional
        Fixed smoothing parameters; selected when omitted.
    method : {"performance", "outer"}
        Smoothing-parameter search, see :func:`select_lambdas`.
    collapse : bool
        Collapse rows with identical design rows before fitting.

    Returns
    -------
    FittedPam
    """
    frame = ped.frame if hasattr(ped, "frame") else ped
    diagram = getattr(ped, "diagram", None)
    if hasattr(weights, "row_weights"):
        weights = weights.row_weights(frame)
    w = _weights(frame, spec, weights)
    layout = build_layout(frame, spec)
    if collapse:
        rep, ys, es, gid = _collapse(frame, spec, w)
        with np.errstate(divide="ignore"):
            off = np.log(es)
        keep = es > 0
        if not keep.all():
            # rows with zero weight carry no information
            remap = np.cumsum(keep) - 1
            rep, ys, off = rep[keep].reset_index(drop=True), ys[keep], off[keep]
            gid = np.where(keep[gid], remap[gid], -1)
        Xr = model_matrix(rep, layout)
        yv, wv = ys, np.ones(len(ys))
    else:
        Xr = model_matrix(frame, layout)
        yv, off, wv, gid = frame[spec.response].to_numpy(dtype=float), frame[spec.offset].to_numpy(dtype=float), w, None
    T = layout.transform()
    if check_rank:
        _check_rank(Xr, T, layout)
    groups = layout.penalty_groups()
    prob = _Problem(Xr, T, yv, off, wv)
    icpt_rows = [np.flatnonzero(np.asarray(Xr[:, j].todense()).ravel() != 0) for j in range(len(layout.intercept_levels))]
    beta0 = _initial_beta(prob.p, range(len(layout.intercept_levels)), yv, off, wv, icpt_rows)
    info = {}
    if groups and lambdas is None:
        lambdas, sinfo = select_lambdas(Xr, yv, off, wv, groups, T=T, method=method, beta0=beta0)
        info["selection_iterations"] = sinfo.get("n_iter", 0)
        if "beta" in sinfo:
            beta0 = sinfo["beta"]
    lambdas = dict(lambdas or {})
    S = penalty_matrix(prob.p, groups, lambdas)
    res = _pirls(prob, S, beta0)
    if not res.converged:
        raise Divergence(f"PIRLS did not converge (gradient {res.grad_norm:.2e})")
    cf = sla.cho_factor(res.H, lower=True)
    V = sla.cho_solve(cf, np.eye(prob.p))
    V = 0.5 * (V + V.T)
    F = V @ res.XtWX
    edf_diag = np.diag(F)
    edf = {}
    for b, c0 in zip(layout.blocks, layout.block_coef):
        edf[b.name] = float(edf_diag[c0:c0 + b.n_coef].sum())
    edf_total = float(edf_diag.sum())
    # exact deviance on the original rows
    if collapse:
        eta_g = Xr @ (T @ res.beta)
        base = eta_g - off
        y_full = frame[spec.response].to_numpy(dtype=float)
        o_full = frame[spec.offset].to_numpy(dtype=float)
        mu_full = np.exp(np.where(gid >= 0, base[np.maximum(gid, 0)], 0.0) + o_full)
        dev = poisson_deviance(y_full, mu_full, w)
    else:
        dev = res.deviance
    info.update({"pirls_iterations": res.n_iter, "grad_norm": res.grad_norm, "n_rows": len(frame),
                 "n_collapsed": int(Xr.shape[0])})
    return FittedPam(layout, res.beta, V, lambdas, edf, edf_total, dev, dev + 2 * edf_total, diagram, info)


# ------------------------------------------------------------- inference


def coef_table(fit: FittedPam, terms: Sequence[str] | None = None) -> pd.DataFrame:
    """Wald z-tests for intercepts and linear terms.

    Columns: term, transition, estimate, se, z, p.
    """
    rows = []
    se = np.sqrt(np.diag(fit.V))
    for j, c in enumerate(fit.columns):
        if c.kind == "smooth":
            continue
        term = "intercept" if c.kind == "intercept" else c.term
        z = fit.beta[j] / se[j]
        rows.append({"term": term, "transition": c.level, "estimate": fit.beta[j], "se": se[j],
                     "z": z, "p": 2 * stats.norm.sf(abs(z))})
    df = pd.DataFrame(rows, columns=["term", "transition", "estimate", "se", "z", "p"])
    if terms is not None:
        terms = list(terms)
        missing = [t for t in terms if t not in set(df["term"])]
        if missing:
            raise TermNotFound(f"term(s) not in model: {missing}")
        df = df[df["term"].isin(terms)].reset_index(drop=True)
    return df


def penalized_gradient(fit: FittedPam, ped, weights=None) -> np.ndarray:
    """Gradient of the penalized log-likelihood at the fitted coefficients."""
    frame = ped.frame if hasattr(ped, "frame") else ped
    w = _weights(frame, fit.spec, weights)
    Xr = model_matrix(frame, fit.layout)
    T = fit.layout.transform()
    prob = _Problem(Xr, T, frame[fit.spec.response].to_numpy(dtype=float),
                    frame[fit.spec.offset].to_numpy(dtype=float), w)
    mu = np.exp(prob.eta(fit.beta))
    S = penalty_matrix(prob.p, fit.layout.penalty_groups(), fit.lambdas)
    return prob.xtv(w * (prob.y - mu)) - S @ fit.beta
