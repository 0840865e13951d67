"""B-spline bases, difference penalties and stratified smooth blocks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline

from .errors import ExtrapolationBeyondKnots, MissingNoneLevel, OrderTooLarge, XOutsideKnots

NONE = "none"


@dataclass(frozen=True)
class SmoothSpec:
    """Declarative smooth term ``f(variable)``, optionally stratified by ``by``."""

    variable: str
    k: int = 20
    degree: int = 3
    penalty_order: int = 2
    by: str | None = None
    mode: str = "ps"
    knots: tuple | None = None  # full clamped knot vector, else quantile-based

    def __post_init__(self):
        if self.k < self.degree + 2:
            raise ValueError(f"k={self.k} must be at least degree + 2 = {self.degree + 2}")
        if self.penalty_order >= self.k:
            raise OrderTooLarge(f"penalty order {self.penalty_order} must be < k={self.k}")
        if self.mode not in ("ps", "fs"):
            raise ValueError(f"unknown smooth mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "variable": self.variable, "k": self.k, "degree": self.degree,
            "penalty_order": self.penalty_order, "by": self.by, "mode": self.mode,
            "knots": None if self.knots is None else list(self.knots),
        }

    @classmethod
    def from_dict(cls, d) -> "SmoothSpec":
        d = dict(d)
        if d.get("knots") is not None:
            d["knots"] = tuple(d["knots"])
        return cls(**d)


def quantile_knots(x, k: int, degree: int = 3) -> np.ndarray:
    """Clamped knot vector with interior knots at quantiles of the unique values of ``x``."""
    u = np.unique(np.asarray(x, dtype=float))
    if len(u) < 2:
        raise XOutsideKnots("need at least two distinct values to place knots")
    n_inner = k - degree - 1
    lo, hi = u[0], u[-1]
    inner = np.quantile(u, np.arange(1, n_inner + 1) / (n_inner + 1)) if n_inner > 0 else np.empty(0)
    return np.r_[np.repeat(lo, degree + 1), inner, np.repeat(hi, degree + 1)]


def bspline_design(x, knots, degree: int = 3, outside: str = "error"):
    """Sparse B-spline design matrix.

    Parameters
    ----------
    x : array_like
    knots : array_like
        Full knot vector with ``degree + 1`` repeated boundary knots.
    outside : {"error", "clamp"}
        ``"clamp"`` evaluates out-of-range values at the nearest boundary
        and emits :class:`ExtrapolationBeyondKnots`.

    Returns
    -------
    scipy.sparse.csr_array
        ``len(x) × (len(knots) - degree - 1)``; each row sums to one.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    lo, hi = t[degree], t[len(t) - degree - 1]
    out = (x < lo) | (x > hi) | ~np.isfinite(x)
    if out.any():
        if outside != "clamp" or not np.isfinite(x).all():
            raise XOutsideKnots(f"{int(out.sum())} value(s) outside knot range [{lo}, {hi}]")
        warnings.warn(
            f"{int(out.sum())} value(s) outside [{lo:g}, {hi:g}] clamped to the boundary",
            ExtrapolationBeyondKnots, stacklevel=2,
        )
        x = np.clip(x, lo, hi)
    return sp.csr_matrix(BSpline.design_matrix(x, t, degree))


def difference_matrix(k: int, order: int) -> np.ndarray:
    if order >= k:
        raise OrderTooLarge(f"order {order} must be < k={k}")
    return np.diff(np.eye(k), n=order, axis=0)


def difference_penalty(k: int, order: int = 2) -> np.ndarray:
    """``DᵀD`` for the ``order``-th difference operator on ``k`` coefficients."""
    D = difference_matrix(k, order)
    return D.T @ D


def sum_to_zero_transform(colsums) -> np.ndarray:
    """Columns spanning the complement of ``colsums`` (a ``k × (k-1)`` matrix)."""
    c = np.asarray(colsums, dtype=float).reshape(-1, 1)
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


def full_rank_penalty(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Add an identity on the null space of ``S``.

    The null-space eigenvalues are set to the smallest positive eigenvalue
    so the added penalty is no stronger than the mildest wiggliness penalty.
    """
    w, U = np.linalg.eigh(S)
    pos = w > tol * max(w.max(), 1.0)
    scale = w[pos].min()
    U0 = U[:, ~pos]
    out = S + scale * (U0 @ U0.T)
    return 0.5 * (out + out.T)


@dataclass
class BasisBlock:
    """One stratum of a smooth term.

    ``transform`` maps the identifiable coefficients to the raw B-spline
    coefficients (identity when unconstrained); ``penalty`` acts on the
    identifiable coefficients.
    """

    spec: SmoothSpec
    level: str | None
    knots: np.ndarray
    transform: np.ndarray
    penalty: np.ndarray
    lambda_group: str
    constrained: bool

    @property
    def n_raw(self) -> int:
        return self.transform.shape[0]

    @property
    def n_coef(self) -> int:
        return self.transform.shape[1]

    @property
    def null_dim(self) -> int:
        w = np.linalg.eigvalsh(self.penalty)
        return int(np.sum(w <= 1e-9 * max(w.max(), 1.0)))

    @property
    def name(self) -> str:
        s = f"s({self.spec.variable})"
        return s if self.level is None else f"{s}:{self.spec.by}={self.level}"

    def raw_design(self, x, outside="error"):
        return bspline_design(x, self.knots, self.spec.degree, outside=outside)

    def design(self, x, active=None, outside="error") -> np.ndarray:
        """Dense constrained design; rows outside ``active`` are zero."""
        B = self.raw_design(x, outside=outside) @ self.transform
        if active is not None:
            B = B * np.asarray(active, dtype=float)[:, None]
        return B

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(), "level": self.level, "knots": self.knots.tolist(),
            "transform": self.transform.tolist(), "penalty": self.penalty.tolist(),
            "lambda_group": self.lambda_group, "constrained": self.constrained,
        }

    @classmethod
    def from_dict(cls, d) -> "BasisBlock":
        return cls(
            SmoothSpec.from_dict(d["spec"]), d["level"], np.asarray(d["knots"], dtype=float),
            np.asarray(d["transform"], dtype=float).reshape(len(d["transform"]), -1),
            np.asarray(d["penalty"], dtype=float), d["lambda_group"], bool(d["constrained"]),
        )


def is_helper(column) -> bool:
    return column is not None and str(column).startswith("trans_after_")


def stratified_smooth(x, by_values, spec: SmoothSpec, levels=None) -> list:
    """Build the basis blocks of one smooth term.

    Parameters
    ----------
    x : array_like
        Covariate values for all rows.
    by_values : array_like or None
        Stratum of each row. Rows at level ``none`` get no basis.
    spec : SmoothSpec
    levels : sequence, optional
        Declared levels of the stratifying column; defaults to the observed
        ones.

    Returns
    -------
    list of BasisBlock
        ps mode: one centered block and one smoothing parameter per level.
        fs mode: one uncentered block per level with a full-rank penalty,
        all sharing one smoothing parameter.
    """
    x = np.asarray(x, dtype=float)
    if spec.by is None or by_values is None:
        strata = [(None, np.ones(len(x), dtype=bool))]
    else:
        by = np.asarray(by_values).astype(str)
        levels = [str(v) for v in (levels if levels is not None else np.unique(by))]
        if is_helper(spec.by) and NONE not in levels:
            raise MissingNoneLevel(f"helper column {spec.by!r} lacks the reference level 'none'")
        strata = [(lv, by == lv) for lv in levels if lv != NONE]
    active_any = np.zeros(len(x), dtype=bool)
    for _, m in strata:
        active_any |= m
    if spec.knots is not None:
        knots = np.asarray(spec.knots, dtype=float)
    else:
        knots = quantile_knots(x[active_any], spec.k, spec.degree)
    S = difference_penalty(spec.k, spec.penalty_order)
    blocks = []
    for lv, mask in strata:
        if spec.mode == "ps":
            B = bspline_design(x[mask], knots, spec.degree)
            Z = sum_to_zero_transform(np.asarray(B.sum(axis=0)).ravel())
            pen = Z.T @ S @ Z
            group = f"s({spec.variable})" + ("" if lv is None else f":{spec.by}={lv}")
            blocks.append(BasisBlock(spec, lv, knots, Z, 0.5 * (pen + pen.T), group, True))
        else:
            group = f"s({spec.variable})" + ("" if spec.by is None else f":{spec.by}")
            blocks.append(
                BasisBlock(spec, lv, knots, np.eye(spec.k), full_rank_penalty(S), group, False)
            )
    return blocks
