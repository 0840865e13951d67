"""Hazards, cumulative hazards and transition probabilities from fitted PAMs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ExtrapolationBeyondKnots, GridMismatch, StepTooCoarse
from .events import StateDiagram
from .pam import FittedPam
from .ped import prediction_frame

DT = 0.01
Z95 = 1.959963984540054


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation points.

    1-D grids hold ``t``; triangular grids hold pairs ``(t, t_entry)`` with
    ``t_entry <= t``, ordered by entry time then ``t``.
    """

    t: tuple
    t_entry: tuple | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", tuple(t.tolist()))
        if self.t_entry is None:
            if np.any(np.diff(t) <= 0):
                raise GridMismatch("1-D grid must be strictly increasing")
        else:
            te = np.asarray(self.t_entry, dtype=float)
            if te.shape != t.shape:
                raise GridMismatch("t and t_entry must have equal length")
            if np.any(te > t + 1e-12):
                raise GridMismatch("triangular grid requires t_entry <= t")
            object.__setattr__(self, "t_entry", tuple(te.tolist()))

    @property
    def is_2d(self) -> bool:
        return self.t_entry is not None

    def __len__(self):
        return len(self.t)

    @classmethod
    def one_d(cls, start=0.1, stop=10.0, step=0.1) -> "EvalGrid":
        n = int(round((stop - start) / step)) + 1
        return cls(tuple(np.round(start + step * np.arange(n), 10)))

    @classmethod
    def triangular(cls, start=0.1, stop=10.0, step=0.1) -> "EvalGrid":
        n = int(round((stop - start) / step)) + 1
        v = np.round(start + step * np.arange(n), 10)
        te, t = [], []
        for e in v:
            for x in v[v >= e - 1e-12]:
                te.append(e)
                t.append(x)
        return cls(tuple(t), tuple(te))

    def to_dict(self) -> dict:
        return {"t": list(self.t), "t_entry": None if self.t_entry is None else list(self.t_entry)}


def _capture(fn, *a, **k):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always", ExtrapolationBeyondKnots)
        out = fn(*a, **k)
    flagged = any(issubclass(x.category, ExtrapolationBeyondKnots) for x in w)
    for x in w:
        if not issubclass(x.category, ExtrapolationBeyondKnots):
            warnings.warn_explicit(x.message, x.category, x.filename, x.lineno)
    return out, flagged


def predict_loghazard(fit: FittedPam, newdata: pd.DataFrame, level: float = 0.95) -> pd.DataFrame:
    """Log-hazard with pointwise Wald intervals.

    Returns a frame with ``value``, ``se``, ``lo``, ``hi`` and
    ``extrapolated`` (any model variable outside the training knots was
    clamped to the boundary).
    """
    X, flagged = _capture(fit.design, newdata, outside="clamp")
    if flagged:
        warnings.warn("prediction covariates outside the training knots were clamped",
                      ExtrapolationBeyondKnots, stacklevel=2)
    X = X.tocsr()
    value = X @ fit.beta
    XV = X @ fit.V
    se = np.sqrt(np.maximum(np.asarray(X.multiply(XV).sum(axis=1)).ravel(), 0.0))
    z = _z(level)
    return pd.DataFrame({"value": value, "se": se, "lo": value - z * se, "hi": value + z * se,
                         "extrapolated": flagged})


def _z(level):
    from scipy import stats

    return Z95 if level == 0.95 else float(stats.norm.ppf(0.5 + level / 2))


def posterior_draws(fit: FittedPam, n_draws: int = 200, seed: int = 0) -> np.ndarray:
    """``n_draws × p`` coefficient draws from Normal(beta, V)."""
    rng = np.random.default_rng(seed)
    V = 0.5 * (fit.V + fit.V.T)
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(V)
        L = U * np.sqrt(np.clip(w, 0, None))
    z = rng.standard_normal((n_draws, len(fit.beta)))
    return fit.beta[None, :] + z @ L.T


def _diagram(fit, diagram):
    d = diagram or fit.diagram
    if d is None:
        raise ValueError("a state diagram is required")
    return d


def _steps(start, t, dt):
    m = np.round((np.asarray(t, dtype=float) - start) / dt).astype(np.int64)
    if np.any(np.abs(m * dt - (np.asarray(t) - start)) > 1e-8) or np.any(m < 0):
        raise GridMismatch(f"grid times must lie on start + multiples of dt={dt}")
    return m


def _eta_paths(fit, diagram, label, start, m, dt, profile, entry, coefs):
    """Linear predictor at ``start + i*dt`` for ``i < m`` (rows) and each coefficient vector (columns)."""
    u = start + dt * np.arange(m)
    nd = prediction_frame(diagram, label, u, entry, profile)
    X, flagged = _capture(fit.design, nd, outside="clamp")
    return np.asarray(X @ coefs.T), flagged



def _entry_for(diagram, label, start, entry_times):
    a = int(label.split("->")[0])
    pos = diagram.chain_position(a)
    out = {}
    for d in range(1, diagram.D):
        if pos >= d:
            out[d] = (entry_times or {}).get(d, start)
    return out


def _percentiles(x, axis, level):
    a = 100 * (1 - level) / 2
    lo, hi = np.percentile(x, [a, 100 - a], axis=axis)
    return lo, hi


def _label(transition):
    return transition if isinstance(transition, str) else f"{transition[0]}->{transition[1]}"


def _grid_entries(diagram, a, grid, profile):
    t = np.asarray(grid.t)
    if diagram.chain_position(a) == 0:
        return t, np.zeros(len(t))
    if grid.is_2d:
        return t, np.asarray(grid.t_entry)
    return t, np.full(len(t), float(profile.get("t_entry_1", 0.0)))


CHUNK_ROWS = 20000


def _chunks(starts, limit):
    cur, rows = [], 0
    for st in starts:
        if cur and rows + st[3] > limit:
            yield cur
            cur, rows = [], 0
        cur.append(st)
        rows += st[3]
    if cur:
        yield cur


def _eta_chunk(fit, diagram, label, pos, chunk, dt, covs, coefs):
    """Linear predictors along ``s + i*dt`` for every start in ``chunk``, split per start."""
    us, es, sizes = [], [], []
    for s, _, _, mmax in chunk:
        us.append(s + dt * np.arange(mmax))
        es.append(np.full(mmax, s))
        sizes.append(mmax)
    u = np.concatenate(us)
    e = np.concatenate(es)
    entry = {d: e for d in range(1, diagram.D) if pos >= d}
    nd = prediction_frame(diagram, label, u, entry, covs)
    X, flagged = _capture(fit.design, nd, outside="clamp")
    eta = np.asarray(X @ coefs.T)
    return np.split(eta, np.cumsum(sizes)[:-1]), flagged


def state_summary(fit: FittedPam, from_state, grid, profile=None, diagram=None, dt: float = DT,
                  n_draws: int = 200, seed: int = 0, level: float = 0.95, draws=None,
                  transitions=None, on_coarse: str = "raise") -> pd.DataFrame:
    """Cumulative hazards and first-transition probabilities out of one state.

    Integration starts at 0 for state-0 transitions and otherwise at the
    state-entry time, taken from the grid's ``t_entry`` (triangular grid) or
    ``profile["t_entry_1"]``. The cumulative hazard is a left Riemann sum
    of the hazard at ``start + i*dt``; the probability of each transition
    comes from the product integral with every other state absorbing.
    Bands are percentiles over posterior coefficient draws.
    ``on_coarse="clamp"`` moves the whole row on steps whose increment
    exceeds 1 instead of raising :class:`StepTooCoarse`; the number of such
    steps is stored in ``DataFrame.attrs["clamped_steps"]``.

    Returns
    -------
    DataFrame
        ``quantity`` ("cumhazard" or "transprob"), ``transition``, ``t``,
        ``t_entry_1``, ``estimate``, ``lo``, ``hi``, ``extrapolated``.
    """
    diagram = _diagram(fit, diagram)
    grid = grid if isinstance(grid, EvalGrid) else EvalGrid(tuple(np.atleast_1d(grid)))
    a = int(from_state)
    pos = diagram.chain_position(a)
    profile = dict(profile or {})
    covs = {c: v for c, v in profile.items() if not c.startswith("t_entry_")}
    t, te = _grid_entries(diagram, a, grid, profile)
    if draws is None and n_draws:
        draws = posterior_draws(fit, n_draws, seed)
    coefs = fit.beta[None, :] if draws is None else np.vstack([fit.beta[None, :], draws])
    B = coefs.shape[0]
    ks = [k for k, (f, _) in enumerate(diagram.transitions) if f == a]
    wanted = [k for k in ks if transitions is None or diagram.labels[k] in {_label(x) for x in transitions}]
    n = len(t)
    res = {(q, k): [np.empty(n), np.full(n, np.nan), np.full(n, np.nan)]
           for q in ("cumhazard", "transprob") for k in wanted}
    flag = False
    n_clamped = 0
    starts = []
    for s in np.unique(te):
        sel = np.flatnonzero(te == s)
        m = _steps(s, t[sel], dt)
        starts.append((s, sel, m, int(m.max())))
    for chunk in _chunks(starts, CHUNK_ROWS):
        paths = {}
        if sum(c[3] for c in chunk) > 0:
            for k in ks:
                paths[k], f = _eta_chunk(fit, diagram, diagram.labels[k], pos, chunk, dt, covs, coefs)
                flag |= f
        for j, (s, sel, m, mmax) in enumerate(chunk):
            dH = np.zeros((mmax, B, diagram.q))
            for k in paths:
                dH[:, :, k] = np.exp(paths[k][j]) * dt
            n_clamped += int(np.sum(dH > 1.0))
            row = _row_fast(dH, diagram, a, m, on_coarse)  # (n_sel, B, S)
            H = np.concatenate([np.zeros((1, B, diagram.q)), np.cumsum(dH, axis=0)], axis=0)[m]
            for k in wanted:
                col = diagram.states.index(diagram.transitions[k][1])
                for q, v in (("cumhazard", H[:, :, k]), ("transprob", row[:, :, col])):
                    res[(q, k)][0][sel] = v[:, 0]
                    if B > 1:
                        lo, hi = _percentiles(v[:, 1:], axis=1, level=level)
                        res[(q, k)][1][sel], res[(q, k)][2][sel] = lo, hi
    parts = []
    for (q, k), (e, lo, hi) in res.items():
        parts.append(pd.DataFrame({"quantity": q, "transition": diagram.labels[k], "t": t, "t_entry_1": te,
                                   "estimate": e, "lo": lo, "hi": hi, "extrapolated": flag}))
    out = pd.concat(parts, ignore_index=True)
    out.attrs["clamped_steps"] = n_clamped
    return out


def cumulative_hazard(fit: FittedPam, transition, grid, profile=None, diagram=None, dt: float = DT,
                      n_draws: int = 200, seed: int = 0, level: float = 0.95, draws=None) -> pd.DataFrame:
    """Cumulative hazard by left Riemann sums with simulation bands.

    See :func:`state_summary` for the integration start and bands. Returns
    ``t``, ``t_entry_1``, ``estimate``, ``lo``, ``hi``, ``extrapolated``.
    """
    label = _label(transition)
    out = state_summary(fit, int(label.split("->")[0]), grid, profile, diagram, dt, n_draws, seed, level,
                        draws, transitions=[label])
    return out[out["quantity"] == "cumhazard"].drop(columns=["quantity", "transition"]).reset_index(drop=True)


@dataclass
class TransProbResult:
    """Transition matrices ``P(s, t)`` for each grid time."""

    s: float
    t: np.ndarray
    P: np.ndarray  # (n_t, S, S)
    states: tuple
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    profile: dict = field(default_factory=dict)
    extrapolated: bool = False

    def element(self, a, b):
        i, j = self.states.index(a), self.states.index(b)
        out = {"estimate": self.P[:, i, j]}
        if self.lo is not None:
            out["lo"], out["hi"] = self.lo[:, i, j], self.hi[:, i, j]
        return out


def product_integral(dH, diagram: StateDiagram, record_steps, first_transition_only_from=None):
    """Ordered product of ``I + dP`` over steps.

    Parameters
    ----------
    dH : ndarray, shape (m, B, q)
        Cumulative-hazard increments per step, batch member and transition.
    record_steps : array of int
        Step counts at which to record the product (0 gives the identity).
    first_transition_only_from : int, optional
        Make every state other than this one absorbing.

    Returns
    -------
    ndarray, shape (len(record_steps), B, S, S)
    """
    states = diagram.states
    S = len(states)
    m, B, q = dH.shape
    idx = {s: i for i, s in enumerate(states)}
    src = np.array([idx[a] for a, _ in diagram.transitions])
    dst = np.array([idx[b] for _, b in diagram.transitions])
    if first_transition_only_from is not None:
        use = src == idx[first_transition_only_from]
        dH = dH * use[None, None, :]
    if np.any(dH > 1.0):
        raise StepTooCoarse("a transition increment exceeds 1; reduce dt")
    record_steps = np.asarray(record_steps, dtype=np.int64)
    out = np.empty((len(record_steps), B, S, S))
    P = np.broadcast_to(np.eye(S), (B, S, S)).copy()
    order = np.argsort(record_steps, kind="stable")
    r = 0
    for i in range(m + 1):
        while r < len(order) and record_steps[order[r]] == i:
            out[order[r]] = P
            r += 1
        if r >= len(order) or i == m:
            break
        F = np.zeros((B, S, S))
        F[:, src, dst] = dH[i]
        tot = F.sum(axis=2)
        over = tot > 1.0
        if over.any():
            F[over] /= tot[over][:, None]
            tot = np.minimum(tot, 1.0)
        F[:, np.arange(S), np.arange(S)] = 1.0 - tot
        P = P @ F
    if r < len(order):
        raise GridMismatch("record step beyond the hazard increments")
    return out


def _row_fast(dH, diagram, a, record_steps, on_coarse="raise"):
    """Row ``a`` of the product integral when all targets of ``a`` are absorbing.

    ``on_coarse="clamp"`` caps increments above 1 instead of raising.
    """
    states = diagram.states
    idx = {s: i for i, s in enumerate(states)}
    ks = [k for k, (f, _) in enumerate(diagram.transitions) if f == a]
    d = dH[:, :, ks]  # (m, B, nk)
    if np.any(d > 1):
        if on_coarse != "clamp":
            raise StepTooCoarse("a transition increment exceeds 1; reduce dt")
        d = np.minimum(d, 1.0)
    tot = d.sum(axis=2)
    over = tot > 1.0
    if over.any():
        d = np.where(over[:, :, None], d / np.maximum(tot, 1.0)[:, :, None], d)
        tot = np.minimum(tot, 1.0)
    stay = np.vstack([np.ones((1, d.shape[1])), np.cumprod(1.0 - tot, axis=0)])  # (m+1, B)
    inc = stay[:-1, :, None] * d
    cum = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)], axis=0)
    rec = np.asarray(record_steps, dtype=np.int64)
    row = np.zeros((len(rec), d.shape[1], len(states)))
    row[:, :, idx[a]] = stay[rec]
    for j, k in enumerate(ks):
        row[:, :, idx[diagram.transitions[k][1]]] = cum[rec, :, j]
    return row


def transition_matrix(fit: FittedPam, s: float, t_grid, profile=None, diagram=None, dt: float = DT,
                      n_draws: int = 0, seed: int = 0, level: float = 0.95,
                      first_transition_only: int | None = None, draws=None) -> TransProbResult:
    """Transition probability matrices ``P(s, t)`` by the discrete product integral.

    Parameters
    ----------
    s : float
        Start time; ``t_grid`` must lie on ``s + multiples of dt``.
    profile : dict
        Covariate values, plus ``t_entry_{d}`` entries fixing the state-entry
        history used by hazards of later states (defaults to ``s``).
    n_draws : int
        Posterior draws for percentile bands (0 for none).
    first_transition_only : int, optional
        Treat every state except this one as absorbing, giving the
        probability of each first transition out of it.
    """
    diagram = _diagram(fit, diagram)
    profile = dict(profile or {})
    covs = {c: v for c, v in profile.items() if not c.startswith("t_entry_")}
    entry_times = {int(c.split("_")[-1]): float(v) for c, v in profile.items() if c.startswith("t_entry_")}
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    m = _steps(s, t_grid, dt)
    mmax = int(m.max()) if len(m) else 0
    if draws is None and n_draws:
        draws = posterior_draws(fit, n_draws, seed)
    coefs = fit.beta[None, :] if draws is None else np.vstack([fit.beta[None, :], draws])
    B = coefs.shape[0]
    dH = np.zeros((mmax, B, diagram.q))
    flag = False
    if mmax > 0:
        for k, label in enumerate(diagram.labels):
            a = int(label.split("->")[0])
            if first_transition_only is not None and a != first_transition_only:
                continue
            entry = _entry_for(diagram, label, s, entry_times)
            eta, f = _eta_paths(fit, diagram, label, s, mmax, dt, covs, entry, coefs)
            flag |= f
            dH[:, :, k] = np.exp(eta) * dt
    P = product_integral(dH, diagram, m, first_transition_only)
    est = P[:, 0]
    lo = hi = None
    if B > 1:
        lo, hi = _percentiles(P[:, 1:], axis=1, level=level)
    return TransProbResult(s, t_grid, est, diagram.states, lo, hi, profile, flag)


def transprob_ci(fit: FittedPam, s: float, t_grid, profile=None, diagram=None, n_draws: int = 200,
                 seed: int = 0, dt: float = DT, level: float = 0.95, **kw) -> TransProbResult:
    """Transition probabilities with posterior-simulation percentile bands."""
    return transition_matrix(fit, s, t_grid, profile, diagram, dt, n_draws, seed, level, **kw)


def first_transition_probability(fit: FittedPam, transition, grid, profile=None, diagram=None, dt=DT,
                                 n_draws=200, seed=0, level=0.95, draws=None) -> pd.DataFrame:
    """Probability of having made ``transition`` by ``t`` given entry into its from-state.

    Equals the product-integral element with all other states absorbing;
    see :func:`state_summary`.
    """
    label = _label(transition)
    out = state_summary(fit, int(label.split("->")[0]), grid, profile, diagram, dt, n_draws, seed, level,
                        draws, transitions=[label])
    return out[out["quantity"] == "transprob"].drop(columns=["quantity", "transition"]).reset_index(drop=True)
