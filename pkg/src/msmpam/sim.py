"""Simulation of multi-state and interval-censored event histories."""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateSchedule, UnknownTransition
from .events import CENSORED, CovariateSchema, Dataset, StateDiagram, validate_dataset

BLOCK_STEPS = 500
STEP = 1e-3  # inversion step


# ------------------------------------------------------------ illness-death hazards

def f01_ssts(t):
    return 0.10 * t**2 / (0.7 + 0.04 * np.maximum(0.0, t - 3.0) ** 3)


def f03_ssts(t):
    return 0.15 * t**2 / (0.9 + 0.01 * np.maximum(0.0, t - 1.0) ** 3)


def f12_ssts(t):
    return 0.48 * np.exp(-0.10 * t)


def f13_ssts(t):
    return 0.16 * np.exp(-0.30 * t)


def f12_mts(t1):
    return 0.32 * np.exp(-0.15 * t1)


def f13_mts(t1):
    return 0.14 * np.exp(-0.25 * t1)


def f_entry12(te):
    return 2.50 * np.exp(-0.60 * te)


def f_entry13(te):
    return 0.14 * np.exp(-0.25 * te)


def dgamma(t, shape, scale):
    return stats.gamma.pdf(t, a=shape, scale=scale)


# ------------------------------------------------------------ expressions

_FUNCS = {
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "maximum": np.maximum, "minimum": np.minimum, "where": np.where,
    "dgamma": dgamma, "pmax0": lambda v: np.maximum(v, 0.0),
}
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Compare,
    ast.Gt, ast.GtE, ast.Lt, ast.LtE, ast.keyword,
)


def compile_expression(expr: str, variables) -> Callable:
    """Compile an arithmetic log-hazard expression over ``variables``.

    Only arithmetic, comparisons and the functions in ``_FUNCS`` are allowed.
    """
    tree = ast.parse(expr, mode="eval")
    names = set(_FUNCS) | set(variables)
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ValueError(f"disallowed syntax in expression {expr!r}: {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ValueError(f"unknown name {node.id!r} in expression {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ValueError(f"disallowed call in expression {expr!r}")
    code = compile(tree, "<loghazard>", "eval")

    def f(t, t1, te, cov):
        env = {"t": t, "t1": t1, "t_entry_1": te, **_FUNCS}
        env.update(cov)
        return eval(code, {"__builtins__": {}}, env) + np.zeros(np.shape(t))

    return f


# ------------------------------------------------------------ DgpSpec


@dataclass
class DgpSpec:
    """Data-generating process.

    ``loghazards`` maps transition labels to vectorized callables
    ``f(t, t1, t_entry_1, covariates)``; ``t1`` and ``t_entry_1`` are zero
    for transitions out of state 0.
    """

    name: str
    diagram: StateDiagram
    loghazards: dict
    covariates: dict = field(default_factory=dict)  # name -> ("bernoulli", p) | ("normal", mu, sd)
    censoring: tuple | None = ("weibull", 1.5, 10.0)
    horizon: float = 10.0
    rounding: int | None = 2
    effects: dict = field(default_factory=dict)  # (term, transition) -> true value
    mechanism: dict | None = None  # default IC mechanism
    source: dict = field(default_factory=dict)  # JSON description

    def loghazard(self, label, t, t1=0.0, te=0.0, cov=None):
        if label not in self.loghazards:
            raise UnknownTransition(f"transition {label!r} not in DGP {self.name!r}")
        t = np.asarray(t, dtype=float)
        cov = {c: np.asarray(v, dtype=float) for c, v in (cov or {}).items()}
        for c in self.covariates:
            cov.setdefault(c, np.zeros(()))
        return self.loghazards[label](t, np.asarray(t1, dtype=float), np.asarray(te, dtype=float), cov)

    def to_dict(self) -> dict:
        return dict(self.source)


def _lin(effects, label, cov):
    out = 0.0
    for (c, lab), b in effects.items():
        if lab == label and b != 0.0:
            out = out + b * cov[c]
    return out


def _make_tableA1(kind: str, intercepts, effects, covariates) -> dict:
    b01, b03, b12, b13 = intercepts
    E = effects

    if kind == "ssts":
        return {
            "0->1": lambda t, t1, te, c: b01 + f01_ssts(t) + _lin(E, "0->1", c),
            "0->3": lambda t, t1, te, c: b03 + f03_ssts(t) + _lin(E, "0->3", c),
            "1->2": lambda t, t1, te, c: b12 + f12_ssts(t) + f_entry12(te) + _lin(E, "1->2", c),
            "1->3": lambda t, t1, te, c: b13 + f13_ssts(t) + f_entry13(te) + _lin(E, "1->3", c),
        }
    return {
        "0->1": lambda t, t1, te, c: b01 + f01_ssts(t) + _lin(E, "0->1", c),
        "0->3": lambda t, t1, te, c: b03 + f03_ssts(t) + _lin(E, "0->3", c),
        "1->2": lambda t, t1, te, c: b12 + f01_ssts(t) + f12_mts(t1) + f_entry12(te) + _lin(E, "1->2", c),
        "1->3": lambda t, t1, te, c: b13 + f03_ssts(t) + f13_mts(t1) + f_entry13(te) + _lin(E, "1->3", c),
    }


TABLE_A1_INTERCEPTS = (-3.9, -4.0, -3.4, -3.4)
TABLE_A1_X1 = {"0->1": 0.2, "0->3": 0.1, "1->2": 0.2, "1->3": 0.1}
IEB_SIZES = {"small": 0.2, "medium": 0.4, "large": 0.6}
IEB_DIST = {"b": ("bernoulli", 0.5), "n": ("normal", 0.0, 1.0)}
IC_BETA_X1 = -1.3


def builtin_dgp(name: str, **opts) -> DgpSpec:
    """Named DGPs.

    ``ssts_tableA1`` / ``mts_tableA1``
        Illness-death hazards with Bernoulli(0.5) ``x1`` (``x1=False`` drops it).
    ``ieb_{small,medium,large}_{bb,bn,nb,nn}``
        Two risk factors for onset and progression; letters give the laws of
        ``x1`` and ``x2`` (Bernoulli or standard normal). ``base="mts"``
        switches the baseline.
    ``ic_pexp``, ``ic_weibull``, ``ic_icenreg``
        Single-event DGPs for the interval-censoring study.
    """
    source = {"builtin": name, **opts}
    diagram = StateDiagram.illness_death()
    if name in ("ssts_tableA1", "mts_tableA1"):
        with_x1 = opts.get("x1", True)
        covs = {"x1": ("bernoulli", 0.5)} if with_x1 else {}
        eff = {("x1", k): v for k, v in TABLE_A1_X1.items()} if with_x1 else {}
        kind = name.split("_")[0]
        lh = _make_tableA1(kind, TABLE_A1_INTERCEPTS, eff, covs)
        return DgpSpec(name, diagram, lh, covs, effects=eff, source=source)
    if name.startswith("ieb_"):
        _, size, dist = name.split("_")
        if size not in IEB_SIZES or len(dist) != 2 or any(d not in IEB_DIST for d in dist):
            raise UnknownTransition(f"unknown DGP {name!r}")
        b = IEB_SIZES[size]
        covs = {"x1": IEB_DIST[dist[0]], "x2": IEB_DIST[dist[1]]}
        eff = {}
        for c in ("x1", "x2"):
            for lab in diagram.labels:
                eff[(c, lab)] = b if lab in ("0->1", "1->2") else 0.0
        icpt = list(TABLE_A1_INTERCEPTS)
        if size == "large":
            icpt[2] = -4.4
        lh = _make_tableA1(opts.get("base", "ssts"), icpt, eff, covs)
        return DgpSpec(name, diagram, lh, covs, effects=eff, source=source)
    two = StateDiagram.two_state()
    if name in ("ic_pexp", "ic_weibull"):
        beta = float(opts.get("beta_x1", IC_BETA_X1))
        covs = {"x1": ("bernoulli", 0.5)} if opts.get("x1", True) else {}
        eff = {("x1", "0->1"): beta} if covs else {}
        if name == "ic_pexp":
            base = lambda t: -3.5 + 6.0 * dgamma(t, 8.0, 0.5)
        else:
            base = lambda t: math.log(1.5) + 0.5 * np.log(t) - 3.5
        lh = {"0->1": lambda t, t1, te, c: base(t) + _lin(eff, "0->1", c)}
        mech = {"kind": opts.get("mechanism", "beta")}
        return DgpSpec(name, two, lh, covs, censoring=None, effects=eff, mechanism=mech, source=source)
    if name == "ic_icenreg":
        shape, scale = 1.5, 2.0
        lh = {"0->1": lambda t, t1, te, c: math.log(shape / scale) + (shape - 1) * np.log(t / scale)}
        return DgpSpec(name, two, lh, {}, censoring=None, mechanism={"kind": "uniform_renewal"}, source=source)
    raise UnknownTransition(f"unknown DGP {name!r}")


def dgp_from_dict(d) -> DgpSpec:
    """DgpSpec from JSON: ``{"builtin": name, ...}`` or free-form expressions.

    Free form::

        {"name": "...", "diagram": {...}, "loghazards": {"0->1": "-3 + 0.2*x1"},
         "covariates": {"x1": {"bernoulli": 0.5}}, "censoring": {"weibull": [1.5, 10]},
         "horizon": 10, "rounding": 2}
    """
    if isinstance(d, str):
        return builtin_dgp(d)
    d = dict(d)
    if "builtin" in d:
        name = d.pop("builtin")
        return builtin_dgp(name, **d)
    diagram = StateDiagram.from_dict(d["diagram"])
    covs = {}
    for c, law in d.get("covariates", {}).items():
        if "bernoulli" in law:
            covs[c] = ("bernoulli", float(law["bernoulli"]))
        elif "normal" in law:
            mu, sd = law["normal"] if isinstance(law["normal"], (list, tuple)) else (0.0, 1.0)
            covs[c] = ("normal", float(mu), float(sd))
        else:
            raise ValueError(f"unknown covariate law {law!r}")
    lh = {}
    for lab, expr in d["loghazards"].items():
        lh[lab] = compile_expression(expr, ["t", "t1", "t_entry_1", *covs])
    missing = set(diagram.labels) - set(lh)
    if missing:
        raise UnknownTransition(f"no log-hazard for transitions {sorted(missing)}")
    cens = d.get("censoring", {"weibull": [1.5, 10.0]})
    cens = None if cens is None else ("weibull", float(cens["weibull"][0]), float(cens["weibull"][1]))
    eff = {}
    for key, v in d.get("effects", {}).items():
        c, lab = key.split("@")
        eff[(c, lab)] = float(v)
    return DgpSpec(d.get("name", "custom"), diagram, lh, covs, cens, float(d.get("horizon", 10.0)),
                   d.get("rounding", 2), eff, d.get("mechanism"), source=dict(d))


def eval_dgp_loghazard(dgp: DgpSpec, k, t, history=None, covariates=None):
    """Closed-form log-hazard of transition ``k`` (label or 1-based index)."""
    label = dgp.diagram.labels[k - 1] if isinstance(k, (int, np.integer)) else k
    if label not in dgp.diagram.labels:
        raise UnknownTransition(f"transition {k!r} not in diagram")
    history = history or {}
    a = int(label.split("->")[0])
    te = history.get("t_entry_1", 0.0) if dgp.diagram.chain_position(a) >= 1 else 0.0
    t = np.asarray(t, dtype=float)
    t1 = np.maximum(0.0, t - te) if dgp.diagram.chain_position(a) >= 1 else np.zeros_like(t)
    return dgp.loghazard(label, t, t1, te, covariates)


# ------------------------------------------------------------ sampling


def draw_covariates(dgp: DgpSpec, n: int, rng) -> dict:
    out = {}
    for c, law in dgp.covariates.items():
        if law[0] == "bernoulli":
            out[c] = (rng.random(n) < law[1]).astype(float)
        else:
            out[c] = law[1] + law[2] * rng.standard_normal(n)
    return out


def draw_event_time(total_hazard, t_start, horizon, rng, step: float = STEP, chunk: int = 2_000_000):
    """Inversion sampling of the first event after ``t_start``.

    Parameters
    ----------
    total_hazard : callable
        ``total_hazard(u, idx)`` returns hazards at times ``u`` (shape
        ``(len(idx), m)``) for subjects ``idx``; a scalar-time function of one
        argument is also accepted for a single subject.
    t_start, horizon : float or array
    rng : numpy Generator

    Returns
    -------
    times : ndarray
        Event times, ``nan`` where the horizon is reached first.
    step_index_hazard : ndarray
        Hazard of the step containing each event (``nan`` if none).
    """
    scalar = np.ndim(t_start) == 0
    t0 = np.atleast_1d(np.asarray(t_start, dtype=float))
    t_end = np.broadcast_to(np.asarray(horizon, dtype=float), t0.shape).copy()
    n = len(t0)
    try:
        import inspect

        n_args = len(inspect.signature(total_hazard).parameters)
    except (TypeError, ValueError):
        n_args = 2
    fn = total_hazard if n_args >= 2 else (lambda u, idx: total_hazard(u))
    target = -np.log(rng.random(n))
    times = np.full(n, np.nan)
    n_steps = np.maximum(0, np.ceil((t_end - t0) / step - 1e-9).astype(np.int64))
    H_prev = np.zeros(n)
    live = np.flatnonzero(n_steps > 0)
    block = max(1, min(BLOCK_STEPS, chunk // max(len(live), 1)))
    b0 = 0
    while len(live):
        steps = b0 + np.arange(block)
        left = t0[live, None] + step * steps[None, :]
        h = np.asarray(fn(left + 0.5 * step, live), dtype=float)
        h = np.broadcast_to(h, left.shape)
        width = np.clip(t_end[live, None] - left, 0.0, step)
        H = H_prev[live, None] + np.cumsum(h * width, axis=1)
        hit = H >= target[live, None]
        any_hit = hit.any(axis=1)
        r = np.flatnonzero(any_hit)
        jj = np.argmax(hit[r], axis=1)
        Hb = np.where(jj > 0, H[r, np.maximum(jj - 1, 0)], H_prev[live[r]])
        sub = live[r]
        times[sub] = np.minimum(left[r, jj] + (target[sub] - Hb) / h[r, jj], t_end[sub])
        H_prev[live] = H[:, -1]
        b0 += block
        live = live[~any_hit & (n_steps[live] > b0)]
    return times[0] if scalar else times


def simulate(dgp: DgpSpec, n: int, rng, covariates: dict | None = None, id_offset: int = 1):
    """Simulate ``n`` subjects starting in state 0 at time 0.

    Returns
    -------
    Dataset
        Rounded episodes in the event-data format.
    dict
        Diagnostics (dropped zero-length episodes etc.).
    """
    diagram = dgp.diagram
    cov = covariates if covariates is not None else draw_covariates(dgp, n, rng)
    cov = {c: np.asarray(v, dtype=float) for c, v in cov.items()}
    if dgp.censoring is not None:
        _, shape, scale = dgp.censoring
        C = scale * (-np.log(rng.random(n))) ** (1.0 / shape)
        C = np.minimum(C, dgp.horizon)
    else:
        C = np.full(n, float(dgp.horizon))
    state = np.zeros(n, dtype=np.int64)
    t_now = np.zeros(n)
    entry1 = np.zeros(n)
    active = np.ones(n, dtype=bool)
    records = []  # (subject index, from, to, entry, exit)
    for s in diagram.progression_chain:
        outs = diagram.outgoing(s)
        idx = np.flatnonzero(active & (state == s))
        if len(idx) == 0 or not outs:
            continue
        labels = [f"{a}->{b}" for a, b in outs]
        pos = diagram.chain_position(s)
        e_idx = t_now[idx]
        c_idx = {c: v[idx] for c, v in cov.items()}

        def cause_hazards(u, sub):
            te = e_idx[sub][:, None] if pos >= 1 else np.zeros((len(sub), 1))
            t1 = np.maximum(0.0, u - te) if pos >= 1 else np.zeros_like(u)
            cc = {c: v[sub][:, None] for c, v in c_idx.items()}
            return [np.exp(dgp.loghazard(lab, u, t1, te + 0 * u, cc)) for lab in labels]

        def total(u, sub):
            hs = cause_hazards(u, sub)
            out = hs[0]
            for h in hs[1:]:
                out = out + h
            return out

        T = draw_event_time(total, e_idx, C[idx], rng)
        ev = ~np.isnan(T)
        # exact ties with the censoring time count as events
        to = np.full(len(idx), CENSORED)
        exit_ = np.where(ev, T, C[idx])
        if ev.any():
            r = np.flatnonzero(ev)
            u_mid = (np.floor((T[r] - e_idx[r]) / STEP) + 0.5) * STEP + e_idx[r]
            hs = np.stack([h[:, 0] for h in cause_hazards(u_mid[:, None], r)], axis=1)
            p = hs / hs.sum(axis=1, keepdims=True)
            choice = (rng.random(len(r))[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
            choice = np.minimum(choice, len(outs) - 1)
            to[r] = np.array([outs[c][1] for c in choice])
        for i, subj in enumerate(idx):
            records.append((subj, s, int(to[i]), e_idx[i], exit_[i]))
        moved = ev
        state[idx[moved]] = to[moved]
        t_now[idx[moved]] = exit_[moved]
        active[idx[~moved]] = False
        nxt = set(diagram.absorbing)
        active[idx[moved]] = ~np.isin(to[moved], list(nxt))
    rec = pd.DataFrame(records, columns=["_i", "from_state", "to_state", "t_entry", "t_exit"])
    rec = rec.sort_values(["_i", "t_entry"], kind="mergesort").reset_index(drop=True)
    diag = {"n_subjects": n, "zero_length_dropped": 0, "subjects_dropped": 0}
    if dgp.rounding is not None:
        rec["t_entry"] = np.round(rec["t_entry"].to_numpy(), dgp.rounding)
        rec["t_exit"] = np.round(rec["t_exit"].to_numpy(), dgp.rounding)
        zero = (rec["t_exit"] <= rec["t_entry"]).to_numpy()
        if zero.any():
            # drop the zero-length episode and everything after it in the chain
            bad = pd.Series(zero).groupby(rec["_i"]).cummax().to_numpy()
            diag["zero_length_dropped"] = int(bad.sum())
            rec = rec[~bad].reset_index(drop=True)
            diag["subjects_dropped"] = int(n - rec["_i"].nunique())
    rec.insert(0, "subject_id", rec.pop("_i").to_numpy() + id_offset)
    for c, v in cov.items():
        rec[c] = v[rec["subject_id"].to_numpy() - id_offset]
    schema = CovariateSchema.numeric(cov)
    ds = validate_dataset(rec, diagram, schema)
    ds.diagnostics = []
    return ds, diag


def simulate_trajectory(dgp: DgpSpec, covariates: Mapping, rng) -> list:
    """One subject's rounded episodes as TransitionRecords."""
    ds, _ = simulate(dgp, 1, rng, covariates={c: np.atleast_1d(v) for c, v in covariates.items()})
    return ds.records


# ------------------------------------------------------------ interval censoring


@dataclass(frozen=True)
class IcMechanism:
    """Visit-schedule generator.

    ``kind`` is ``beta`` (horizon times sorted Beta(a, b) draws),
    ``uniform_jitter`` (equidistant grid plus Uniform(-j, j) times the
    spacing), ``equidistant`` or ``uniform_renewal`` (Uniform(lo, hi) gaps).
    The first three draw the number of visits from DiscreteUniform(n_min, n_max).
    """

    kind: str
    n_min: int = 1
    n_max: int = 10
    beta_a: float = 2.0
    beta_b: float = 2.0
    jitter: float = 0.4
    gap_lo: float = 0.1
    gap_hi: float = 2.5

    def __post_init__(self):
        if self.kind not in ("beta", "uniform_jitter", "equidistant", "uniform_renewal"):
            raise ValueError(f"unknown IC mechanism {self.kind!r}")

    @classmethod
    def from_dict(cls, d) -> "IcMechanism":
        if isinstance(d, str):
            return cls(d)
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def visits(self, n: int, horizon: float, rng) -> list:
        """Visit schedules, one sorted array per subject."""
        if self.kind == "uniform_renewal":
            out = []
            m = int(math.ceil(horizon / self.gap_lo)) + 1
            gaps = rng.uniform(self.gap_lo, self.gap_hi, size=(n, m))
            cum = np.cumsum(gaps, axis=1)
            for i in range(n):
                out.append(cum[i][cum[i] <= horizon])
            return out
        J = rng.integers(self.n_min, self.n_max + 1, size=n)
        if self.kind == "beta":
            draws = rng.beta(self.beta_a, self.beta_b, size=(n, self.n_max))
            return [np.sort(horizon * draws[i, : J[i]]) for i in range(n)]
        u = rng.uniform(-self.jitter, self.jitter, size=(n, self.n_max)) if self.kind == "uniform_jitter" else None
        out = []
        for i in range(n):
            sp_ = horizon / J[i]
            g = sp_ * np.arange(1, J[i] + 1)
            if u is not None:
                g = np.minimum(g + u[i, : J[i]] * sp_, horizon)
            out.append(g)
        return out


@dataclass
class IcView:
    """Interval-censored view of single-event data.

    ``frame`` columns: subject_id, L, R, status, t_exact, status_exact and
    covariates. Events have ``L < t_exact <= R``; right-censored subjects
    have ``L = R`` = last visit.
    """

    frame: pd.DataFrame
    mechanism: IcMechanism
    diagram: StateDiagram
    covariates: list
    n_degenerate: int = 0

    def dataset(self, point: str) -> Dataset:
        """Event-data view at estimation point ``exact``, ``mid`` or ``end``."""
        f = self.frame
        if point == "exact":
            t = f["t_exact"].to_numpy()
            st = f["status_exact"].to_numpy()
        elif point in ("mid", "end"):
            st = f["status"].to_numpy()
            ev = 0.5 * (f["L"] + f["R"]) if point == "mid" else f["R"]
            t = np.where(st == 1, ev, f["R"])
        else:
            raise ValueError(f"unknown estimation point {point!r}")
        a, b = self.diagram.transitions[0]
        df = pd.DataFrame({
            "subject_id": f["subject_id"].to_numpy(), "from_state": a,
            "to_state": np.where(st == 1, b, CENSORED), "t_entry": 0.0, "t_exit": t,
        })
        for c in self.covariates:
            df[c] = f[c].to_numpy()
        return validate_dataset(df, self.diagram, CovariateSchema.numeric(self.covariates))


def apply_ic(exact: Dataset, mechanism: IcMechanism, rng, horizon: float = 10.0) -> IcView:
    """Observe single-event data through a visit schedule.

    An event at ``T`` maps to ``(L, R]`` with ``R`` the first visit at or
    after ``T`` and ``L`` the previous visit (or 0). Follow-up ends at the
    last visit not after the exact censoring or horizon time; events after
    it and event-free subjects are right-censored there. Subjects without
    any such visit are excluded and counted.
    """
    diagram = exact.diagram
    if len(diagram.transitions) != 1:
        raise ValueError("interval censoring is implemented for single-event data")
    f = exact.frame
    if f["subject_id"].duplicated().any():
        raise ValueError("single-event data must have one episode per subject")
    n = len(f)
    schedules = mechanism.visits(n, horizon, rng)
    T = f["t_exit"].to_numpy()
    ev = (f["to_state"] != CENSORED).to_numpy()
    L = np.empty(n)
    R = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        v = schedules[i]
        limit = horizon if ev[i] else T[i]
        v = v[v <= limit + 1e-12]
        if len(v) == 0:
            keep[i] = False
            continue
        if ev[i] and T[i] <= v[-1]:
            j = int(np.searchsorted(v, T[i], side="left"))
            R[i] = v[j]
            L[i] = v[j - 1] if j > 0 else 0.0
            status[i] = 1
        else:
            L[i] = R[i] = v[-1]
    out = pd.DataFrame({
        "subject_id": f["subject_id"].to_numpy(), "L": L, "R": R, "status": status,
        "t_exact": T, "status_exact": ev.astype(np.int64),
    })
    covs = list(exact.schema)
    for c in covs:
        out[c] = f[c].to_numpy()
    n_bad = int((~keep).sum())
    return IcView(out[keep].reset_index(drop=True), mechanism, diagram, covs, n_bad)


# ------------------------------------------------------------ studies


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Independent counter-based stream for one run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(run_index)])))


@dataclass
class SimulatedStudy:
    dataset: Dataset
    ic_view: IcView | None
    seed: int
    run_index: int
    diagnostics: dict = field(default_factory=dict)


def generate_study(dgp: DgpSpec, n: int, seed: int, run_index: int, mechanism=None) -> SimulatedStudy:
    """Simulate one run. Covariates, event times and visits use separate child streams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ss = np.random.SeedSequence([int(seed), int(run_index)])
    r_cov, r_sim, r_ic = (np.random.Generator(np.random.Philox(s)) for s in ss.spawn(3))
    cov = draw_covariates(dgp, n, r_cov)
    ds, diag = simulate(dgp, n, r_sim, covariates=cov)
    view = None
    if mechanism is not None:
        mech = mechanism if isinstance(mechanism, IcMechanism) else IcMechanism.from_dict(mechanism)
        view = apply_ic(ds, mech, r_ic, dgp.horizon)
        diag["ic_degenerate"] = view.n_degenerate
    return SimulatedStudy(ds, view, int(seed), int(run_index), diag)
