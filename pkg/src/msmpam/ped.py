"""Piecewise exponential data (PED).

Each risk-set episode is split along the cut points into rows
``(a_{j-1}, a_j]`` clipped to the episode, then copied once per outgoing
transition of its from-state with a cause-specific event indicator.
Time scales, state-entry times and helper variables are attached so that
model formulas can stratify smooth terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import CutsDoNotCover, EmptyDataset, MissingColumn, NonMonotoneExplicitCuts, UnknownState
from .events import CENSORED, Dataset, StateDiagram, transition_label

NONE = "none"
PROGRESSION = "progression"


@dataclass(frozen=True)
class CutPoints:
    """Strictly increasing cut points ``a_0 = 0 < a_1 < ... < a_J``."""

    cuts: tuple

    def __post_init__(self):
        c = np.asarray(self.cuts, dtype=float)
        if c.ndim != 1 or len(c) < 2:
            raise NonMonotoneExplicitCuts("need at least two cut points")
        if not np.all(np.diff(c) > 0):
            raise NonMonotoneExplicitCuts("cut points must be strictly increasing")
        if c[0] != 0.0:
            raise NonMonotoneExplicitCuts("first cut point must be 0")
        object.__setattr__(self, "cuts", tuple(float(v) for v in c))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.cuts)

    @property
    def J(self) -> int:
        return len(self.cuts) - 1

    @classmethod
    def grid(cls, stop: float, step: float) -> "CutPoints":
        n = int(round(stop / step))
        return cls(tuple(np.round(np.arange(n + 1) * step, 12)))


def make_cuts(dataset: Dataset, strategy="unique_event_times") -> CutPoints:
    """Choose cut points.

    ``strategy`` is ``"unique_event_times"``, ``("quantiles", m)`` or
    ``("explicit", cuts)``; strings ``"quantiles:m"`` are accepted and a bare
    sequence is read as explicit cuts.
    """
    df = dataset.frame if isinstance(dataset, Dataset) else dataset
    if df is None or len(df) == 0:
        raise EmptyDataset("no records")
    if isinstance(strategy, str) and strategy.startswith("quantiles:"):
        strategy = ("quantiles", int(strategy.split(":")[1]))
    if not isinstance(strategy, str) and not (isinstance(strategy, tuple) and isinstance(strategy[0], str)):
        strategy = ("explicit", strategy)
    max_exit = float(df["t_exit"].max())
    events = np.sort(df.loc[df["to_state"] != CENSORED, "t_exit"].to_numpy(dtype=float))
    if strategy == "unique_event_times":
        c = np.unique(np.r_[0.0, events, max_exit])
    elif strategy[0] == "quantiles":
        m = int(strategy[1])
        if m < 1:
            raise ValueError("quantiles needs m >= 1")
        q = np.quantile(events, np.arange(1, m + 1) / m) if len(events) else np.empty(0)
        c = np.unique(np.r_[0.0, q, max_exit])
        c = c[c >= 0]
    elif strategy[0] == "explicit":
        c = np.asarray(strategy[1], dtype=float)
        cp = CutPoints(tuple(c))
        if cp.cuts[-1] < max_exit:
            raise CutsDoNotCover(f"explicit cuts end at {cp.cuts[-1]} < max exit {max_exit}")
        return cp
    else:
        raise ValueError(f"unknown cut strategy {strategy!r}")
    return CutPoints(tuple(c))


def _tile(entry, exit_, cuts):
    """Vectorized tiling. Returns (episode index, j, tstart, tend) arrays."""
    a = np.asarray(cuts, dtype=float)
    entry = np.asarray(entry, dtype=float)
    exit_ = np.asarray(exit_, dtype=float)
    if np.any(entry < a[0]) or np.any(exit_ > a[-1]):
        raise CutsDoNotCover(f"cut points [{a[0]}, {a[-1]}] do not cover all episodes")
    j0 = np.searchsorted(a, entry, side="right")
    j1 = np.searchsorted(a, exit_, side="left")
    n = j1 - j0 + 1
    ep = np.repeat(np.arange(len(entry)), n)
    offs = np.arange(len(ep)) - np.repeat(np.cumsum(n) - n, n)
    j = np.repeat(j0, n) + offs
    tstart = np.maximum(a[j - 1], entry[ep])
    tend = np.minimum(a[j], exit_[ep])
    return ep, j, tstart, tend


def transform_episode(record, cuts) -> list:
    """Tile the episode ``(t_entry, t_exit]``.

    Returns a list of ``(interval_j, tstart, tend, y_ij, o_ij, d_ij)`` with
    ``d_ij`` equal to 1 only in the last row of an observed transition.
    """
    a = cuts.array if isinstance(cuts, CutPoints) else np.asarray(cuts, dtype=float)
    _, j, ts, te = _tile([record.t_entry], [record.t_exit], a)
    y = te - ts
    status = 0 if record.censored else 1
    out = []
    for i in range(len(j)):
        d = status if i == len(j) - 1 else 0
        out.append((int(j[i]), float(ts[i]), float(te[i]), float(y[i]), float(np.log(y[i])), d))
    return out


@dataclass
class PedDataset:
    frame: pd.DataFrame
    cuts: CutPoints
    diagram: StateDiagram
    covariates: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frame)

    def catalog(self) -> dict:
        out = {}
        for c in self.frame.columns:
            s = self.frame[c]
            if isinstance(s.dtype, pd.CategoricalDtype):
                out[c] = {"kind": "categorical", "levels": [str(v) for v in s.cat.categories]}
            else:
                out[c] = {"kind": "numeric"}
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        self.frame.to_csv(path, index=False, lineterminator="\n")
        meta = {
            "cuts": list(self.cuts.cuts),
            "diagram": self.diagram.to_dict(),
            "covariates": list(self.covariates),
            "catalog": self.catalog(),
            "diagnostics": self.diagnostics,
        }
        with open(sidecar_path(path), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_ped_csv(path) -> PedDataset:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise MissingColumn(f"PED metadata {side} not found")
    with open(side) as fh:
        meta = json.load(fh)
    df = pd.read_csv(path, keep_default_na=False)
    for c, info in meta["catalog"].items():
        if c not in df.columns:
            raise MissingColumn(f"PED column {c!r} missing")
        if info["kind"] == "categorical":
            df[c] = pd.Categorical(df[c].astype(str), categories=info["levels"])
    return PedDataset(
        df, CutPoints(tuple(meta["cuts"])), StateDiagram.from_dict(meta["diagram"]),
        list(meta.get("covariates", [])), meta.get("diagnostics", {}),
    )


def augment_multistate(dataset: Dataset, cuts: CutPoints) -> PedDataset:
    """Tile every episode and stack one copy per outgoing transition.

    Rows are ordered by subject, episode, transition and interval. Raw
    state-entry times are carried in ``_entry{d}`` columns for
    :func:`attach_timescales_and_helpers`.
    """
    diagram = dataset.diagram
    df = dataset.frame
    if len(df) == 0:
        raise EmptyDataset("no records")
    a = cuts.array
    fs = df["from_state"].to_numpy()
    ts = df["to_state"].to_numpy()
    sid = df["subject_id"].to_numpy()
    # episode number within subject
    same = np.r_[False, sid[1:] == sid[:-1]]
    grp_start = np.flatnonzero(~same)
    counts = np.diff(np.r_[grp_start, len(df)])
    episode = np.arange(len(df)) - np.repeat(grp_start, counts)

    # raw entry time into chain position d (first episode with position >= d)
    chain_pos = np.array([diagram.chain_position(s) for s in fs])
    entries = {}
    te_all = df["t_entry"].to_numpy()
    for d in range(1, diagram.D):
        tmp = pd.Series(np.where(chain_pos >= d, te_all, np.inf))
        m = tmp.groupby(sid).transform("min").to_numpy()
        entries[d] = np.where(chain_pos >= d, m, np.nan)

    # copies per outgoing transition
    out_lists = {s: diagram.outgoing(s) for s in diagram.states}
    q = np.array([len(out_lists[s]) for s in fs])
    cp_ep = np.repeat(np.arange(len(df)), q)
    cp_off = np.arange(len(cp_ep)) - np.repeat(np.cumsum(q) - q, q)
    cp_trans = [out_lists[fs[e]][o] for e, o in zip(cp_ep.tolist(), cp_off.tolist())]
    cp_k = np.array([diagram.transitions.index(t) + 1 for t in cp_trans], dtype=np.int64)
    cp_to = np.array([t[1] for t in cp_trans], dtype=np.int64)

    ep, j, tstart, tend = _tile(df["t_entry"].to_numpy()[cp_ep], df["t_exit"].to_numpy()[cp_ep], a)
    last = np.r_[ep[1:] != ep[:-1], True]
    src = cp_ep[ep]
    status = (last & (cp_to[ep] == ts[src])).astype(np.int64)
    y = tend - tstart

    labels = diagram.labels
    out = pd.DataFrame(
        {
            "subject_id": sid[src],
            "episode": episode[src],
            "from_state": fs[src],
            "to_state": ts[src],
            "transition": pd.Categorical.from_codes(cp_k[ep] - 1, categories=list(labels)),
            "k": cp_k[ep],
            "interval": j,
            "tstart": tstart,
            "tend": tend,
            "y": y,
            "offset": np.log(y),
            "status": status,
            "_aj": a[j],
        }
    )
    for d, e in entries.items():
        out[f"_entry{d}"] = e[src]
    covs = list(dataset.schema)
    for c in covs:
        col = df[c]
        if isinstance(col.dtype, pd.CategoricalDtype):
            out[c] = pd.Categorical.from_codes(col.cat.codes.to_numpy()[src], categories=col.cat.categories)
        else:
            out[c] = col.to_numpy()[src]
    diag = {"rejected_records": len(dataset.diagnostics)} if dataset.diagnostics else {}
    return PedDataset(out, cuts, diagram, covs, diag)


def helper_levels(diagram: StateDiagram, d: int, exact: bool) -> list:
    if exact:
        return [NONE] + [
            transition_label(a, b) for a, b in diagram.transitions if diagram.chain_position(a) >= d
        ]
    at = diagram.progression_chain[d]
    return [NONE, PROGRESSION] + [transition_label(at, r) for r in diagram.terminal_risks]


def _helper_values(diagram, d, exact, from_state, to_state):
    pos = np.array([diagram.chain_position(s) for s in np.asarray(from_state).tolist()])
    to_state = np.asarray(to_state)
    at = diagram.progression_chain[d]
    vals = np.empty(len(pos), dtype=object)
    for i, (p, f, t) in enumerate(zip(pos.tolist(), np.asarray(from_state).tolist(), to_state.tolist())):
        if p < d:
            vals[i] = NONE
        elif exact:
            vals[i] = transition_label(f, t)
        elif t in diagram.progression_chain:
            vals[i] = PROGRESSION
        else:
            vals[i] = transition_label(at, t)
    return pd.Categorical(vals, categories=helper_levels(diagram, d, exact))


def attach_timescales_and_helpers(ped: PedDataset, diagram: StateDiagram | None = None) -> PedDataset:
    """Add ``t``, ``t{d}``, ``t_entry_{d}``, ``trans_after_{d}`` and
    ``trans_after_{d}_exact`` columns.

    ``t`` is the end ``a_j`` of the row's interval so the spline part of the
    hazard is constant within each interval.
    """
    diagram = diagram or ped.diagram
    df = ped.frame.copy()
    unknown = set(np.unique(df["from_state"]).tolist()) - set(diagram.states)
    if unknown:
        raise UnknownState(f"unknown from-state(s) {sorted(unknown)}")
    t = df.pop("_aj").to_numpy() if "_aj" in df else ped.cuts.array[df["interval"].to_numpy()]
    df["t"] = t
    # helper values depend only on (from, to) of the copy; map per transition
    kk = df["k"].to_numpy() - 1
    tr = np.array(diagram.transitions)
    f_k, t_k = tr[:, 0], tr[:, 1]
    pos_k = np.array([diagram.chain_position(s) for s in f_k])
    for d in range(1, diagram.D):
        e = df.pop(f"_entry{d}").to_numpy() if f"_entry{d}" in df else np.full(len(df), np.nan)
        active = pos_k[kk] >= d
        df[f"t{d}"] = np.where(active, np.maximum(0.0, t - np.nan_to_num(e)), 0.0)
        df[f"t_entry_{d}"] = np.where(active, np.nan_to_num(e), 0.0)
    for d in range(diagram.D):
        for exact in ((False, True) if d >= 1 else (False,)):
            per_k = _helper_values(diagram, d, exact, f_k, t_k)
            name = f"trans_after_{d}" + ("_exact" if exact else "")
            df[name] = pd.Categorical.from_codes(per_k.codes[kk], categories=per_k.categories)
    return PedDataset(df, ped.cuts, diagram, ped.covariates, ped.diagnostics)


def to_ped(dataset: Dataset, cuts: CutPoints | None = None, strategy="unique_event_times") -> PedDataset:
    """Augment and attach helpers in one step."""
    if cuts is None:
        cuts = make_cuts(dataset, strategy)
    return attach_timescales_and_helpers(augment_multistate(dataset, cuts), dataset.diagram)


def prediction_frame(
    diagram: StateDiagram,
    transition,
    t,
    entry_times: Mapping | None = None,
    covariates: Mapping | None = None,
) -> pd.DataFrame:
    """Newdata rows for one transition at times ``t``.

    ``transition`` is a label like ``"1->2"`` or a (from, to) pair;
    ``entry_times`` maps chain position ``d`` to the entry time into that
    state (scalar or array broadcast against ``t``).
    """
    if isinstance(transition, str):
        a, b = (int(s) for s in transition.split("->"))
    else:
        a, b = int(transition[0]), int(transition[1])
    k = diagram.index(a, b)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = len(t)
    entry_times = dict(entry_times or {})
    df = pd.DataFrame(
        {
            "transition": pd.Categorical([diagram.labels[k - 1]] * n, categories=list(diagram.labels)),
            "k": np.full(n, k),
            "from_state": np.full(n, a),
            "to_state": np.full(n, b),
            "t": t,
        }
    )
    pos = diagram.chain_position(a)
    for d in range(1, diagram.D):
        if pos >= d:
            if d not in entry_times:
                raise MissingColumn(f"entry time into chain position {d} required for {a}->{b}")
            e = np.broadcast_to(np.asarray(entry_times[d], dtype=float), (n,))
            df[f"t{d}"] = np.maximum(0.0, t - e)
            df[f"t_entry_{d}"] = e
        else:
            df[f"t{d}"] = 0.0
            df[f"t_entry_{d}"] = 0.0
    for d in range(diagram.D):
        for exact in ((False, True) if d >= 1 else (False,)):
            v = _helper_values(diagram, d, exact, [a], [b])
            name = f"trans_after_{d}" + ("_exact" if exact else "")
            df[name] = pd.Categorical.from_codes(np.repeat(v.codes, n), categories=v.categories)
    for c, v in (covariates or {}).items():
        df[c] = v
    return df
