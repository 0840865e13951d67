"""Multi-state event histories: state diagrams, episodes and validated datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    BrokenHistory,
    EmptyDataset,
    IllegalTransition,
    MissingColumn,
    NonPositiveDuration,
    ParseError,
    SchemaMismatch,
    UnknownState,
    ValidationError,
)

CENSORED = -1
CENS_TOKEN = "cens"
BASE_COLUMNS = ("subject_id", "from_state", "to_state", "t_entry", "t_exit")
# exit of one episode and entry of the next must agree to this tolerance
CHAIN_TOL = 1e-9


def transition_label(from_state, to_state) -> str:
    return f"{int(from_state)}->{int(to_state)}"


@dataclass(frozen=True)
class StateDiagram:
    """Allowed transitions between states.

    States are integers. ``progression_chain`` lists the progressive states
    ``0..D`` in order; ``terminal_risks`` are absorbing competing states
    that can be entered from any progressive state.
    """

    transitions: tuple
    progression_chain: tuple
    terminal_risks: tuple = ()

    def __post_init__(self):
        trans = tuple((int(a), int(b)) for a, b in self.transitions)
        chain = tuple(int(s) for s in self.progression_chain)
        risks = tuple(int(s) for s in self.terminal_risks)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "progression_chain", chain)
        object.__setattr__(self, "terminal_risks", risks)
        if not trans:
            raise ValueError("diagram needs at least one transition")
        if len(set(trans)) != len(trans):
            raise ValueError("duplicate transitions")
        if not chain or chain[0] != 0:
            raise ValueError("progression chain must start at state 0")
        states = set(chain) | set(risks)
        if len(states) != len(chain) + len(risks):
            raise ValueError("progression chain and terminal risks overlap")
        for a, b in trans:
            if a not in states or b not in states:
                raise ValueError(f"transition {a}->{b} uses an undeclared state")
            if a in risks:
                raise ValueError(f"terminal risk state {a} cannot have outgoing transitions")
            if a == b:
                raise ValueError("self transitions are not allowed")
            if b in chain and chain.index(b) <= chain.index(a):
                raise ValueError(f"transition {a}->{b} goes backwards along the chain")

    # construction helpers
    @classmethod
    def illness_death(cls) -> "StateDiagram":
        """Onset 0->1, progression 1->2 and competing risk 3 from states 0 and 1."""
        return cls(((0, 1), (0, 3), (1, 2), (1, 3)), (0, 1, 2), (3,))

    @classmethod
    def two_state(cls) -> "StateDiagram":
        return cls(((0, 1),), (0, 1), ())

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateDiagram":
        return cls(
            tuple(tuple(t) for t in d["transitions"]),
            tuple(d["progression_chain"]),
            tuple(d.get("terminal_risks", ())),
        )

    def to_dict(self) -> dict:
        return {
            "transitions": [list(t) for t in self.transitions],
            "progression_chain": list(self.progression_chain),
            "terminal_risks": list(self.terminal_risks),
        }

    # derived structure
    @property
    def states(self) -> tuple:
        return tuple(sorted(set(self.progression_chain) | set(self.terminal_risks)))

    @property
    def absorbing(self) -> frozenset:
        sources = {a for a, _ in self.transitions}
        return frozenset(s for s in self.states if s not in sources)

    @property
    def D(self) -> int:
        return len(self.progression_chain) - 1

    @property
    def q(self) -> int:
        return len(self.transitions)

    @property
    def labels(self) -> tuple:
        return tuple(transition_label(a, b) for a, b in self.transitions)

    def index(self, from_state, to_state) -> int:
        """1-based transition index k."""
        try:
            return self.transitions.index((int(from_state), int(to_state))) + 1
        except ValueError:
            raise IllegalTransition(f"transition {from_state}->{to_state} not in diagram") from None

    def outgoing(self, state) -> tuple:
        return tuple(t for t in self.transitions if t[0] == int(state))

    def chain_position(self, state) -> int:
        """Position along the progression chain, or ``-1`` for terminal risks."""
        s = int(state)
        if s in self.progression_chain:
            return self.progression_chain.index(s)
        if s in self.terminal_risks:
            return -1
        raise UnknownState(f"unknown state {state}")

    def is_progression(self, from_state, to_state) -> bool:
        return int(to_state) in self.progression_chain

    def transition_sets(self, d: int) -> tuple:
        """Return (S_dD, S_dR) for chain position ``d``.

        ``S_dD`` holds progression transitions out of chain positions >= d and
        ``S_dR`` maps each terminal risk to transitions into it from those states.
        """
        s_dd, s_dr = [], {r: [] for r in self.terminal_risks}
        for a, b in self.transitions:
            pa = self.chain_position(a)
            if pa < d:
                continue
            if b in self.progression_chain:
                s_dd.append((a, b))
            else:
                s_dr[b].append((a, b))
        return s_dd, s_dr


@dataclass(frozen=True)
class Covariate:
    kind: str  # "numeric" | "categorical"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown covariate kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))


class CovariateSchema(dict):
    """Mapping ``name -> Covariate``."""

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "CovariateSchema":
        out = cls()
        for name, v in (d or {}).items():
            if isinstance(v, Covariate):
                out[name] = v
            elif v == "numeric":
                out[name] = Covariate("numeric")
            elif isinstance(v, Mapping) and "categorical" in v:
                out[name] = Covariate("categorical", tuple(v["categorical"]))
            elif isinstance(v, (list, tuple)):
                out[name] = Covariate("categorical", tuple(v))
            else:
                raise ValueError(f"bad schema entry for {name!r}: {v!r}")
        return out

    def to_dict(self) -> dict:
        return {
            n: ("numeric" if c.kind == "numeric" else {"categorical": list(c.levels)})
            for n, c in self.items()
        }

    @classmethod
    def numeric(cls, names: Iterable[str]) -> "CovariateSchema":
        return cls({n: Covariate("numeric") for n in names})


@dataclass(frozen=True)
class TransitionRecord:
    subject_id: object
    from_state: int
    to_state: object  # state id or CENSORED
    t_entry: float
    t_exit: float
    covariates: Mapping = field(default_factory=dict)

    @property
    def censored(self) -> bool:
        return self.to_state in (CENSORED, CENS_TOKEN, None)


@dataclass
class Dataset:
    """Validated episodes, one row per risk-set episode.

    ``frame`` has the base columns plus one column per covariate;
    ``to_state`` uses ``CENSORED`` (-1) for censoring.
    """

    frame: pd.DataFrame
    diagram: StateDiagram
    schema: CovariateSchema
    diagnostics: list = field(default_factory=list)

    @property
    def records(self) -> list:
        cov = list(self.schema)
        out = []
        for row in self.frame.itertuples(index=False):
            r = row._asdict()
            out.append(
                TransitionRecord(
                    r["subject_id"], int(r["from_state"]), int(r["to_state"]),
                    float(r["t_entry"]), float(r["t_exit"]), {c: r[c] for c in cov},
                )
            )
        return out

    def __len__(self):
        return len(self.frame)

    @property
    def n_subjects(self) -> int:
        return int(self.frame["subject_id"].nunique())

    def covariate_names(self) -> list:
        return list(self.schema)


def _records_to_frame(records, schema) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records.copy()
    else:
        rows = []
        for r in records:
            d = {
                "subject_id": r.subject_id,
                "from_state": r.from_state,
                "to_state": CENSORED if r.censored else r.to_state,
                "t_entry": r.t_entry,
                "t_exit": r.t_exit,
            }
            d.update(dict(r.covariates))
            rows.append(d)
        df = pd.DataFrame(rows, columns=list(BASE_COLUMNS) + list(schema))
    for c in BASE_COLUMNS:
        if c not in df.columns:
            raise MissingColumn(f"missing column {c!r}")
    to = df["to_state"]
    if to.dtype == object:
        to = to.replace({CENS_TOKEN: CENSORED})
    df["to_state"] = pd.to_numeric(to).astype(np.int64)
    df["from_state"] = pd.to_numeric(df["from_state"]).astype(np.int64)
    df["t_entry"] = df["t_entry"].astype(np.float64)
    df["t_exit"] = df["t_exit"].astype(np.float64)
    return df.reset_index(drop=True)


def _diag(idx, subject, kind, msg):
    return {"index": int(idx), "subject_id": subject, "error": kind, "message": msg}


def validate_dataset(records, diagram: StateDiagram, schema=None, on_error: str = "raise") -> Dataset:
    """Validate episodes against a diagram and covariate schema.

    Parameters
    ----------
    records : sequence of TransitionRecord or DataFrame
        Episodes in any order.
    diagram : StateDiagram
    schema : CovariateSchema or mapping, optional
    on_error : {"raise", "drop"}
        ``"raise"`` raises the error class of the first reject with all
        diagnostics attached; ``"drop"`` removes every subject with a reject
        and keeps the diagnostics on the returned dataset.

    Returns
    -------
    Dataset
    """
    schema = CovariateSchema.from_dict(schema) if not isinstance(schema, CovariateSchema) else schema
    if isinstance(records, pd.DataFrame):
        if len(records) == 0:
            raise EmptyDataset("no records")
    elif len(records) == 0:
        raise EmptyDataset("no records")
    df = _records_to_frame(records, schema)
    df = df.sort_values(["subject_id", "t_entry"], kind="mergesort").reset_index(drop=True)

    diags = []
    first_kind = None
    kinds = {
        "NonPositiveDuration": NonPositiveDuration,
        "IllegalTransition": IllegalTransition,
        "SchemaMismatch": SchemaMismatch,
        "BrokenHistory": BrokenHistory,
    }
    bad = np.zeros(len(df), dtype=bool)

    def flag(mask, kind, msg):
        nonlocal first_kind
        idx = np.flatnonzero(mask)
        for i in idx:
            diags.append(_diag(i, df.at[i, "subject_id"], kind, msg))
        if len(idx) and first_kind is None:
            first_kind = kind
        bad[idx] = True

    te, tx = df["t_entry"].to_numpy(), df["t_exit"].to_numpy()
    flag(~np.isfinite(te) | ~np.isfinite(tx) | (te < 0), "NonPositiveDuration", "non-finite or negative time")
    flag(np.isfinite(te) & np.isfinite(tx) & (tx <= te), "NonPositiveDuration", "t_exit <= t_entry")

    fs, ts = df["from_state"].to_numpy(), df["to_state"].to_numpy()
    legal = set(diagram.transitions)
    nonabs = set(diagram.states) - set(diagram.absorbing)
    ok_pair = np.array(
        [(t == CENSORED and f in nonabs) or (f, t) in legal for f, t in zip(fs.tolist(), ts.tolist())],
        dtype=bool,
    )
    flag(~ok_pair, "IllegalTransition", "transition not in diagram")

    for name, cov in schema.items():
        if name not in df.columns:
            raise SchemaMismatch(f"covariate {name!r} missing from records")
        col = df[name]
        if cov.kind == "numeric":
            vals = pd.to_numeric(col, errors="coerce")
            flag(vals.isna().to_numpy(), "SchemaMismatch", f"{name}: not numeric")
            df[name] = vals.astype(np.float64)
        else:
            s = col.astype(str)
            flag(~s.isin(cov.levels).to_numpy(), "SchemaMismatch", f"{name}: level outside schema")
            df[name] = pd.Categorical(s, categories=list(cov.levels))

    # chain consistency per subject (rows already sorted by subject, entry)
    sid = df["subject_id"].to_numpy()
    same = np.zeros(len(df), dtype=bool)
    same[1:] = sid[1:] == sid[:-1]
    first = ~same
    flag(first & (fs != diagram.progression_chain[0]), "BrokenHistory", "history does not start in state 0")
    prev_exit = np.r_[np.nan, tx[:-1]]
    prev_to = np.r_[CENSORED, ts[:-1]]
    gap = same & ((np.abs(te - prev_exit) > CHAIN_TOL) | (fs != prev_to) | (prev_to == CENSORED))
    flag(gap, "BrokenHistory", "gap, overlap or state mismatch with previous episode")

    if diags:
        if on_error == "raise":
            diags.sort(key=lambda d: d["index"])
            raise kinds[first_kind](f"{len(diags)} record(s) rejected; first: {diags[0]['message']}", diags)
        bad_subjects = set(sid[bad].tolist())
        keep = ~np.isin(sid, list(bad_subjects))
        df = df[keep].reset_index(drop=True)
        if len(df) == 0:
            raise EmptyDataset("all records rejected")
    return Dataset(df, diagram, schema, diags)


# ---------------------------------------------------------------- CSV I/O

def write_transitions_csv(dataset: Dataset, path) -> None:
    df = dataset.frame.copy()
    df["to_state"] = df["to_state"].map(lambda v: CENS_TOKEN if v == CENSORED else str(int(v)))
    cols = list(BASE_COLUMNS) + list(dataset.schema)
    for c in dataset.schema:
        if dataset.schema[c].kind == "categorical":
            df[c] = df[c].astype(str)
    # shortest round-trip float repr
    df[cols].to_csv(path, index=False, float_format=None, lineterminator="\n")


def read_transitions_csv(path, schema=None, diagram: StateDiagram | None = None, on_error="raise") -> Dataset:
    """Read a transitions CSV; column types follow ``schema``.

    Covariate columns not named in the schema are ignored. Without a diagram
    the illness-death diagram is assumed.
    """
    schema = CovariateSchema.from_dict(schema) if not isinstance(schema, CovariateSchema) else schema
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} is empty") from None
    except pd.errors.ParserError as exc:
        raise ParseError(str(exc)) from None
    for c in BASE_COLUMNS:
        if c not in raw.columns:
            raise MissingColumn(f"missing column {c!r}")
    for c in schema:
        if c not in raw.columns:
            raise MissingColumn(f"missing covariate column {c!r}")
    df = pd.DataFrame()
    sid = raw["subject_id"]
    as_int = pd.to_numeric(sid, errors="coerce")
    if as_int.notna().all() and (as_int == as_int.round()).all() and sid.str.fullmatch(r"-?\d+").all():
        df["subject_id"] = as_int.astype(np.int64)
    else:
        df["subject_id"] = sid
    for c in ("from_state", "t_entry", "t_exit"):
        v = pd.to_numeric(raw[c], errors="coerce")
        if v.isna().any():
            i = int(np.flatnonzero(v.isna().to_numpy())[0])
            raise ParseError(f"column {c!r}: cannot parse {raw[c].iloc[i]!r}", line=i + 2)
        df[c] = v
    to = raw["to_state"].replace({CENS_TOKEN: str(CENSORED)})
    v = pd.to_numeric(to, errors="coerce")
    if v.isna().any():
        i = int(np.flatnonzero(v.isna().to_numpy())[0])
        raise ParseError(f"column 'to_state': cannot parse {raw['to_state'].iloc[i]!r}", line=i + 2)
    df["to_state"] = v.astype(np.int64)
    df["from_state"] = df["from_state"].astype(np.int64)
    for c in schema:
        if schema[c].kind == "numeric":
            v = pd.to_numeric(raw[c], errors="coerce")
            if v.isna().any():
                i = int(np.flatnonzero(v.isna().to_numpy())[0])
                raise ParseError(f"column {c!r}: cannot parse {raw[c].iloc[i]!r}", line=i + 2)
            df[c] = v
        else:
            df[c] = raw[c]
    df = df[list(BASE_COLUMNS) + list(schema)]
    return validate_dataset(df, diagram or StateDiagram.illness_death(), schema, on_error=on_error)


def load_schema(path) -> CovariateSchema:
    """Schema JSON, either ``{name: spec}`` or ``{"covariates": {...}, "diagram": {...}}``."""
    with open(path) as fh:
        d = json.load(fh)
    return CovariateSchema.from_dict(d.get("covariates", d) if isinstance(d, dict) else d)


def load_diagram(path) -> StateDiagram | None:
    with open(path) as fh:
        d = json.load(fh)
    if isinstance(d, dict) and "diagram" in d:
        return StateDiagram.from_dict(d["diagram"])
    return None


def subject_paths(dataset: Dataset) -> dict:
    """Reconstruct each subject's visited-state path."""
    out = {}
    for sid, g in dataset.frame.groupby("subject_id", sort=True):
        path = [int(g["from_state"].iloc[0])]
        for t in g["to_state"].tolist():
            if t != CENSORED:
                path.append(int(t))
        out[sid] = path
    return out
