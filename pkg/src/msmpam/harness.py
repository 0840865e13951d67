"""Replicated simulation studies: coverage, bias, RMSE, correlations and fixed effects."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import platform
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from threadpoolctl import threadpool_limits

from . import __version__
from .baselines import fit_weibull_aft, nelson_aalen
from .errors import DegenerateVariance, ExtrapolationBeyondKnots, GridMismatch, MsmPamError, TermNotFound
from .events import CENSORED
from .pam import coef_table, fit as fit_pam, mts_spec, ssts_spec
from .ped import CutPoints, prediction_frame, to_ped
from .predict import EvalGrid, predict_loghazard, state_summary
from .sim import IcMechanism, dgp_from_dict, generate_study
from .truth import true_cumhaz, true_first_transition_prob, true_loghazard

log = logging.getLogger(__name__)

KEYS = ["quantity", "transition", "t", "t_entry_1"]
QUANTITIES = ("loghazard", "cumhazard", "transprob")
FLOAT_FORMAT = "%.10g"


# ------------------------------------------------------------ statistics


def clopper_pearson(x, n, level: float = 0.95):
    """Exact binomial interval; returns ``(lo, hi)`` arrays."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    a = (1 - level) / 2
    with np.errstate(invalid="ignore"):
        lo = np.where(x > 0, stats.beta.ppf(a, x, n - x + 1), 0.0)
        hi = np.where(x < n, stats.beta.ppf(1 - a, x + 1, n - x), 1.0)
    return lo, hi


def _stack(runs, truth):
    """Align run frames on ``truth``'s keys; returns (est, lo, hi) arrays ``runs × points``."""
    keys = truth[KEYS].reset_index(drop=True)
    est, lo, hi = [], [], []
    for r in runs:
        if len(r) != len(keys) or not r[KEYS].reset_index(drop=True).equals(keys):
            raise GridMismatch("run grid does not match the truth grid")
        est.append(r["estimate"].to_numpy(dtype=float))
        lo.append(r["lo"].to_numpy(dtype=float))
        hi.append(r["hi"].to_numpy(dtype=float))
    return np.array(est), np.array(lo), np.array(hi)


def coverage_from_counts(keys: pd.DataFrame, covered, n) -> pd.DataFrame:
    cov = np.asarray(covered)
    n = np.broadcast_to(np.asarray(n), cov.shape)
    lo, hi = clopper_pearson(cov, n)
    out = keys.reset_index(drop=True).copy()
    out["covered"] = cov.astype(np.int64)
    out["runs"] = n.astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["coverage"] = cov / n
    out["cp_lo"] = lo
    out["cp_hi"] = hi
    return out


def pointwise_coverage(runs, truth: pd.DataFrame) -> pd.DataFrame:
    """Per-point coverage over runs with Clopper–Pearson bounds.

    ``runs`` are frames with the key columns and ``estimate``, ``lo``,
    ``hi``; ``truth`` holds the keys and ``truth``.
    """
    _, lo, hi = _stack(runs, truth)
    tr = truth["truth"].to_numpy(dtype=float)
    covered = ((lo <= tr) & (tr <= hi)).sum(axis=0)
    return coverage_from_counts(truth[KEYS], covered, len(runs))


def overall_coverage(pointwise: pd.DataFrame, by=("quantity", "transition")) -> pd.DataFrame:
    """Average pointwise coverage, averaged CP bounds and CP on the pooled counts."""
    rows = []
    for key, g in pointwise.groupby(list(by), sort=False, observed=True):
        key = key if isinstance(key, tuple) else (key,)
        x, n = int(g["covered"].sum()), int(g["runs"].sum())
        plo, phi = clopper_pearson(x, n)
        rows.append({**dict(zip(by, key)), "n_points": len(g), "coverage": float(g["coverage"].mean()),
                     "cp_lo_mean": float(g["cp_lo"].mean()), "cp_hi_mean": float(g["cp_hi"].mean()),
                     "cp_lo_pooled": float(plo), "cp_hi_pooled": float(phi)})
    return pd.DataFrame(rows)


def bias_rmse(runs, truth: pd.DataFrame) -> pd.DataFrame:
    """Per-point bias and RMSE of the estimates."""
    est, _, _ = _stack(runs, truth)
    err = est - truth["truth"].to_numpy(dtype=float)
    out = truth[KEYS].reset_index(drop=True).copy()
    out["bias"] = err.mean(axis=0)
    out["rmse"] = np.sqrt((err ** 2).mean(axis=0))
    return out


def _state_members(frame: pd.DataFrame, state) -> np.ndarray:
    if state == 0:
        return np.unique(frame["subject_id"].to_numpy())
    m = (frame["from_state"] == state) | (frame["to_state"] == state)
    return np.unique(frame.loc[m, "subject_id"].to_numpy())


def state_r(dataset, x1: str, x2: str, state) -> float:
    """Pearson correlation of two subject covariates among subjects that ever entered ``state``."""
    f = dataset.frame if hasattr(dataset, "frame") else dataset
    sub = f.drop_duplicates("subject_id").set_index("subject_id")
    ids = _state_members(f, state)
    a = sub.loc[ids, x1].to_numpy(dtype=float)
    b = sub.loc[ids, x2].to_numpy(dtype=float)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        raise DegenerateVariance(f"no covariate variation in state {state}")
    return float(np.corrcoef(a, b)[0, 1])


def state_correlation(datasets, x1: str, x2: str, states=(0, 1)) -> pd.DataFrame:
    """Mean and empirical 95% interval of per-state correlations across datasets."""
    rows = []
    for s in states:
        r = np.array([state_r(d, x1, x2, s) for d in datasets])
        rows.append(_corr_row(s, x1, x2, r))
    return pd.DataFrame(rows)


def _corr_row(state, x1, x2, r):
    q = np.percentile(r, [2.5, 97.5]) if len(r) else (np.nan, np.nan)
    return {"state": int(state), "x": x1, "y": x2, "runs": int(len(r)), "mean_r": float(np.mean(r)) if len(r) else np.nan,
            "q025": float(q[0]), "q975": float(q[1])}


def fixed_effect_summary(runs, term: str, transition=None, truth: float | None = None, level=0.95) -> dict:
    """Distribution of one coefficient across runs and Wald-interval coverage of ``truth``.

    ``runs`` are coefficient tables with ``term``, ``transition``,
    ``estimate`` and ``se``.
    """
    est, se = [], []
    for r in runs:
        m = r["term"] == term
        if transition is not None:
            m &= r["transition"] == transition
        if not m.any():
            raise TermNotFound(f"{term!r} ({transition}) missing from a run")
        row = r[m].iloc[0]
        est.append(float(row["estimate"]))
        se.append(float(row["se"]))
    est, se = np.array(est), np.array(se)
    out = {"term": term, "transition": transition, "runs": len(est), "mean": est.mean(),
           "sd": est.std(ddof=1) if len(est) > 1 else 0.0, "q25": np.percentile(est, 25),
           "median": np.median(est), "q75": np.percentile(est, 75), "mean_se": se.mean()}
    if truth is not None:
        z = stats.norm.ppf(0.5 + level / 2)
        covered = int(np.sum((est - z * se <= truth) & (truth <= est + z * se)))
        lo, hi = clopper_pearson(covered, len(est))
        out.update({"truth": truth, "bias": est.mean() - truth, "rmse": float(np.sqrt(np.mean((est - truth) ** 2))),
                    "covered": covered, "coverage": covered / len(est), "cp_lo": float(lo), "cp_hi": float(hi)})
    return out


# ------------------------------------------------------------ configuration


BUILTIN_STUDIES = {
    "tableA2_small": {
        "name": "tableA2_small",
        "scenarios": [{"name": "ssts_dgp", "dgp": "ssts_tableA1"}, {"name": "mts_dgp", "dgp": "mts_tableA1"}],
        "models": [
            {"name": "ssts_pam", "spec": "ssts", "smooth_mode": "ps", "covariates": ["x1"]},
            {"name": "mts_pam", "spec": "mts", "smooth_mode": "ps", "covariates": ["x1"]},
        ],
        "n": 5000, "runs": 100, "seed": 20240501,
        "quantities": list(QUANTITIES), "profile": {"x1": 0.0}, "effects": True,
    },
    "ieb_large_nn_small": {
        "name": "ieb_large_nn_small",
        "scenarios": [{"name": "ieb_large_nn", "dgp": "ieb_large_nn"}],
        "models": [
            {"name": "x1_only", "spec": "ssts", "smooth_mode": "ps", "covariates": ["x1"]},
            {"name": "full", "spec": "ssts", "smooth_mode": "ps", "covariates": ["x1", "x2"]},
        ],
        "n": 5000, "runs": 100, "seed": 20240502,
        "quantities": [], "effects": True,
        "correlations": {"x": "x1", "y": "x2", "states": [0, 1]},
    },
    "ic_fixed_effects_small": {
        "name": "ic_fixed_effects_small",
        "scenarios": [
            {"name": f"{d}_{m}", "dgp": d, "mechanism": m}
            for d in ("ic_pexp", "ic_weibull") for m in ("beta", "uniform_jitter", "equidistant")
        ],
        "models": (
            [{"name": f"pam_{p}", "spec": "ssts", "estimation_point": p, "covariates": ["x1"]}
             for p in ("exact", "mid", "end")]
            + [{"name": f"weibull_{p}", "spec": "weibull", "estimation_point": p, "covariates": ["x1"]}
               for p in ("exact", "mid", "end", "interval")]
            + [{"name": f"nelson_aalen_{p}", "spec": "nelson_aalen", "estimation_point": p}
               for p in ("exact", "mid", "end")]
        ),
        "n": 5000, "runs": 100, "seed": 20240503,
        "quantities": list(QUANTITIES), "profile": {"x1": 0.0}, "effects": True,
    },
}

DEFAULTS = {
    "runs": 100, "n": 5000, "seed": None, "grid": {"start": 0.1, "stop": 10.0, "step": 0.1},
    "cuts": {"step": 0.1}, "quantities": list(QUANTITIES), "profile": {}, "effects": True,
    "correlations": None, "n_draws": 200, "dt": 0.01,
}


def load_study_config(config) -> dict:
    """Normalize a study config (built-in name, JSON path or dict)."""
    if isinstance(config, (str, os.PathLike)):
        name = str(config)
        stem = Path(name).name.removesuffix(".json")
        if Path(name).exists():
            with open(name) as fh:
                config = json.load(fh)
        elif stem in BUILTIN_STUDIES:
            config = BUILTIN_STUDIES[stem]
        else:
            raise FileNotFoundError(f"no study config {name!r} (built-ins: {sorted(BUILTIN_STUDIES)})")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(dict(config)))
    if "builtin" in cfg:
        base = copy.deepcopy(BUILTIN_STUDIES[cfg.pop("builtin")])
        over = {k: v for k, v in cfg.items() if k in config}
        cfg = copy.deepcopy(DEFAULTS)
        cfg.update(base)
        cfg.update(over)
    if "scenarios" not in cfg:
        dgp = cfg.pop("dgp")
        name = dgp if isinstance(dgp, str) else dgp.get("name", dgp.get("builtin", "custom"))
        cfg["scenarios"] = [{"name": name, "dgp": dgp, "mechanism": cfg.pop("mechanism", None)}]
    for s in cfg["scenarios"]:
        s.setdefault("mechanism", None)
    if cfg["seed"] is None:
        raise ValueError("study config requires a seed")
    for m in cfg["models"]:
        m.setdefault("smooth_mode", "ps")
        m.setdefault("estimation_point", "exact")
        m.setdefault("covariates", [])
        if m["spec"] not in ("ssts", "mts", "weibull", "nelson_aalen"):
            raise ValueError(f"unknown model spec {m['spec']!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _dgp(scenario):
    return dgp_from_dict(scenario["dgp"])


def _mechanism(scenario):
    m = scenario.get("mechanism")
    return None if m is None else IcMechanism.from_dict(m)


# ------------------------------------------------------------ truth


def _grids(diagram, g):
    one = EvalGrid.one_d(g["start"], g["stop"], g["step"])
    tri = EvalGrid.triangular(g["start"], g["stop"], g["step"])
    return {lab: (one if diagram.chain_position(int(lab.split("->")[0])) == 0 else tri) for lab in diagram.labels}


def study_truth(dgp, cfg) -> pd.DataFrame:
    """True quantities at every evaluation point, computed by adaptive integration."""
    grids = _grids(dgp.diagram, cfg["grid"])
    prof = {c: v for c, v in cfg["profile"].items() if c in dgp.covariates}
    parts = []
    for q in cfg["quantities"]:
        fn = {"loghazard": true_loghazard, "cumhazard": true_cumhaz, "transprob": true_first_transition_prob}[q]
        for lab in dgp.diagram.labels:
            g = grids[lab]
            t = np.asarray(g.t)
            te = np.asarray(g.t_entry) if g.is_2d else np.zeros(len(t))
            parts.append(pd.DataFrame({"quantity": q, "transition": lab, "t": t, "t_entry_1": te,
                                       "truth": fn(dgp, lab, t, te, covariates=prof)}))
    if not parts:
        return pd.DataFrame(columns=KEYS + ["truth"])
    return pd.concat(parts, ignore_index=True)


# ------------------------------------------------------------ one run


@dataclass
class RunResult:
    """Outputs of one run: point predictions and coefficients per model."""

    run: int
    points: dict = field(default_factory=dict)  # model -> DataFrame(KEYS + estimate, lo, hi)
    effects: dict = field(default_factory=dict)  # model -> DataFrame(term, transition, estimate, se)
    correlations: dict = field(default_factory=dict)  # state -> r
    failures: dict = field(default_factory=dict)  # model -> message
    diagnostics: dict = field(default_factory=dict)
    seconds: float = 0.0


def _model_data(study, point):
    if study.ic_view is None:
        if point != "exact":
            raise ValueError(f"estimation point {point!r} needs an IC mechanism")
        return study.dataset
    return study.ic_view.dataset("exact" if point == "interval" else point)


def _pam_run(ds, dgp, model, cfg, seedseq):
    cuts = CutPoints.grid(max(cfg["grid"]["stop"], float(ds.frame["t_exit"].max())), cfg["cuts"]["step"])
    ped = to_ped(ds, cuts)
    maker = ssts_spec if model["spec"] == "ssts" else mts_spec
    kw = {"entry_mode": model["smooth_mode"]} if model["spec"] == "ssts" else {"mode": model["smooth_mode"]}
    spec = maker(ped.diagram, model["covariates"], **kw)
    f = fit_pam(ped, spec)
    diagram = ped.diagram
    prof = {c: cfg["profile"].get(c, 0.0) for c in model["covariates"]}
    grids = _grids(diagram, cfg["grid"])
    parts = []
    if "loghazard" in cfg["quantities"]:
        for lab in diagram.labels:
            g = grids[lab]
            t = np.asarray(g.t)
            a = int(lab.split("->")[0])
            te = np.asarray(g.t_entry) if g.is_2d else np.zeros(len(t))
            entry = {d: te for d in range(1, diagram.D) if diagram.chain_position(a) >= d}
            nd = prediction_frame(diagram, lab, t, entry, prof)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ExtrapolationBeyondKnots)
                p = predict_loghazard(f, nd)
            parts.append(pd.DataFrame({"quantity": "loghazard", "transition": lab, "t": t, "t_entry_1": te,
                                       "estimate": p["value"].to_numpy(), "lo": p["lo"].to_numpy(),
                                       "hi": p["hi"].to_numpy()}))
    want = [q for q in ("cumhazard", "transprob") if q in cfg["quantities"]]
    if want:
        from .predict import posterior_draws

        draws = posterior_draws(f, cfg["n_draws"], np.random.default_rng(seedseq).integers(2 ** 63))
        by_state = {}
        for lab in diagram.labels:
            by_state.setdefault(int(lab.split("->")[0]), []).append(lab)
        ss = {}
        clamped = 0
        for a, labs in by_state.items():
            g = grids[labs[0]]
            ss[a] = state_summary(f, a, g, prof, dt=cfg["dt"], draws=draws, on_coarse="clamp")
            clamped += ss[a].attrs.get("clamped_steps", 0)
        for q in want:
            for lab in diagram.labels:
                s = ss[int(lab.split("->")[0])]
                s = s[(s["quantity"] == q) & (s["transition"] == lab)]
                parts.append(s[KEYS + ["estimate", "lo", "hi"]].reset_index(drop=True))
    eff = coef_table(f)
    eff = eff[eff["term"] != "intercept"][["term", "transition", "estimate", "se"]].reset_index(drop=True)
    points = _order(parts, cfg, diagram)
    info = {"edf_total": f.edf_total, "pirls_iterations": f.info.get("pirls_iterations")}
    if want:
        info["clamped_steps"] = clamped
    return points, eff, info


def _order(parts, cfg, diagram):
    if not parts:
        return pd.DataFrame(columns=KEYS + ["estimate", "lo", "hi"])
    df = pd.concat(parts, ignore_index=True)
    qo = {q: i for i, q in enumerate(cfg["quantities"])}
    lo = {lab: i for i, lab in enumerate(diagram.labels)}
    key = df["quantity"].map(qo) * 1000 + df["transition"].map(lo)
    return df.iloc[np.argsort(key.to_numpy(), kind="stable")].reset_index(drop=True)


def _single_event_arrays(ds, covariates):
    f = ds.frame
    t = f["t_exit"].to_numpy(dtype=float)
    st = (f["to_state"] != CENSORED).to_numpy().astype(int)
    X = f[list(covariates)].to_numpy(dtype=float) if covariates else None
    return t, st, X


def _weibull_run(study, dgp, model, cfg):
    if len(dgp.diagram.transitions) != 1:
        raise ValueError("Weibull comparator needs single-event data")
    covs = model["covariates"]
    point = model["estimation_point"]
    if point == "interval":
        v = study.ic_view.frame
        X = v[covs].to_numpy(dtype=float) if covs else None
        w = fit_weibull_aft(v["R"].to_numpy(), v["status"].to_numpy(), X, covs, likelihood="interval",
                            L=v["L"].to_numpy(), R=v["R"].to_numpy())
    else:
        t, st, X = _single_event_arrays(_model_data(study, point), covs)
        w = fit_weibull_aft(t, st, X, covs)
    lab = dgp.diagram.labels[0]
    grid = _grids(dgp.diagram, cfg["grid"])[lab]
    t = np.asarray(grid.t)
    x = np.array([cfg["profile"].get(c, 0.0) for c in covs])
    parts = []
    for q in cfg["quantities"]:
        if q == "loghazard":
            e, lo, hi = w.loghazard(t, x)
        else:
            e, lo, hi = w.cumhaz(t, x)
            if q == "transprob":
                e, lo, hi = -np.expm1(-e), -np.expm1(-lo), -np.expm1(-hi)
        parts.append(pd.DataFrame({"quantity": q, "transition": lab, "t": t, "t_entry_1": 0.0,
                                   "estimate": e, "lo": lo, "hi": hi}))
    eff = pd.DataFrame([{"term": c, "transition": lab, "estimate": b, "se": s}
                        for c, (b, s) in w.ph_effects().items()], columns=["term", "transition", "estimate", "se"])
    return _order(parts, cfg, dgp.diagram), eff, {"shape": w.shape}


def _na_run(study, dgp, model, cfg):
    ds = _model_data(study, model["estimation_point"])
    f = ds.frame
    m = np.ones(len(f), dtype=bool)
    for c in dgp.covariates:
        m &= f[c].to_numpy(dtype=float) == float(cfg["profile"].get(c, 0.0))
    t = f["t_exit"].to_numpy(dtype=float)[m]
    st = (f["to_state"] != CENSORED).to_numpy().astype(int)[m]
    na = nelson_aalen(t, st)
    lab = dgp.diagram.labels[0]
    tg = np.asarray(_grids(dgp.diagram, cfg["grid"])[lab].t)
    H = na.cumhaz(tg)
    lo, hi = na.confint(tg)
    parts = []
    for q in cfg["quantities"]:
        if q == "cumhazard":
            parts.append(pd.DataFrame({"quantity": q, "transition": lab, "t": tg, "t_entry_1": 0.0,
                                       "estimate": H, "lo": lo, "hi": hi}))
        elif q == "transprob":
            parts.append(pd.DataFrame({"quantity": q, "transition": lab, "t": tg, "t_entry_1": 0.0,
                                       "estimate": -np.expm1(-H), "lo": -np.expm1(-lo), "hi": -np.expm1(-hi)}))
    return _order(parts, cfg, dgp.diagram), pd.DataFrame(columns=["term", "transition", "estimate", "se"]), {}


def run_one(cfg: dict, scenario_index: int, run: int) -> RunResult:
    """Simulate and analyze one run of one scenario."""
    t0 = time.perf_counter()
    sc = cfg["scenarios"][scenario_index]
    dgp = _dgp(sc)
    study = generate_study(dgp, cfg["n"], cfg["seed"] + 7919 * scenario_index, run, _mechanism(sc))
    res = RunResult(run, diagnostics=dict(study.diagnostics))
    corr = cfg.get("correlations")
    if corr:
        for s in corr["states"]:
            try:
                res.correlations[int(s)] = state_r(study.dataset, corr["x"], corr["y"], s)
            except DegenerateVariance as e:
                res.failures[f"correlation_state_{s}"] = str(e)
    for j, model in enumerate(cfg["models"]):
        seedseq = np.random.SeedSequence([cfg["seed"], scenario_index, run, 1000 + j])
        try:
            if model["spec"] in ("ssts", "mts"):
                ds = _model_data(study, model["estimation_point"])
                pts, eff, info = _pam_run(ds, dgp, model, cfg, seedseq)
            elif model["spec"] == "weibull":
                pts, eff, info = _weibull_run(study, dgp, model, cfg)
            else:
                pts, eff, info = _na_run(study, dgp, model, cfg)
        except MsmPamError as e:
            res.failures[model["name"]] = f"{type(e).__name__}: {e}"
            continue
        res.points[model["name"]] = pts
        res.effects[model["name"]] = eff
        res.diagnostics[model["name"]] = info
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------ orchestration

_WORKER_CFG = None


def _init_worker(cfg):
    global _WORKER_CFG
    _WORKER_CFG = cfg


def _work(args):
    sc, run = args
    with threadpool_limits(1):
        try:
            return sc, run_one(_WORKER_CFG, sc, run), None
        except Exception:  # recorded and excluded, never silently dropped
            return sc, None, traceback.format_exc()


class _Accumulator:
    """Running per-point sums for one (scenario, model), consumed in run order."""

    def __init__(self, truth):
        self.truth = truth
        self.keys = truth[KEYS].reset_index(drop=True)
        tr = truth["truth"].to_numpy(dtype=float)
        self.tr = tr
        self.covered = np.zeros(len(tr), dtype=np.int64)
        self.err = np.zeros(len(tr))
        self.err2 = np.zeros(len(tr))
        self.n = 0

    def add(self, pts):
        p = pts.reset_index(drop=True)
        if len(p) != len(self.keys):
            raise GridMismatch("run grid does not match the truth grid")
        k = self.keys
        same = all((p[c].to_numpy() == k[c].to_numpy()).all() for c in ("quantity", "transition")) and all(
            np.allclose(p[c].to_numpy(dtype=float), k[c].to_numpy(dtype=float), atol=1e-9) for c in ("t", "t_entry_1"))
        if not same:
            raise GridMismatch("run grid does not match the truth grid")
        e = p["estimate"].to_numpy(dtype=float)
        lo = p["lo"].to_numpy(dtype=float)
        hi = p["hi"].to_numpy(dtype=float)
        self.covered += (lo <= self.tr) & (self.tr <= hi)
        d = e - self.tr
        self.err += d
        self.err2 += d * d
        self.n += 1

    def tables(self):
        pw = coverage_from_counts(self.keys, self.covered, self.n)
        with np.errstate(invalid="ignore", divide="ignore"):
            pw["bias"] = self.err / self.n
            pw["rmse"] = np.sqrt(self.err2 / self.n)
        return pw


def available_cpus() -> int:
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def run_study(config, out_dir=None, threads: int | None = None, progress=None) -> dict:
    """Run a replicated study and write its tables.

    Parameters
    ----------
    config : str, path or dict
        Built-in study name, JSON file or config dict.
    out_dir : path, optional
        Output directory; tables are returned either way.
    threads : int, optional
        Worker processes (default: available CPUs). Results do not depend
        on it.

    Returns
    -------
    dict of DataFrame
        ``coverage``, ``coverage_pointwise``, ``bias_rmse``,
        ``fixed_effects``, ``correlations`` plus ``meta`` (dict).
    """
    cfg = load_study_config(config)
    threads = max(1, int(threads or available_cpus()))
    t_start = time.perf_counter()
    tasks = [(s, r) for s in range(len(cfg["scenarios"])) for r in range(cfg["runs"])]
    dgps = [_dgp(s) for s in cfg["scenarios"]]
    truths = [study_truth(d, cfg) for d in dgps]
    acc = {}
    effects = {}
    corr = {}
    failures = []
    seconds = []
    clamped = {}

    def consume(item):
        sc, res, err = item
        name = cfg["scenarios"][sc]["name"]
        if err is not None:
            failures.append({"scenario": name, "model": "*", "error": err.strip().splitlines()[-1]})
            return
        seconds.append(res.seconds)
        for m, msg in res.failures.items():
            failures.append({"scenario": name, "run": res.run, "model": m, "error": msg})
        for m, pts in res.points.items():
            if len(pts) == 0:
                continue
            key = (sc, m)
            if key not in acc:
                qs = list(dict.fromkeys(pts["quantity"]))
                tr = truths[sc]
                sub = pd.concat([tr[(tr["quantity"] == q) & tr["transition"].isin(pts["transition"].unique())]
                                 for q in qs], ignore_index=True)
                acc[key] = _Accumulator(sub)
            acc[key].add(pts)
        for m, eff in res.effects.items():
            effects.setdefault((sc, m), []).append(eff)
        for m, info in res.diagnostics.items():
            if isinstance(info, dict) and info.get("clamped_steps"):
                k = f"{name}/{m}"
                clamped[k] = clamped.get(k, 0) + int(info["clamped_steps"])
        for s, r in res.correlations.items():
            corr.setdefault((sc, s), []).append(r)
        if progress:
            progress(name, res.run)

    if threads == 1:
        _init_worker(cfg)
        for t in tasks:
            consume(_work(t))
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(cfg,)) as ex:
            for item in ex.map(_work, tasks, chunksize=1):
                consume(item)

    fail_n = {}
    for f in failures:
        k = (f["scenario"], f["model"])
        fail_n[k] = fail_n.get(k, 0) + 1
    pw_parts, cov_parts, br_parts = [], [], []
    for (sc, m), a in acc.items():
        name = cfg["scenarios"][sc]["name"]
        pw = a.tables()
        pw.insert(0, "model", m)
        pw.insert(0, "scenario", name)
        pw_parts.append(pw)
        ov = overall_coverage(pw, by=("scenario", "model", "quantity", "transition"))
        ov["runs"] = a.n
        ov["failed"] = fail_n.get((name, m), 0) + fail_n.get((name, "*"), 0)
        cov_parts.append(ov)
        g = pw.groupby(["scenario", "model", "quantity", "transition"], sort=False, observed=True)
        br = g.agg(bias=("bias", "mean"), rmse=("rmse", "mean"), abs_bias=("bias", lambda x: np.abs(x).mean())).reset_index()
        br["runs"] = a.n
        br_parts.append(br)
    fe_rows = []
    for (sc, m), runs in effects.items():
        dgp = dgps[sc]
        name = cfg["scenarios"][sc]["name"]
        if not cfg["effects"] or not runs or len(runs[0]) == 0:
            continue
        for _, row in runs[0].iterrows():
            truth = dgp.effects.get((row["term"], row["transition"]))
            s = fixed_effect_summary(runs, row["term"], row["transition"], truth)
            fe_rows.append({"scenario": name, "model": m, **s})
    corr_rows = []
    if cfg.get("correlations"):
        c = cfg["correlations"]
        for (sc, s), r in sorted(corr.items()):
            corr_rows.append({"scenario": cfg["scenarios"][sc]["name"], **_corr_row(s, c["x"], c["y"], np.array(r))})
    tables = {
        "coverage": pd.concat(cov_parts, ignore_index=True) if cov_parts else pd.DataFrame(),
        "coverage_pointwise": pd.concat(pw_parts, ignore_index=True) if pw_parts else pd.DataFrame(),
        "bias_rmse": pd.concat(br_parts, ignore_index=True) if br_parts else pd.DataFrame(),
        "fixed_effects": pd.DataFrame(fe_rows),
        "correlations": pd.DataFrame(corr_rows),
        "failures": pd.DataFrame(failures, columns=["scenario", "run", "model", "error"]),
    }
    meta = {
        "tool": "msmpam", "version": __version__, "config": cfg, "config_hash": config_hash(cfg),
        "seed": cfg["seed"], "threads": threads, "clamped_product_integral_steps": clamped,
        "n_tasks": len(tasks), "n_failures": len(failures),
        "ic_mechanisms": {s["name"]: (None if s["mechanism"] is None else _mechanism(s).to_dict())
                          for s in cfg["scenarios"]},
        "python": platform.python_version(), "numpy": np.__version__, "pandas": pd.__version__,
        "scipy": __import__("scipy").__version__,
        "seconds_total": time.perf_counter() - t_start,
        "seconds_per_run_mean": float(np.mean(seconds)) if seconds else None,
    }
    tables["meta"] = meta
    if out_dir is not None:
        write_tables(tables, out_dir)
    return tables


def write_tables(tables: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, df in tables.items():
        if name == "meta":
            continue
        df.to_csv(out / f"{name}.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    with open(out / "meta.json", "w") as fh:
        json.dump(tables["meta"], fh, indent=2, sort_keys=True, default=str)
