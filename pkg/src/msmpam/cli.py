"""Command-line entry point: ``msmpam <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import DataError, MsmPamError, NumericError

log = logging.getLogger("msmpam")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PREDICT_COLUMNS = ["quantity", "transition", "t", "t_entry_1", "t_entry_2", "estimate", "lo", "hi"]

SCHEMAS = """\
JSON inputs
-----------
diagram / schema (--schema):
  {"covariates": {"x1": "numeric", "g": {"categorical": ["a", "b"]}},
   "diagram": {"transitions": [[0,1],[0,3],[1,2],[1,3]],
               "progression_chain": [0,1,2], "terminal_risks": [3]}}
  Both keys are optional; without a diagram the illness-death layout is used.
  Without covariates, every extra CSV column is read as numeric when it
  parses, otherwise as categorical.

model spec (fit --spec):
  {"builtin": "ssts" | "mts", "covariates": ["x1"], "k": 20, "mode": "ps" | "fs"}
  or the explicit form
  {"terms": [{"type": "intercepts"},
             {"type": "linear", "column": "x1", "by": "transition"},
             {"type": "smooth", "variable": "t", "k": 20, "by": "transition",
              "mode": "ps"}],
   "offset": "offset", "response": "status"}

grid (predict --grid):
  {"start": 0.1, "stop": 10, "step": 0.1} or {"t": [...], "t_entry": [...]}.
  Transitions out of state 0 use the t values; later states use the
  triangular (t, t_entry_1) grid built from start/stop/step, or the explicit
  t_entry list, or the profile's t_entry_1.

profile (predict --profile): {"x1": 0, "t_entry_1": 2.0}

DGP (simulate --dgp): a built-in name (ssts_tableA1, mts_tableA1,
  ieb_{small,medium,large}_{bb,bn,nb,nn}, ic_pexp, ic_weibull, ic_icenreg),
  {"builtin": name, ...options} or the free form
  {"diagram": {...}, "loghazards": {"0->1": "-3 + 0.2*x1", ...},
   "covariates": {"x1": {"bernoulli": 0.5}}, "censoring": {"weibull": [1.5, 10]}}

study config (study --config): a built-in name (tableA2_small,
  ieb_large_nn_small, ic_fixed_effects_small), {"builtin": name, ...overrides}
  or {"scenarios": [{"name", "dgp", "mechanism"}],
      "models": [{"name", "spec", "smooth_mode", "estimation_point", "covariates"}],
      "n", "runs", "seed", "grid", "quantities", "profile"}

Exit codes: 0 success, 2 usage, 3 data/validation, 4 numeric failure.
"""


class UsageError(Exception):
    pass


# ------------------------------------------------------------ helpers


def _read_json_arg(value):
    """JSON literal, path to a JSON file, or a bare name."""
    if value is None:
        return None
    p = Path(value)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"{value} not found")
        with open(p) as fh:
            return json.load(fh)
    s = value.strip()
    if s.startswith("{") or s.startswith("["):
        return json.loads(s)
    return value


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_meta(path, command: str, argv, config: dict, seed=None, inputs=(), extra=None) -> None:
    cfg_json = json.dumps(config, sort_keys=True, default=str)
    meta = {
        "tool": "msmpam",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": json.loads(cfg_json),
        "config_hash": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _file_sha256(p) for p in inputs},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
    }
    if extra:
        meta.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def _file_meta_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".meta.json")


def _load_schema_and_diagram(schema_arg):
    from .events import CovariateSchema, StateDiagram

    if schema_arg is None:
        return None, None
    d = _read_json_arg(schema_arg)
    if not isinstance(d, dict):
        raise UsageError("--schema must be a JSON object")
    diagram = StateDiagram.from_dict(d["diagram"]) if "diagram" in d else None
    cov = d.get("covariates", None if "diagram" in d else d)
    return (None if cov is None else CovariateSchema.from_dict(cov)), diagram


def _infer_schema(path):
    from .events import BASE_COLUMNS, CovariateSchema

    raw = pd.read_csv(path, dtype=str, keep_default_na=False, nrows=None)
    out = {}
    for c in raw.columns:
        if c in BASE_COLUMNS:
            continue
        num = pd.to_numeric(raw[c], errors="coerce")
        out[c] = "numeric" if num.notna().all() else {"categorical": sorted(raw[c].unique().tolist())}
    return CovariateSchema.from_dict(out)


def _read_dataset(path, schema_arg):
    from .events import read_transitions_csv

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    schema, diagram = _load_schema_and_diagram(schema_arg)
    if schema is None:
        schema = _infer_schema(path)
    return read_transitions_csv(path, schema, diagram)


def _model_spec(d, diagram):
    from .pam import ModelSpec, mts_spec, ssts_spec

    if isinstance(d, str):
        d = {"builtin": d}
    if "builtin" in d:
        kind = d["builtin"]
        covs = d.get("covariates", [])
        k = int(d.get("k", 20))
        mode = d.get("mode", "ps")
        entry = bool(d.get("entry", True))
        if kind == "ssts":
            return ssts_spec(diagram, covs, k=k, entry_mode=mode, entry=entry)
        if kind == "mts":
            return mts_spec(diagram, covs, k=k, mode=mode, entry=entry)
        raise UsageError(f"unknown built-in model spec {kind!r} (ssts, mts)")
    return ModelSpec.from_dict(d)


def _grid_from(d, diagram, from_state):
    from .predict import EvalGrid

    later = diagram.chain_position(from_state) >= 1
    if "t" in d:
        te = d.get("t_entry")
        if later and te is not None:
            return EvalGrid(tuple(d["t"]), tuple(te))
        return EvalGrid(tuple(d["t"]))
    start, stop, step = float(d.get("start", 0.1)), float(d["stop"]), float(d.get("step", 0.1))
    if later and d.get("triangular", True):
        return EvalGrid.triangular(start, stop, step)
    return EvalGrid.one_d(start, stop, step)


# ------------------------------------------------------------ subcommands


def cmd_simulate(args, argv):
    from .events import write_transitions_csv
    from .sim import IcMechanism, dgp_from_dict, generate_study

    dgp_arg = _read_json_arg(args.dgp)
    dgp = dgp_from_dict(dgp_arg)
    mech = None
    if args.mechanism:
        mech = IcMechanism.from_dict(_read_json_arg(args.mechanism))
    study = generate_study(dgp, args.n, args.seed, args.run, mech)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_transitions_csv(study.dataset, out / "transitions.csv")
    files = ["transitions.csv"]
    if study.ic_view is not None:
        study.ic_view.frame.to_csv(out / "intervals.csv", index=False, lineterminator="\n")
        files.append("intervals.csv")
        for p in ("mid", "end"):
            write_transitions_csv(study.ic_view.dataset(p), out / f"transitions_{p}.csv")
            files.append(f"transitions_{p}.csv")
    cfg = {"dgp": dgp_arg, "n": args.n, "run": args.run,
           "mechanism": None if mech is None else mech.to_dict()}
    _write_meta(out / "meta.json", "simulate", argv, cfg, seed=args.seed,
                extra={"outputs": files, "diagnostics": study.diagnostics})
    print(f"wrote {len(study.dataset)} episodes for {study.dataset.n_subjects} subjects to {out}")


def cmd_transform(args, argv):
    from .ped import CutPoints, to_ped

    ds = _read_dataset(args.data, args.schema)
    cuts = None
    strategy = "unique_event_times"
    if args.cuts:
        c = _read_json_arg(args.cuts)
        if isinstance(c, dict) and "step" in c:
            stop = float(c.get("stop", np.ceil(ds.frame["t_exit"].max() / c["step"]) * c["step"]))
            cuts = CutPoints.grid(stop, float(c["step"]))
        elif isinstance(c, list):
            strategy = c
        else:
            strategy = str(c)
    ped = to_ped(ds, cuts, strategy)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ped.to_csv(out)
    _write_meta(_file_meta_path(out), "transform", argv,
                {"data": str(args.data), "schema": _read_json_arg(args.schema), "cuts": list(ped.cuts.cuts)},
                inputs=[args.data])
    print(f"wrote {len(ped)} PED rows ({ped.cuts.J} intervals) to {out}")


def cmd_fit(args, argv):
    from .pam import coef_table, fit
    from .ped import read_ped_csv
    from .weighting import WeightTable

    ped = read_ped_csv(args.ped)
    spec_arg = _read_json_arg(args.spec)
    spec = _model_spec(spec_arg, ped.diagram)
    weights = WeightTable.read_csv(args.weights) if args.weights else None
    lambdas = _read_json_arg(args.lambdas) if args.lambdas else None
    f = fit(ped, spec, weights=weights, lambdas=lambdas)
    out = Path(args.out)
    f.save(out)
    with open(out / "spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
    coef_table(f).to_csv(out / "coefficients.csv", index=False, float_format="%.10g", lineterminator="\n")
    inputs = [args.ped] + ([args.weights] if args.weights else [])
    _write_meta(out / "meta.json", "fit", argv,
                {"ped": str(args.ped), "spec": spec.to_dict(), "weights": args.weights, "lambdas": lambdas},
                inputs=inputs,
                extra={"lambdas_selected": f.lambdas, "edf_total": f.edf_total, "aic": f.aic,
                       "deviance": f.deviance})
    print(f"fit: edf {f.edf_total:.2f}, AIC {f.aic:.2f}; saved to {out}")


def cmd_predict(args, argv):
    from .pam import FittedPam
    from .ped import prediction_frame
    from .predict import predict_loghazard, state_summary

    fit_dir = Path(args.fit)
    if not (fit_dir / "fit.json").exists():
        raise FileNotFoundError(f"{fit_dir}/fit.json not found")
    f = FittedPam.load(fit_dir)
    diagram = f.diagram
    if diagram is None:
        raise DataError("fitted model carries no state diagram")
    grid_d = _read_json_arg(args.grid)
    if not isinstance(grid_d, dict):
        raise UsageError("--grid must be a JSON object or file")
    profile = dict(_read_json_arg(args.profile) or {}) if args.profile else {}
    covs = {c: v for c, v in profile.items() if not c.startswith("t_entry_")}
    quantities = args.quantities.split(",")
    bad = set(quantities) - {"loghazard", "cumhazard", "transprob"}
    if bad:
        raise UsageError(f"unknown quantities {sorted(bad)}")
    parts = []
    from_states = sorted({a for a, _ in diagram.transitions})
    for a in from_states:
        g = _grid_from(grid_d, diagram, a)
        pos = diagram.chain_position(a)
        t = np.asarray(g.t)
        if pos == 0:
            te = np.zeros(len(t))
        elif g.is_2d:
            te = np.asarray(g.t_entry)
        else:
            te = np.full(len(t), float(profile.get("t_entry_1", 0.0)))
        te2 = float(profile.get("t_entry_2", 0.0)) if pos >= 2 else 0.0
        if "loghazard" in quantities:
            for lab in diagram.labels:
                if int(lab.split("->")[0]) != a:
                    continue
                entry = {d: (te if d == 1 else float(profile.get(f"t_entry_{d}", 0.0)))
                         for d in range(1, diagram.D) if pos >= d}
                nd = prediction_frame(diagram, lab, t, entry, covs)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    p = predict_loghazard(f, nd)
                parts.append(pd.DataFrame({"quantity": "loghazard", "transition": lab, "t": t,
                                           "t_entry_1": te, "t_entry_2": te2, "estimate": p["value"],
                                           "lo": p["lo"], "hi": p["hi"]}))
        want = [q for q in ("cumhazard", "transprob") if q in quantities]
        if want:
            prof = dict(profile)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ss = state_summary(f, a, g, prof, diagram, dt=args.dt, n_draws=args.n_draws, seed=args.seed)
            ss = ss[ss["quantity"].isin(want)].copy()
            ss["t_entry_2"] = te2
            parts.append(ss[PREDICT_COLUMNS])
    out_df = pd.concat(parts, ignore_index=True)[PREDICT_COLUMNS]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out_df.to_csv(out, index=False, float_format="%.10g", lineterminator="\n")
    _write_meta(_file_meta_path(out), "predict", argv,
                {"fit": str(fit_dir), "grid": grid_d, "profile": profile, "quantities": quantities,
                 "dt": args.dt, "n_draws": args.n_draws},
                seed=args.seed, inputs=[fit_dir / "fit.json", fit_dir / "V.npy"])
    print(f"wrote {len(out_df)} prediction rows to {out}")


def cmd_weights(args, argv):
    from .weighting import stabilized_weights

    ds = _read_dataset(args.data, args.schema)
    conf = [c for c in (args.confounders or "").split(",") if c]
    cap = None if args.cap in (None, "none") else float(args.cap)
    wt = stabilized_weights(ds, args.exposure, conf, pooled=not args.per_state, cap_quantile=cap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wt.to_csv(out)
    _write_meta(_file_meta_path(out), "weights", argv,
                {"data": str(args.data), "exposure": args.exposure, "confounders": conf,
                 "pooled": not args.per_state, "cap_quantile": cap},
                inputs=[args.data], extra={"diagnostics": wt.diagnostics})
    print(f"wrote {len(wt.frame)} weights to {out}")


def cmd_study(args, argv):
    from .harness import load_study_config, run_study

    cfg_arg = _read_json_arg(args.config)
    if isinstance(cfg_arg, str):
        cfg_arg = {"builtin": cfg_arg}
    cfg_arg = dict(cfg_arg)
    for key in ("seed", "runs", "n"):
        v = getattr(args, key)
        if v is not None:
            cfg_arg[key] = v
    try:
        cfg = load_study_config(cfg_arg)
    except (KeyError, FileNotFoundError) as exc:
        raise UsageError(f"bad study config: {exc}") from None
    except ValueError as exc:
        if "seed" in str(exc):
            raise UsageError(str(exc)) from None
        raise DataError(str(exc)) from None

    def progress(name, run):
        log.info("%s run %d done", name, run)

    tables = run_study(cfg, args.out, threads=args.threads, progress=progress)
    meta_path = Path(args.out) / "meta.json"
    with open(meta_path) as fh:
        meta = json.load(fh)
    meta["command"] = "study"
    meta["argv"] = list(argv)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
    print(f"study {cfg.get('name', 'custom')}: {meta['n_tasks']} runs, {meta['n_failures']} failures; "
          f"tables in {args.out}")
    return tables


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="msmpam", description="Piecewise exponential additive models for multi-state data.",
        epilog=SCHEMAS, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"msmpam {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, epilog=SCHEMAS,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    s = add("simulate", "simulate event histories from a DGP")
    s.add_argument("--dgp", required=True, help="built-in DGP name, JSON literal or JSON file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--run", type=int, default=0, help="run index within the seed's stream family")
    s.add_argument("--mechanism", help="interval-censoring mechanism name or JSON (single-event DGPs)")
    s.add_argument("--out", required=True, help="output directory")

    s = add("transform", "convert a transitions CSV into piecewise exponential data")
    s.add_argument("--data", required=True, help="transitions CSV")
    s.add_argument("--schema", help="covariate schema / diagram JSON")
    s.add_argument("--cuts", help='"unique_event_times", "quantiles:m", a JSON list or {"step": h}')
    s.add_argument("--out", required=True, help="PED CSV path (a .json sidecar is written next to it)")

    s = add("fit", "fit a PAM to a PED CSV")
    s.add_argument("--ped", required=True)
    s.add_argument("--spec", required=True, help='model spec JSON, or "ssts" / "mts"')
    s.add_argument("--weights", help="weights CSV (subject_id, from_state, weight)")
    s.add_argument("--lambdas", help="fixed smoothing parameters as JSON {group: value}")
    s.add_argument("--out", required=True, help="output directory")

    s = add("predict", "log-hazards, cumulative hazards and transition probabilities")
    s.add_argument("--fit", required=True, help="directory written by `fit`")
    s.add_argument("--grid", required=True, help="grid JSON literal or file")
    s.add_argument("--profile", help="covariate profile JSON")
    s.add_argument("--quantities", default="loghazard,cumhazard,transprob")
    s.add_argument("--n-draws", type=int, default=200)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="predictions.csv")

    s = add("weights", "stabilized inverse-propensity weights")
    s.add_argument("--data", required=True)
    s.add_argument("--schema")
    s.add_argument("--exposure", required=True)
    s.add_argument("--confounders", default="", help="comma-separated column names")
    s.add_argument("--per-state", action="store_true", help="one propensity model per from-state")
    s.add_argument("--cap", default="0.99", help='cap quantile, or "none"')
    s.add_argument("--out", required=True)

    s = add("study", "run a replicated simulation study")
    s.add_argument("--config", required=True, help="built-in study name, JSON literal or file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")
    return p


COMMANDS = {
    "simulate": cmd_simulate, "transform": cmd_transform, "fit": cmd_fit,
    "predict": cmd_predict, "weights": cmd_weights, "study": cmd_study,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"msmpam {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"msmpam {args.command}: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MsmPamError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"msmpam {args.command}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"msmpam {args.command}: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
