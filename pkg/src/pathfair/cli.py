"""Command-line entry point.

Every subcommand resolves its settings as defaults < ``--config`` file <
explicit flags, runs, and prints one JSON document holding the result and
the fully resolved config.  Feeding that document back through ``--config``
reproduces the run exactly.  Errors are printed as JSON with a nonzero exit
status (2 for usage and config problems, 1 for failures during a run).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from . import cohort as _cohort
from . import estimators as _est
from . import inference as _inf
from . import oracle as _oracle
from . import scm as _scm
from .learners import LearnerError, LearnerSet

COMMANDS = ("simulate", "oracle", "estimate", "bootstrap", "conditional", "diagnose", "study", "ingest")
SCM_NAMES = ("binary", "linear", "nonlinear", "reference")
FIXTURES = Path(__file__).parent / "fixtures"

COMMON_DEFAULTS: dict[str, Any] = {
    "seed": 0, "folds": 5, "clip": 1e-4, "level": 0.95, "mode": "dr", "breaks": [],
    "learner": "ridge", "learners": None, "jobs": 1, "effects": ["vde"], "x0_label": None, "x1_label": None,
    "scm": None, "spec": None, "data": None, "schema": None, "n": 32000, "sample_seed": 0,
    "scm_options": {}, "bootstrap": 500,
}
DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {},
    "oracle": {"query": "vde", "n_mc": 1_000_000, "method": "mc", "mediators": "wv"},
    "estimate": {},
    "bootstrap": {},
    "conditional": {"axis1": None, "axis2": None, "edges1": None, "edges2": None, "min_count": 20},
    "diagnose": {},
    "study": {"kind": "convergence", "sizes": [1000, 2000, 4000, 8000, 16000, 32000],
              "etas": [0.1, 0.2, 0.33, 0.5], "replications": 20, "modes": ["dr", "sn_dr"], "n_mc": 1_000_000},
    "ingest": {"events": None, "gamma": 0.01, "window": 5.0, "filters": None, "value_ranges": None,
               "spo2_channel": "spo2", "sao2_channel": "sao2", "delta_channel": "delta"},
}
OUTPUT_KEYS = ("out", "csv")


class CliError(Exception):
    def __init__(self, kind: str, message: str, **detail):
        super().__init__(message)
        self.kind = kind
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print and exit; surface as JSON instead
        raise CliError("usage", message)


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pathfair", description="Path-specific effect estimation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=str)
        s.add_argument("--out", type=str, help="write the result JSON here as well as stdout")
        s.add_argument("--csv", type=str, help="write the flat table for this command here")
        s.add_argument("--seed", type=int)
        s.add_argument("--jobs", type=int)
        s.add_argument("--scm", choices=SCM_NAMES)
        s.add_argument("--spec", type=str, help="SCM spec JSON")
        s.add_argument("--data", type=str, help="cohort CSV (needs a schema block in the config)")
        s.add_argument("--n", type=int, help="sample size when simulating")
        s.add_argument("--sample-seed", type=int)
        s.add_argument("--folds", type=int)
        s.add_argument("--clip", type=float)
        s.add_argument("--level", type=float)
        s.add_argument("--mode", choices=("plugin", "ipw", "dr", "sndr", "sn_dr"))
        s.add_argument("--break", dest="breaks", action="append", choices=("mu", "pi"))
        s.add_argument("--effect", dest="effects", action="append",
                       choices=("te", "nde", "nie", "nie-star", "nie_star", "vde"))
        s.add_argument("--learner", choices=("ridge", "logistic", "stumps", "frequency"))
        s.add_argument("--x0-label", type=str)
        s.add_argument("--x1-label", type=str)
        s.add_argument("--bootstrap", type=int, help="bootstrap replicates B")
        if name == "oracle":
            s.add_argument("--query", choices=("te", "nde", "nie", "nie-star", "vde", "mean-yx",
                                               "nested-vde", "nested-nde"))
            s.add_argument("--n-mc", type=int)
            s.add_argument("--method", choices=("mc", "exact", "formula"))
            s.add_argument("--mediators", choices=("wv", "v"))
        if name == "conditional":
            s.add_argument("--axis1")
            s.add_argument("--axis2")
            s.add_argument("--edges1", type=_csv_list(float))
            s.add_argument("--edges2", type=_csv_list(float))
            s.add_argument("--min-count", type=int)
        if name == "study":
            s.add_argument("--kind", choices=("convergence", "imbalance"))
            s.add_argument("--sizes", type=_csv_list(int))
            s.add_argument("--etas", type=_csv_list(float))
            s.add_argument("--replications", type=int)
            s.add_argument("--modes", type=_csv_list(str))
            s.add_argument("--n-mc", type=int)
        if name == "ingest":
            s.add_argument("--events", type=str, help="long-format event CSV")
            s.add_argument("--gamma", type=float)
            s.add_argument("--window", type=float)
    return p


# ---------------------------------------------------------------------------
# config resolution


def _load_config(path: str) -> tuple[dict[str, Any], Path]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("config", f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError("config", f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError("config", "config must be a JSON object")
    # a previous result document carries its resolved config
    if "config" in doc and "result" in doc:
        doc = doc["config"]
    return doc, Path(path).resolve().parent


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    cmd = args.command
    cfg: dict[str, Any] = {**COMMON_DEFAULTS, **DEFAULTS[cmd]}
    base = Path.cwd()
    if args.config:
        doc, base = _load_config(args.config)
        if doc.get("command", cmd) != cmd:
            raise CliError("config", f"config is for command {doc['command']!r}, not {cmd!r}")
        unknown = sorted(set(doc) - set(cfg) - {"command", "version"})
        if unknown:
            raise CliError("config", "unknown config fields", violations=[f"{k}: unknown field" for k in unknown])
        cfg.update({k: v for k, v in doc.items() if k in cfg})
    for key, val in vars(args).items():
        if key in ("command", "config") or key in OUTPUT_KEYS or val is None:
            continue
        if key == "breaks":
            val = [f"break_{b}" for b in val]
        cfg[key] = val
    cfg["breaks"] = [b if b.startswith("break_") else f"break_{b}" for b in cfg["breaks"]]
    cfg["effects"] = [e.replace("-", "_") for e in cfg["effects"]]
    cfg["mode"] = {"sndr": "sn_dr"}.get(cfg["mode"], cfg["mode"])
    # embed referenced files so that the resolved config is self-contained
    if cmd != "ingest" and all(cfg.get(k) is None for k in ("scm", "spec", "data")):
        cfg["spec"] = str(FIXTURES / "binary_scm.json")
    for key in ("spec",):
        if isinstance(cfg.get(key), str):
            path = _resolve_path(cfg[key], base)
            try:
                cfg[key] = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CliError("config", f"cannot read spec {path}: {exc}") from exc
    for key in ("data", "events"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str(_resolve_path(cfg[key], base))
    if cfg["learners"] is None:
        cfg["learners"] = LearnerSet.named(cfg["learner"]).to_dict()
    elif args.learner is not None:
        cfg["learners"] = LearnerSet.named(args.learner).to_dict()
    cfg["command"] = cmd
    validate_config(cfg)
    return cfg


def _resolve_path(p: str, base: Path) -> Path:
    path = Path(p)
    if not path.is_absolute():
        for root in (base, Path.cwd(), FIXTURES):
            if (root / path).exists():
                return (root / path).resolve()
    return path


def validate_config(cfg: dict[str, Any]) -> None:
    v: list[str] = []
    cmd = cfg["command"]
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        v.append("seed: must be an integer in [0, 2^64)")
    if not isinstance(cfg["folds"], int) or cfg["folds"] < 2:
        v.append("folds: must be an integer >= 2")
    if not (isinstance(cfg["clip"], (int, float)) and 0 < cfg["clip"] < 0.5):
        v.append("clip: must lie in (0, 0.5)")
    if not (isinstance(cfg["level"], (int, float)) and 0 < cfg["level"] < 1):
        v.append("level: must lie in (0, 1)")
    if cfg["mode"] not in _est.MODES:
        v.append(f"mode: must be one of {_est.MODES}")
    for b in cfg["breaks"]:
        if b not in _est.BREAKS:
            v.append(f"breaks: unknown entry {b!r}")
    for e in cfg["effects"]:
        if e not in _est.EFFECTS:
            v.append(f"effects: unknown effect {e!r}")
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        v.append("jobs: must be a positive integer")
    if not isinstance(cfg["n"], int) or cfg["n"] < 1:
        v.append("n: must be a positive integer")
    try:
        LearnerSet.from_dict(cfg["learners"])
    except (LearnerError, KeyError, TypeError) as exc:
        v.append(f"learners: {exc}")
    sources = [k for k in ("scm", "spec", "data") if cfg.get(k) is not None]
    needs_source = cmd not in ("ingest",)
    if cmd == "study" or cmd == "oracle" or cmd == "simulate":
        if "data" in sources:
            v.append("data: this command needs a structural model (scm or spec), not a CSV")
    if needs_source and len(sources) != 1:
        v.append(f"data source: exactly one of scm, spec, data is required (got {sources or 'none'})")
    if cfg.get("data") is not None and cmd != "ingest" and cfg.get("schema") is None:
        v.append("schema: a role schema block is required with a CSV data source")
    if cfg.get("scm") is not None and cfg["scm"] not in SCM_NAMES:
        v.append(f"scm: must be one of {SCM_NAMES}")
    if (not isinstance(cfg["bootstrap"], int) or cfg["bootstrap"] < 2):
        v.append("bootstrap: must be an integer >= 2")
    if cmd == "oracle":
        if cfg["method"] not in ("mc", "exact", "formula"):
            v.append("method: must be mc, exact or formula")
        if not isinstance(cfg["n_mc"], int) or cfg["n_mc"] < 1:
            v.append("n_mc: must be a positive integer")
    if cmd == "conditional":
        for k in ("axis1", "axis2", "edges1", "edges2"):
            if cfg.get(k) in (None, []):
                v.append(f"{k}: required")
        for k in ("edges1", "edges2"):
            e = cfg.get(k)
            if e and (len(e) < 2 or any(b <= a for a, b in zip(e, e[1:]))):
                v.append(f"{k}: must be strictly increasing with at least two entries")
        if not isinstance(cfg["min_count"], int) or cfg["min_count"] < 1:
            v.append("min_count: must be a positive integer")
    if cmd == "study":
        if cfg["kind"] not in ("convergence", "imbalance"):
            v.append("kind: must be convergence or imbalance")
        if not cfg["sizes"]:
            v.append("sizes: must be non-empty")
        if any(not 0 < e < 1 for e in cfg["etas"]):
            v.append("etas: must lie in (0, 1)")
        if not isinstance(cfg["replications"], int) or cfg["replications"] < 2:
            v.append("replications: must be an integer >= 2")
        for m in cfg["modes"]:
            if {"sndr": "sn_dr"}.get(m, m) not in _est.MODES:
                v.append(f"modes: unknown mode {m!r}")
    if cmd == "ingest":
        if (cfg.get("events") is None) == (cfg.get("data") is None):
            v.append("data source: exactly one of events, data is required")
        if cfg.get("data") is not None and cfg.get("schema") is None and cfg.get("filters") is None:
            v.append("schema: ingesting a cohort CSV needs a schema or filters block")
        if not isinstance(cfg["gamma"], (int, float)) or cfg["gamma"] < 0:
            v.append("gamma: must be non-negative")
        if not isinstance(cfg["window"], (int, float)) or cfg["window"] <= 0:
            v.append("window: must be positive")
    if v:
        raise CliError("config", "invalid configuration", violations=v)


# ---------------------------------------------------------------------------
# data sources


def _spec_from(cfg: dict[str, Any]) -> _scm.ScmSpec:
    if cfg.get("spec") is not None:
        return _scm.ScmSpec.from_dict(cfg["spec"])
    name, opts = cfg.get("scm"), dict(cfg.get("scm_options") or {})
    if name == "binary":
        return _scm.binary_scm()
    if name == "reference":
        return _scm.reference_scm()
    if name == "linear":
        return _scm.linear_scm(**opts)
    if name == "nonlinear":
        return _scm.nonlinear_scm(**opts)
    raise CliError("config", "a structural model (scm or spec) is required")


def _cohort_from(cfg: dict[str, Any]) -> _cohort.Cohort:
    if cfg.get("data") is not None:
        schema = _cohort.RoleSchema.from_dict(cfg["schema"])
        if cfg.get("x0_label") is not None:
            schema.x0_label, schema.x1_label = cfg["x0_label"], cfg["x1_label"]
        return _cohort.load_csv(cfg["data"], schema)
    return _scm.sample(_spec_from(cfg), cfg["n"], cfg["sample_seed"])


def _contrast(cfg: dict[str, Any]) -> tuple[int, int]:
    """Exposure coding for SCM data: labels '0'/'1' may be swapped to reverse the contrast."""
    if cfg.get("data") is not None or cfg.get("x0_label") is None:
        return 0, 1
    x0, x1 = int(cfg["x0_label"]), int(cfg["x1_label"])
    if {x0, x1} - {0, 1}:
        raise CliError("config", "x0_label/x1_label must be 0 or 1 for simulated data")
    return x0, x1


def _mode(cfg):
    return _est.EstimatorMode(cfg["mode"], tuple(cfg["breaks"]))


def _learners(cfg):
    return LearnerSet.from_dict(cfg["learners"])


# ---------------------------------------------------------------------------
# commands


def _cmd_simulate(cfg):
    spec = _spec_from(cfg)
    c = _scm.sample(spec, cfg["n"], cfg["sample_seed"])
    summary = {"n": c.n, "x1_rate": float(c.x.mean()), "y_mean": float(c.y.mean()), "columns": c.columns,
               "spec": spec.to_dict()}
    return summary, c


def _query_from(cfg) -> _oracle.EffectQuery:
    q = cfg["query"].replace("-", "_")
    kind = {"mean_yx": "mean_Yx"}.get(q, q)
    x0, x1 = _contrast(cfg)
    return _oracle.EffectQuery(kind, x0, x1, cfg["mediators"])


def _cmd_oracle(cfg):
    spec = _spec_from(cfg)
    q = _query_from(cfg)
    if cfg["method"] == "mc":
        r = _oracle.mc_counterfactual(spec, q, cfg["n_mc"], cfg["seed"])
        return {"query": q.to_dict(), "value": r.value, "std_error": r.std_error, "n_mc": r.n_mc,
                "seed": r.seed, "method": r.method}, None
    if cfg["method"] == "exact":
        val = _oracle.exact_value(spec, q)
    else:
        val = _oracle.identified_effect(_oracle.exact_joint(spec), q)
    return {"query": q.to_dict(), "value": val, "std_error": 0.0, "n_mc": 0, "seed": cfg["seed"],
            "method": cfg["method"]}, None


def _cmd_estimate(cfg):
    c = _cohort_from(cfg)
    x0, x1 = _contrast(cfg)
    res = _est.estimate_effects(c, cfg["effects"], x0, x1, cfg["folds"], _mode(cfg), _learners(cfg),
                                cfg["seed"], cfg["clip"], cfg["jobs"], cfg["level"])
    out = {"estimates": [r.to_dict() for r in res.values()], "n": c.n}
    if c.meta:
        out["ingest"] = dict(c.meta)
    return out, None


def _cmd_bootstrap(cfg):
    c = _cohort_from(cfg)
    x0, x1 = _contrast(cfg)
    res = _inf.bootstrap_effects(c, cfg["effects"], x0, x1, cfg["bootstrap"], cfg["level"], _mode(cfg),
                                 _learners(cfg), cfg["seed"], cfg["folds"], cfg["clip"], cfg["jobs"])
    return {"estimates": [r.to_dict() for r in res.values()], "n": c.n}, None


def _cmd_conditional(cfg):
    c = _cohort_from(cfg)
    x0, x1 = _contrast(cfg)
    b = _inf.conditional_vde(c, cfg["axis1"], cfg["axis2"], cfg["edges1"], cfg["edges2"], cfg["min_count"],
                             _mode(cfg), _learners(cfg), cfg["seed"], x0, x1, cfg["folds"], cfg["clip"],
                             cfg["jobs"])
    return b.to_dict(), b.to_rows()


def _cmd_diagnose(cfg):
    c = _cohort_from(cfg)
    x0, x1 = _contrast(cfg)
    run = _est.crossfit(c, ("m1", "vde"), x0, x1, cfg["folds"], _mode(cfg), _learners(cfg), cfg["clip"],
                        cfg["seed"], cfg["jobs"])
    d = _inf.nuisance_mean_diagnostics(run)
    return {"n": d.n, "small_sample": d.small_sample, "median_abs_deviation_pre": d.median_deviation("pre"),
            "median_abs_deviation_post": d.median_deviation("post"),
            "clipped_fraction": run.clipped_fraction, "rows": d.rows}, d.rows


def _cmd_study(cfg):
    spec = _spec_from(cfg)
    if cfg["kind"] == "convergence":
        st = _inf.convergence_study(spec, cfg["sizes"], cfg["replications"], cfg["modes"], _learners(cfg),
                                    cfg["seed"], cfg["folds"], cfg["clip"], cfg["n_mc"], cfg["level"], cfg["jobs"])
    else:
        st = _inf.imbalance_study(spec, cfg["etas"], cfg["n"], cfg["replications"], _learners(cfg), _mode(cfg),
                                  cfg["seed"], cfg["effects"], cfg["folds"], cfg["clip"], cfg["n_mc"], cfg["jobs"])
    return {"grid": st.grid_name, "reference": st.reference, "replications": st.replications,
            "records": st.records}, st.records


def _cmd_ingest(cfg):
    if cfg.get("events") is not None:
        ev = pd.read_csv(cfg["events"])
        ranges = {k: tuple(v) for k, v in (cfg.get("value_ranges") or {}).items()}
        wide = _cohort.aggregate_events(ev, cfg["gamma"], cfg["spo2_channel"], cfg["sao2_channel"],
                                        cfg["delta_channel"], cfg["window"], ranges)
        report: dict[str, Any] = {"stays": int(len(wide)), "columns": list(wide.columns)}
        if cfg.get("filters"):
            wide, excluded = _cohort.filter_frame(wide, _cohort.FilterRules.from_dict(cfg["filters"]))
            report["excluded"] = excluded
            report["kept"] = int(len(wide))
        return report, wide
    df = pd.read_csv(cfg["data"], dtype=str)
    report = {"rows_read": int(len(df))}
    if cfg.get("filters"):
        df, excluded = _cohort.filter_frame(df, _cohort.FilterRules.from_dict(cfg["filters"]))
        report["excluded"] = excluded
    if cfg.get("schema"):
        c = _cohort.from_frame(df, _cohort.RoleSchema.from_dict(cfg["schema"]))
        report.update({k: v for k, v in c.meta.items() if k != "rows_read"})
        report["kept"] = c.n
        return report, c
    report["kept"] = int(len(df))
    return report, df


HANDLERS = {
    "simulate": _cmd_simulate, "oracle": _cmd_oracle, "estimate": _cmd_estimate, "bootstrap": _cmd_bootstrap,
    "conditional": _cmd_conditional, "diagnose": _cmd_diagnose, "study": _cmd_study, "ingest": _cmd_ingest,
}


# ---------------------------------------------------------------------------
# output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_table(table, path: str) -> None:
    if isinstance(table, _cohort.Cohort):
        _cohort.write_csv(table, path)
    elif isinstance(table, pd.DataFrame):
        table.to_csv(path, index=False)
    else:
        rows = list(table)
        with open(path, "w", newline="") as fh:
            if not rows:
                return
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(_jsonable(rows))


def _emit(doc: dict[str, Any], stream) -> str:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=False)
    stream.write(text + "\n")
    return text


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            flags = [a for a in extra if a.startswith("-")] or extra
            raise CliError("usage", f"unrecognized arguments: {' '.join(extra)}", flags=flags)
        if args.command is None:
            raise CliError("usage", f"a subcommand is required: one of {', '.join(COMMANDS)}")
        cfg = resolve_config(args)
    except CliError as exc:
        _emit({"error": exc.kind, "message": str(exc), **exc.detail}, stderr)
        return 2
    try:
        result, table = HANDLERS[args.command](cfg)
    except CliError as exc:
        _emit({"error": exc.kind, "message": str(exc), **exc.detail}, stderr)
        return 2
    except (ValueError, np.linalg.LinAlgError, OSError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc), "config": cfg}, stderr)
        return 1
    doc = {"command": args.command, "version": __version__, "result": result, "config": cfg}
    text = _emit(doc, stdout)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.csv and table is not None:
        _write_table(table, args.csv)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
