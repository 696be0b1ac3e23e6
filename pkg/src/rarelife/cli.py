"""Command-line entry point: ``rarelife generate|granger|run|sweep``.

A run is described by one JSON config with three optional sections::

    {"cohort": {...CohortConfig fields...},
     "experiment": {...ExperimentConfig fields...},
     "methods": ["mtad", "lstm_ed", "iforest"],
     "seeds": [0, 1, 2],
     "personalized": false,
     "input": "cohort.csv"}

Command-line flags override the file. Every run writes ``manifest.json``
holding the fully resolved config, which can be passed back via
``--config`` to repeat the run exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from rarelife import __version__
from rarelife.errors import ConfigError, DataError, NumericalError
from rarelife.evaluation import (
    BASE_METHODS,
    DECLARED_SWEEPS,
    ExperimentConfig,
    cohort_events,
    event_type_breakdown,
    run_methods,
    sweep,
    write_decisions,
    write_event_types,
    write_manifest,
    write_metrics,
    write_sweep,
)
from rarelife.granger import significance_counts
from rarelife.synthetic import CohortConfig, cohort_stats, generate_cohort, metadata, write_metadata
from rarelife.timeseries import UserSeries, read_cohort_csv, write_cohort_csv

logger = logging.getLogger("rarelife")

MANIFEST_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
DEFAULT_METHODS = ("mtad", "lstm_ed", "iforest")


@dataclasses.dataclass
class RunConfig:
    command: str
    out: Path
    cohort: CohortConfig
    experiment: ExperimentConfig
    methods: list[str]
    seeds: list[int]
    personalized: bool = False
    input: Path | None = None
    param: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.methods:
            raise ConfigError("methods must be non-empty")

    def manifest(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "command": self.command,
            "cohort": _jsonable(self.cohort.to_dict()),
            "experiment": _jsonable(dataclasses.asdict(self.experiment)),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "personalized": self.personalized,
            "input": str(self.input) if self.input else None,
            "param": self.param,
            "versions": {"rarelife": __version__, "numpy": np.__version__, "python": platform.python_version()},
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _build(cls, fields: dict):
    unknown = set(fields) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the JSON config with command-line flags (flags win)."""
    raw = _load_json(args.config)
    cohort = dict(raw.get("cohort", {}))
    experiment = dict(raw.get("experiment", {}))
    if getattr(args, "seed", None) is not None and args.command in ("generate", "granger"):
        cohort["seed"] = args.seed
    seeds = raw.get("seeds", list(range(10)))
    if getattr(args, "seeds", None):
        seeds = _int_list(args.seeds)
    methods = raw.get("methods", list(DEFAULT_METHODS))
    if getattr(args, "methods", None):
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    personalized = bool(raw.get("personalized", False)) or bool(getattr(args, "personalized", False))
    for m in methods:
        if m not in BASE_METHODS and not m.endswith("_pt"):
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(BASE_METHODS)}")
    inp = getattr(args, "input", None) or raw.get("input")
    out = args.out or raw.get("out")
    if not out:
        raise ConfigError("an output location is required (--out)")
    param = getattr(args, "param", None) or raw.get("param")
    return RunConfig(
        command=args.command,
        out=Path(out),
        cohort=_build(CohortConfig, cohort),
        experiment=_build(ExperimentConfig, experiment),
        methods=list(methods),
        seeds=[int(s) for s in seeds],
        personalized=personalized,
        input=Path(inp) if inp else None,
        param=param,
    )


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _cohort(cfg: RunConfig) -> list[UserSeries]:
    if cfg.input is not None:
        if not cfg.input.exists():
            raise DataError(f"input cohort not found: {cfg.input}")
        return read_cohort_csv(cfg.input)
    cohort, _ = generate_cohort(cfg.cohort)
    return cohort


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    return path


def cmd_generate(cfg: RunConfig) -> int:
    """Write ``cohort.csv`` and ``metadata.json`` under ``--out``."""
    out = _out_dir(cfg.out)
    cohort, events = generate_cohort(cfg.cohort)
    try:
        write_cohort_csv(cohort, out / "cohort.csv")
        write_metadata(out / "metadata.json", metadata(cfg.cohort, cohort, events))
    except OSError as exc:
        raise DataError(f"cannot write cohort files to {out}: {exc}") from exc
    stats = cohort_stats(cohort, events)
    print(f"wrote {stats['n_days']} days for {stats['n_users']} users; {stats['n_events']} events; anomaly ratio {stats['anomaly_ratio']:.6f}")
    return EXIT_OK


def cmd_granger(cfg: RunConfig) -> int:
    """Write ``granger.csv`` (feature, count, total) and ``granger.json``."""
    cohort = _cohort(cfg)
    report = significance_counts(cohort)
    if report.n_tested == 0:
        raise DataError(f"no eligible events ({len(report.skipped)} skipped)")
    out = _out_dir(cfg.out)
    report.write_csv(out / "granger.csv")
    report.write_json(out / "granger.json")
    reasons: dict[str, int] = {}
    for _, _, r in report.skipped:
        key = r.split(" (")[0] if "pre and" not in r else "fewer than 15 days on one side"
        reasons[key] = reasons.get(key, 0) + 1
    print(f"tested {report.n_tested} event series; skipped {len(report.skipped)}")
    for r, n in sorted(reasons.items()):
        print(f"  skipped {n}: {r}")
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    """Train, detect and score; writes metrics, decisions, event types, manifest."""
    out = _out_dir(cfg.out)
    write_manifest(out / "manifest.json", cfg.manifest())
    cohort = _cohort(cfg)
    result = run_methods(cohort, cfg.methods, cfg.seeds, cfg.experiment, cfg.personalized)
    write_metrics(out / "metrics.csv", result.rows.values())
    for sp in result.splits:
        write_decisions(out / f"decisions_{sp.seed}.csv", sp)
    events = cohort_events(cohort)
    method = next((m for m in ("mtad_pt", "mtad", "lstm_ed_pt", "lstm_ed", "iforest") if m in result.methods), result.methods[0])
    write_event_types(out / "event_types.csv", event_type_breakdown(result.splits, method, events))
    for m, row in result.rows.items():
        print(f"{m:15s} P={row.mean('precision'):.3f} R={row.mean('recall'):.3f} F1={row.mean('f1'):.3f} (std {row.std('f1'):.3f})")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Write ``sweep_<param>.csv`` with one row per value and method."""
    if cfg.param not in DECLARED_SWEEPS:
        raise ConfigError(f"--param must be one of {', '.join(DECLARED_SWEEPS)}, got {cfg.param!r}")
    out = _out_dir(cfg.out)
    write_manifest(out / "manifest.json", cfg.manifest())
    rows = sweep(cfg.param, _cohort(cfg), cfg.methods, cfg.seeds, cfg.experiment, personalized=cfg.personalized)
    write_sweep(out / f"sweep_{cfg.param}.csv", rows)
    for row in rows:
        value = row.window if cfg.param == "window_size" else row.lam
        print(f"{cfg.param}={value:<5g} {row.method:15s} F1={row.mean('f1'):.3f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "granger": cmd_granger, "run": cmd_run, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rarelife", description="Rare life event detection pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help=seed_help)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    common(p, "cohort generator seed")

    p = sub.add_parser("granger", help="pre/post event Granger analysis")
    common(p, "cohort generator seed (when no --input)")
    p.add_argument("--input", help="cohort CSV (default: generate from config)")

    for name, help_text in (("run", "train and evaluate methods"), ("sweep", "parameter sweep")):
        p = sub.add_parser(name, help=help_text)
        common(p, "run only this split seed")
        p.add_argument("--input", help="cohort CSV (default: generate from config)")
        p.add_argument("--methods", help=f"comma list from {','.join(BASE_METHODS)}")
        p.add_argument("--seeds", help="split seeds, e.g. 0-9 or 0,3,5")
        p.add_argument("--personalized", action="store_true", help="add per-user threshold variants")
        if name == "sweep":
            p.add_argument("--param", choices=sorted(DECLARED_SWEEPS), required=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command in ("run", "sweep") and args.seed is not None:
            args.seeds = str(args.seed)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
