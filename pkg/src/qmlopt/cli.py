"""Command-line entry point ``qmlopt``.

Subcommands::

    qmlopt optimize --config run.yaml [--out DIR] [--seed S] [--reps N] [--jobs J] [--algorithm qml|q-baseline]
    qmlopt validate-estimators [--config est.yaml]
    qmlopt export-plotdata DIR [--out DIR]
    qmlopt defaults [optimize|validate-estimators]

Exit codes: 0 success, 1 configuration/input error, 2 some replications failed.
Environment: ``QMLOPT_OUT`` overrides the output directory and
``QMLOPT_JOBS`` the worker count; command-line flags win over both.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import bench
from .cokrige import FitOptions
from .optimizer import ALGORITHMS, OptimizerConfig
from .quantile_est import DEFAULT_N_BATCHES, validate_estimators
from .sim_core import PROBLEM_IDS, get_problem

logger = logging.getLogger("qmlopt")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


# ----------------------------------------------------------------------------
# config loading

RUN_KEYS = {"problem", "dim", "custom", "noise_scale", "algorithm", "out", "n_reps", "jobs", "seed",
            "fault_reps", "optimizer"}
OPT_KEYS = {f.name for f in dataclasses.fields(OptimizerConfig)} - {"seed"}
FIT_KEYS = {f.name for f in dataclasses.fields(FitOptions)}
EST_KEYS = {"n", "n_panels", "levels", "n_b", "seed", "cov_tol", "var_tol"}


def _key_lines(text: str) -> dict:
    """Map dotted key paths of a YAML mapping to 1-based line numbers."""
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                out[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def load_yaml(path) -> tuple:
    """Parse a YAML file; returns ``(mapping, key_lines)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"{path}{where}: malformed YAML: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data, _key_lines(text)


def _where(key: str, lines: dict) -> str:
    return f"{key} (line {lines[key]})" if key in lines else key


def _reject_unknown(d: dict, allowed: set, prefix: str, lines: dict) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key {_where(prefix + str(k), lines)}; "
                              f"allowed: {', '.join(sorted(allowed))}")


@dataclasses.dataclass
class RunConfig:
    problem: str = "exp1"
    dim: Optional[int] = None
    custom: Optional[dict] = None
    noise_scale: Optional[float] = None
    algorithm: str = "qml"
    out: str = "results"
    n_reps: int = 1
    jobs: int = 1
    seed: int = 0
    fault_reps: list = dataclasses.field(default_factory=list)
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)

    def build_problem(self):
        pb = get_problem(self.problem, self.dim, self.custom)
        if self.noise_scale is not None:
            pb = pb.with_noise_scale(self.noise_scale)
        return pb

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        d["optimizer"].pop("seed")
        return d


def parse_run_config(data: dict, lines: Optional[dict] = None) -> RunConfig:
    """Validate a run mapping and build a ``RunConfig``.

    Every problem is reported as ``ConfigError`` naming the dotted key.
    """
    lines = lines or {}
    _reject_unknown(data, RUN_KEYS, "", lines)
    opt = dict(data.get("optimizer") or {})
    if not isinstance(opt, dict):
        raise ConfigError(f"{_where('optimizer', lines)}: must be a mapping")
    _reject_unknown(opt, OPT_KEYS, "optimizer.", lines)
    fit = opt.pop("fit", None)
    if fit is not None:
        if not isinstance(fit, dict):
            raise ConfigError(f"{_where('optimizer.fit', lines)}: must be a mapping")
        _reject_unknown(fit, FIT_KEYS, "optimizer.fit.", lines)
        opt["fit"] = dataclasses.replace(OptimizerConfig().fit, **fit)
    if "levels" in opt:
        try:
            opt["levels"] = tuple(float(a) for a in opt["levels"])
        except (TypeError, ValueError):
            raise ConfigError(f"{_where('optimizer.levels', lines)}: must be a list of numbers") from None

    top = {k: v for k, v in data.items() if k != "optimizer"}
    seed = int(top.get("seed", 0))
    try:
        cfg = OptimizerConfig(**opt, seed=seed)
    except TypeError as exc:
        raise ConfigError(f"optimizer: {exc}") from None
    rc = RunConfig(**top, optimizer=cfg)
    if str(rc.problem).lower() not in {p.lower() for p in PROBLEM_IDS}:
        raise ConfigError(f"{_where('problem', lines)}: unknown problem {rc.problem!r}; "
                          f"choose from {', '.join(PROBLEM_IDS)}")
    if rc.algorithm not in ALGORITHMS:
        raise ConfigError(f"{_where('algorithm', lines)}: must be one of {', '.join(ALGORITHMS)}")
    if int(rc.n_reps) < 1:
        raise ConfigError(f"{_where('n_reps', lines)}: must be at least 1")
    if int(rc.jobs) == 0:
        raise ConfigError(f"{_where('jobs', lines)}: must be nonzero")
    try:
        pb = rc.build_problem()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{_where('problem', lines)}: {exc}") from None
    try:
        cfg.validate(pb.dim)
    except ValueError as exc:
        key = str(exc).split(":", 1)[0]
        raise ConfigError(f"{_where('optimizer.' + key, lines)}: {str(exc).split(':', 1)[-1].strip()}") from None
    return rc


# ----------------------------------------------------------------------------
# commands

def _env_int(name: str) -> Optional[int]:
    v = os.environ.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {v!r}") from None


def cmd_optimize(args) -> int:
    if not args.config:
        raise ConfigError("optimize needs --config")
    data, lines = load_yaml(args.config)
    for flag, key in (("seed", "seed"), ("reps", "n_reps"), ("algorithm", "algorithm")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    env_out, env_jobs = os.environ.get("QMLOPT_OUT"), _env_int("QMLOPT_JOBS")
    if env_out:
        data["out"] = env_out
    if env_jobs is not None:
        data["jobs"] = env_jobs
    if args.out is not None:
        data["out"] = args.out
    if args.jobs is not None:
        data["jobs"] = args.jobs
    rc = parse_run_config(data, lines)
    problem = rc.build_problem()
    print(f"running {rc.n_reps} replication(s) of {rc.algorithm} on {problem.key} -> {rc.out}")
    summary = bench.run_macro(rc.optimizer, problem, int(rc.n_reps), rc.algorithm, jobs=int(rc.jobs),
                              out_dir=rc.out, fault_reps=rc.fault_reps, master_seed=int(rc.seed))
    Path(rc.out, "run_config.json").write_text(json.dumps(rc.to_dict(), indent=1, sort_keys=True, default=str) + "\n")
    print(f"completed {summary['n_completed']}/{summary['n_reps']}; "
          f"true selection {summary['true_selection_freq']}; mean S_0.99 {summary['mean_s99']}")
    for f in summary["failed"]:
        print(f"  rep {f['rep']} failed: {f['error']}", file=sys.stderr)
    return EXIT_OK if summary["n_completed"] == summary["n_reps"] else EXIT_PARTIAL


def cmd_validate_estimators(args) -> int:
    opts = {}
    if args.config:
        data, lines = load_yaml(args.config)
        _reject_unknown(data, EST_KEYS, "", lines)
        opts = dict(data)
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        checks = validate_estimators(**opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"validate-estimators: {exc}") from None
    ok = True
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        ok &= c.passed
        note = " [low confidence]" if c.low_confidence else ""
        print(f"{status} {c.name}: n*mean = {c.observed:.4f}, limit = {c.expected:.4f}, "
              f"ratio = {c.ratio:.3f} (tol +/-{c.rel_tol:.0%}){note}")
    return EXIT_OK if ok else EXIT_PARTIAL


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _mean_by_index(curves):
    width = max(len(c) for c in curves)
    rows = []
    for i in range(width):
        vals = [c[i] for c in curves if i < len(c)]
        rows.append((i + 1, repr(float(np.mean(vals))), len(vals)))
    return rows


def cmd_export_plotdata(args) -> int:
    src = Path(args.trace_dir)
    traces = bench.load_traces(src) if src.is_dir() else []
    reports = bench.load_reports(src) if src.is_dir() else []
    if not traces:
        raise ConfigError(f"no traces found in {src}")
    out = Path(args.out) if args.out else src / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    curves = [r.g_curve for r in reports if r.g_curve]
    if curves:
        _write_csv(out / "g_curve.csv", ("k", "mean_g", "n_reps"), _mean_by_index(curves))
    best = [[r.v_true for r in t.rows] for t in traces if t.rows]
    if best:
        _write_csv(out / "best_so_far.csv", ("k", "mean_v_true", "n_reps"), _mean_by_index(best))
    hist = []
    for t in traces:
        rep = t.header.get("seed")
        for r in t.rows:
            for idx, n in sorted(r.alloc.items()):
                hist.append((rep, r.k, idx, n))
    _write_csv(out / "allocations.csv", ("seed", "k", "point", "n_added"), hist)
    print(f"wrote plot data for {len(traces)} trace(s) to {out}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    if args.what == "validate-estimators":
        d = {"n": 10_000, "n_panels": 500, "levels": [0.6, 0.95], "n_b": DEFAULT_N_BATCHES, "seed": 0,
             "cov_tol": 0.15, "var_tol": 0.10}
    else:
        d = RunConfig().to_dict()
        d["optimizer"]["fit"] = dataclasses.asdict(OptimizerConfig().fit)
    print(yaml.safe_dump(d, sort_keys=False), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmlopt", description="Multi-level quantile simulation optimisation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="run macro-replications from a YAML config")
    o.add_argument("--config", required=False)
    o.add_argument("--out")
    o.add_argument("--seed", type=int)
    o.add_argument("--reps", type=int)
    o.add_argument("--jobs", type=int)
    o.add_argument("--algorithm", choices=ALGORITHMS)
    o.set_defaults(func=cmd_optimize)

    v = sub.add_parser("validate-estimators", help="Monte Carlo check of the sectioning covariances")
    v.add_argument("--config")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_validate_estimators)

    e = sub.add_parser("export-plotdata", help="tidy CSVs of averaged curves from a results directory")
    e.add_argument("trace_dir")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_plotdata)

    d = sub.add_parser("defaults", help="print the default configuration as YAML")
    d.add_argument("what", nargs="?", default="optimize", choices=("optimize", "validate-estimators"))
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
