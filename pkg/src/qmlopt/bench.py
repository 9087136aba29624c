"""Macro-replication runner, run metrics and result files.

Metrics per replication:

* ``g_curve``: normalised gap reduction
  ``G_k = (v(x_0) - v(xhat_k)) / (v(x_0) - v(x*))`` with ``x_0`` the initial
  design point of smallest true objective, evaluated with the closed-form
  quantile only;
* ``s99``: cumulative simulator evaluations at the first row with
  ``G_k >= 0.99`` (``None`` if never reached);
* ``true_selection``: whether the reported optimum lies within the tolerance
  of the true minimiser;
* ``pred_error``: RMSE of the initial model at 1000 LHS holdout points.

Output directory layout::

    rep_000.csv   per-iteration trace (see ``trace.CSV_COLUMNS``)
    rep_000.json  trace header/rows plus the MetricReport
    summary.json  schema "v1", no timestamps
    summary.meta.json  timestamps and host info
"""
from __future__ import annotations

import json
import logging
import math
import platform
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .optimizer import ALGORITHMS, OptimizerConfig, baseline_config, run
from .sim_core import LossProblem, true_argmin, true_quantile, true_quantile_many
from .trace import CSV_COLUMNS, RunTrace, TraceRow, read_trace_csv

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA = "v1"
SELECTION_TOL = 0.035
G_TARGET = 0.99

__all__ = [
    "CSV_COLUMNS", "RunTrace", "TraceRow", "read_trace_csv", "MetricReport", "FaultInjected",
    "g_k", "s99", "true_selection", "pred_error", "rep_seed", "run_rep", "run_macro",
    "summarize", "load_reports",
]


class FaultInjected(RuntimeError):
    """Deliberate failure used to exercise crash handling."""


@dataclass
class MetricReport:
    rep: int
    seed: int
    algorithm: str
    g_curve: list = field(default_factory=list)
    s99: Optional[int] = None
    true_selection: Optional[bool] = None
    pred_error: Optional[float] = None
    final_x: Optional[list] = None
    final_v: Optional[float] = None
    eval_counts: list = field(default_factory=list)
    g_flagged: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def _objective_level(trace: RunTrace) -> float:
    return float(trace.header["levels"][-1])


def g_k(trace: RunTrace, problem: LossProblem, alpha: Optional[float] = None):
    """Normalised gap-reduction curve, one value per trace row.

    Returns ``(curve, flagged)``. When the best initial point is already
    optimal the denominator vanishes and the curve is all ones, flagged.
    """
    alpha = _objective_level(trace) if alpha is None else alpha
    D0 = np.asarray(trace.header["initial_design"], dtype=float)
    v0 = float(np.min(true_quantile_many(problem, D0, alpha)))
    v_star = true_quantile(problem, true_argmin(problem, alpha), alpha)
    v_star = min(v_star, v0)
    denom = v0 - v_star
    v = np.array([r.v_true for r in trace.rows], dtype=float)
    if denom <= 1e-12 * max(1.0, abs(v0)):
        return np.ones(v.size), True
    return (v0 - v) / denom, False


def s99(g_curve, eval_counts, target: float = G_TARGET) -> Optional[int]:
    """First cumulative evaluation count with ``G >= target``, else ``None``."""
    g = np.asarray(g_curve, dtype=float)
    hit = np.flatnonzero(g >= target)
    if hit.size == 0:
        return None
    return int(np.asarray(eval_counts)[hit[0]])


def true_selection(final_x, problem: LossProblem, tol: float = SELECTION_TOL,
                   alpha: float = 0.95) -> bool:
    """``|x - x*| < tol`` after scaling each coordinate by the domain width."""
    x = np.atleast_1d(np.asarray(final_x, dtype=float))
    xs = true_argmin(problem, alpha)
    dist = float(np.linalg.norm((x - xs) / problem.width))
    return dist < tol


def pred_error(model, problem: LossProblem, alpha: float, n: int = 1000, seed: int = 0,
               level: int = -1) -> float:
    """RMSE of ``model`` at ``n`` LHS holdout points against the true quantile."""
    u = qmc.LatinHypercube(d=problem.dim, seed=np.random.default_rng([seed, 99])).random(n)
    X = qmc.scale(u, problem.lower, problem.upper)
    pred = model.predict_mean(X, level)
    truth = true_quantile_many(problem, X, alpha)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def rep_seed(master_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(rep)]).generate_state(1, np.uint32)[0])


def run_rep(config: OptimizerConfig, problem: LossProblem, rep: int, algorithm: str = "qml",
            master_seed: Optional[int] = None, fault: bool = False):
    """One macro-replication; returns ``(MetricReport, RunTrace or None)``.

    Exceptions are caught and stored in ``MetricReport.error``.
    """
    master = config.seed if master_seed is None else master_seed
    seed = rep_seed(master, rep)
    report = MetricReport(rep=rep, seed=seed, algorithm=algorithm)
    try:
        if fault:
            raise FaultInjected(f"fault injected in replication {rep}")
        cfg = OptimizerConfig(**{**config.__dict__, "seed": seed})
        res = run(cfg, problem, algorithm=algorithm)
        trace = res.trace
        alpha = _objective_level(trace)
        curve, flagged = g_k(trace, problem, alpha)
        counts = trace.eval_counts()
        report.g_curve = [float(g) for g in curve]
        report.g_flagged = flagged
        report.eval_counts = [int(c) for c in counts]
        report.s99 = s99(curve, counts)
        report.final_x = [float(v) for v in res.final_x]
        report.final_v = true_quantile(problem, res.final_x, alpha)
        tol = SELECTION_TOL
        report.true_selection = true_selection(res.final_x, problem, tol, alpha)
        if res.initial_model is not None:
            report.pred_error = pred_error(res.initial_model, problem, res.initial_level, seed=seed)
        return report, trace
    except Exception as exc:  # a failed replication must not stop the batch
        logger.warning("replication %d failed: %s", rep, exc)
        report.error = f"{type(exc).__name__}: {exc}"
        logger.debug(traceback.format_exc())
        return report, None


def _mean(vals) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(reports: Sequence[MetricReport], meta: Optional[dict] = None) -> dict:
    """Aggregate per-replication reports; a pure function of its inputs."""
    reports = sorted(reports, key=lambda r: r.rep)
    done = [r for r in reports if r.ok]
    sel = [r.true_selection for r in done if r.true_selection is not None]
    reached = [r.s99 for r in done if r.s99 is not None]
    curves = [r.g_curve for r in done if r.g_curve]
    out = {
        "schema": SUMMARY_SCHEMA,
        **(meta or {}),
        "n_reps": len(reports),
        "n_completed": len(done),
        "failed": [{"rep": r.rep, "error": r.error} for r in reports if not r.ok],
        "true_selection_freq": float(np.mean(sel)) if sel else None,
        "mean_s99": _mean(reached),
        "frac_reaching_g99": len(reached) / len(done) if done else None,
        "mean_pred_error": _mean([r.pred_error for r in done]),
        "mean_final_g": _mean([c[-1] for c in curves]),
        "reports": [r.to_dict() for r in reports],
    }
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_rep(out_dir: Path, report: MetricReport, trace: Optional[RunTrace]) -> None:
    stem = Path(out_dir) / f"rep_{report.rep:03d}"
    payload = {"report": report.to_dict()}
    if trace is not None:
        Path(f"{stem}.csv").write_text(trace.to_csv())
        payload["trace"] = trace.to_dict()
    Path(f"{stem}.json").write_text(_dump(payload))


def load_reports(out_dir) -> list:
    """Read back every ``rep_*.json`` in ``out_dir``."""
    files = sorted(Path(out_dir).glob("rep_*.json"))
    return [MetricReport.from_dict(json.loads(f.read_text())["report"]) for f in files]


def load_traces(out_dir) -> list:
    out = []
    for f in sorted(Path(out_dir).glob("rep_*.json")):
        d = json.loads(f.read_text())
        if "trace" in d:
            out.append(RunTrace.from_dict(d["trace"]))
    return out


def run_macro(config: OptimizerConfig, problem: LossProblem, n_reps: int, algorithm: str = "qml",
              jobs: int = 1, out_dir=None, fault_reps: Sequence[int] = (),
              master_seed: Optional[int] = None) -> dict:
    """Run ``n_reps`` independently seeded replications and aggregate them.

    Replication ``i`` uses seed ``SeedSequence([master_seed, i])``, so results
    do not depend on ``jobs``. With ``out_dir`` set, per-replication CSV/JSON,
    ``summary.json`` and ``summary.meta.json`` are written there.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    master = config.seed if master_seed is None else master_seed
    faults = set(int(f) for f in fault_reps)
    started = time.time()
    args = [(config, problem, i, algorithm, master, i in faults) for i in range(n_reps)]
    if jobs != 1 and n_reps > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(delayed(run_rep)(*a) for a in args)
    else:
        results = [run_rep(*a) for a in args]

    cfg_used = baseline_config(config) if algorithm == "q-baseline" else config
    meta = {
        "algorithm": algorithm,
        "problem": problem.key,
        "master_seed": int(master),
        "config_hash": cfg_used.digest(problem.key),
        "config": cfg_used.to_dict() | {"fit": asdict(cfg_used.fit)},
    }
    reports = [r for r, _ in results]
    summary = summarize(reports, meta)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep, trace in results:
            write_rep(out, rep, trace)
        (out / "summary.json").write_text(_dump(summary))
        (out / "summary.meta.json").write_text(_dump({
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "elapsed_s": round(time.time() - started, 3),
            "python": platform.python_version(),
            "host": platform.node(),
        }))
    return summary


def summary_from_dir(out_dir) -> dict:
    """Recompute ``summary.json`` content from the per-replication files."""
    old = json.loads((Path(out_dir) / "summary.json").read_text())
    meta = {k: old[k] for k in ("algorithm", "problem", "master_seed", "config_hash", "config")
            if k in old}
    return summarize(load_reports(out_dir), meta)
