"""Shared helpers for the experiment scripts."""
from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

from qmlopt.bench import run_macro
from qmlopt.optimizer import OptimizerConfig
from qmlopt.sim_core import get_problem


@dataclasses.dataclass
class Experiment:
    """One problem run under one or more algorithms."""

    problem: str
    dim: int | None = None
    T: int = 1000
    d0_size: int | None = None
    r0: int = 20
    levels: tuple = (0.6, 0.95)
    n_reps: int = 20
    algorithms: tuple = ("qml", "q-baseline")
    seed: int = 0
    jobs: int = 1
    out: str = "results"

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(T=self.T, d0_size=self.d0_size, r0=self.r0, levels=tuple(self.levels))


def add_common_args(parser, exp: Experiment) -> None:
    parser.add_argument("--reps", type=int, default=exp.n_reps)
    parser.add_argument("--seed", type=int, default=exp.seed)
    parser.add_argument("--jobs", type=int, default=exp.jobs)
    parser.add_argument("--out", default=exp.out)


def apply_args(exp: Experiment, args) -> Experiment:
    return dataclasses.replace(exp, n_reps=args.reps, seed=args.seed, jobs=args.jobs, out=args.out)


def run_experiment(exp: Experiment) -> dict:
    """Run every algorithm of ``exp`` and print a one-line summary for each."""
    pb = get_problem(exp.problem, exp.dim)
    cfg = exp.optimizer_config()
    out = {}
    for alg in exp.algorithms:
        t = time.time()
        target = Path(exp.out) / pb.key / alg
        s = run_macro(cfg, pb, exp.n_reps, alg, jobs=exp.jobs, out_dir=target, master_seed=exp.seed)
        out[alg] = s
        print(f"{pb.key:>16s} {alg:>10s}: completed {s['n_completed']}/{s['n_reps']}, "
              f"true selection {s['true_selection_freq']}, mean S_0.99 {s['mean_s99']} "
              f"({s['frac_reaching_g99']} reaching), initial-model RMSE {s['mean_pred_error']}, "
              f"{time.time() - t:.0f}s -> {target}")
    Path(exp.out).mkdir(parents=True, exist_ok=True)
    (Path(exp.out) / f"{pb.key}_experiment.json").write_text(
        json.dumps(dataclasses.asdict(exp), indent=1, default=list) + "\n")
    return out
