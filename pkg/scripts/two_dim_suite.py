"""Ackley, Rastrigin and Levy with log-normal noise in two dimensions.

Nine levels up to 0.99 and T=1e5. About 30 minutes for 10 reps per algorithm
and problem on one core.

    python scripts/two_dim_suite.py --reps 10 --problems AckleyLogn LevyLogn
"""
import argparse
import dataclasses

from _common import Experiment, add_common_args, apply_args, run_experiment

LEVELS = (0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)
BASE = Experiment(problem="AckleyLogn", dim=2, T=100_000, d0_size=20, r0=50, levels=LEVELS, n_reps=10,
                  out="results/two_dim")
PROBLEMS = ("AckleyLogn", "RastriginLogn", "LevyLogn")

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common_args(p, BASE)
    p.add_argument("--problems", nargs="+", default=list(PROBLEMS), choices=PROBLEMS)
    args = p.parse_args()
    for pid in args.problems:
        run_experiment(dataclasses.replace(apply_args(BASE, args), problem=pid))
