"""Five-dimensional Ackley, Rastrigin and Levy at T=1e6.

Long-running and not part of the test suite: a single replication takes hours
on one core. Use --jobs to spread replications over workers.

    python scripts/full_suite.py --reps 100 --jobs 16
"""
import argparse
import dataclasses

from _common import Experiment, add_common_args, apply_args, run_experiment
from two_dim_suite import LEVELS, PROBLEMS

BASE = Experiment(problem="AckleyLogn", dim=5, T=1_000_000, d0_size=50, r0=50, levels=LEVELS, n_reps=100,
                  out="results/full")

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common_args(p, BASE)
    p.add_argument("--problems", nargs="+", default=list(PROBLEMS), choices=PROBLEMS)
    args = p.parse_args()
    for pid in args.problems:
        run_experiment(dataclasses.replace(apply_args(BASE, args), problem=pid))
