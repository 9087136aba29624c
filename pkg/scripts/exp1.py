"""Exp1: one-dimensional problem with constant noise variance.

    python scripts/exp1.py --reps 20
"""
import argparse

from _common import Experiment, add_common_args, apply_args, run_experiment

EXP1 = Experiment(problem="exp1", T=1000, d0_size=6, r0=50, algorithms=("qml",), out="results/exp1")

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common_args(p, EXP1)
    p.add_argument("--baseline", action="store_true", help="also run the single-level baseline")
    args = p.parse_args()
    exp = apply_args(EXP1, args)
    if args.baseline:
        exp.algorithms = ("qml", "q-baseline")
    run_experiment(exp)
