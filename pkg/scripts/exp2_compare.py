"""Exp2: heteroscedastic one-dimensional problem, multi-level vs single-level.

    python scripts/exp2_compare.py --reps 20
"""
import argparse

from _common import Experiment, add_common_args, apply_args, run_experiment

EXP2 = Experiment(problem="exp2", T=1000, r0=20, out="results/exp2")

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common_args(p, EXP2)
    run_experiment(apply_args(EXP2, p.parse_args()))
