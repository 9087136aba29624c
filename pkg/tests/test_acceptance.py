"""Acceptance suite: one PASS/FAIL line per criterion at the agreed tolerances.

Run standalone with ``python tests/test_acceptance.py`` or through pytest.
Criterion 8 runs 60 optimiser runs at T=1e5 and takes roughly half an hour on
one core; everything else finishes in a few minutes.
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import qmc

from qmlopt.bench import run_macro
from qmlopt.cokrige import Hyperparams, ModelInputs, assemble, decomposed_loglik, fit, loglik
from qmlopt.optimizer import OptimizerConfig
from qmlopt.quantile_est import sectioning_panel, validate_estimators
from qmlopt.sim_core import RngStream, get_problem, simulate, true_argmin

HERE = Path(__file__).resolve().parent
MASTER_SEED = 0


def report(capsys, number, passed, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}", flush=True)


# ---------------------------------------------------------------------------
# 1. estimator asymptotics

def test_c1_estimator_asymptotics(capsys):
    t = time.time()
    checks = validate_estimators(n=10_000, n_panels=500, levels=(0.6, 0.95), seed=MASTER_SEED)
    dt = time.time() - t
    ok = all(c.passed for c in checks) and dt < 60
    detail = "; ".join(f"{c.name} ratio {c.ratio:.3f} (tol {c.rel_tol:.0%})" for c in checks)
    report(capsys, 1, ok, f"{detail}; {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. deterministic reductions

def _levels(X, p, rng):
    w = rng.normal(size=X.shape[1])
    base = np.sin(3 * X @ w) + 0.3 * (X**2).sum(1)
    return np.array([base + l * (0.5 + 0.2 * np.cos(2 * X @ w) ** 2) for l in range(p)])


def _hyper(p, d, rng):
    return Hyperparams(rng.uniform(0.5, 1.5, p - 1), rng.uniform(0.05, 0.5, (p, d)), rng.uniform(0.5, 2.0, p))


def test_c2_model_reductions(capsys):
    rng = np.random.default_rng(MASTER_SEED)
    interp_err = 0.0
    for i in range(20):
        d = 1 + i % 2
        X = qmc.LatinHypercube(d=d, seed=rng).random(10)
        inp = ModelInputs(X, _levels(X, 1, rng), np.zeros((10, 1, 1)))
        mean = assemble(inp, _hyper(1, d, rng)).predict(X, 0)[0]
        interp_err = max(interp_err, float(np.max(np.abs(mean - inp.y[0]))))
    spatial = 0.0
    for p in (1, 2, 3):
        for d in (1, 2):
            X = qmc.LatinHypercube(d=d, seed=rng).random(9)
            A = rng.normal(size=(9, p, p))
            cov = 0.05 * (np.einsum("nij,nkj->nik", A, A) / p + 0.1 * np.eye(p))
            model = assemble(ModelInputs(X, _levels(X, p, rng), cov), _hyper(p, d, rng))
            for l in range(p):
                spatial = max(spatial, float(np.max(model.predict(X, l)[2])))
    ok = interp_err < 1e-6 and spatial < 1e-8
    report(capsys, 2, ok, f"max interpolation error {interp_err:.2e} (< 1e-6); "
                          f"max spatial variance at design {spatial:.2e} (< 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 3. likelihood decomposition

def test_c3_decomposition(capsys):
    rng = np.random.default_rng(MASTER_SEED)
    exact = 0.0
    for i in range(20):
        d = 1 + i % 2
        X = qmc.LatinHypercube(d=d, seed=rng).random(8)
        inp = ModelInputs(X, _levels(X, 2, rng), np.zeros((8, 2, 2)))
        h = _hyper(2, d, rng)
        exact = max(exact, abs(loglik(inp, h) - decomposed_loglik(inp, h).sum()))
    shrink = []
    X = np.linspace(0, 1, 8)[:, None]
    for _ in range(10):
        y = _levels(X, 2, rng)
        A = rng.normal(size=(8, 2, 2))
        base = np.einsum("nij,nkj->nik", A, A) / 2 + 0.1 * np.eye(2)
        h = Hyperparams([float(rng.uniform(0.7, 1.3))], [[0.03], [0.05]], [1.0, 0.5])
        gaps = [abs(loglik(ModelInputs(X, y, 0.1 * base / r), h)
                    - decomposed_loglik(ModelInputs(X, y, 0.1 * base / r), h).sum()) for r in (1, 10, 100)]
        # per-decade geometric mean: the signed difference can pass near zero
        # at an intermediate replication count, so a single ratio is no trend
        shrink.append(math.sqrt(gaps[0] / gaps[2]))
    ok = exact < 1e-6 and min(shrink) >= 5
    report(capsys, 3, ok, f"noise-free gap {exact:.2e} (< 1e-6); smallest per-decade shrink of the noisy gap "
                          f"over 1 -> 100 replications {min(shrink):.1f}x (>= 5x)")
    assert ok


# ---------------------------------------------------------------------------
# 4. non-crossing

def crossing_fixture(seed, n=8, reps=30, levels=(0.6, 0.95)):
    """Exp1 sectioning data with the level order flipped at one or two points."""
    pb = get_problem("exp1")
    rng = np.random.default_rng([seed, 4])
    X = qmc.LatinHypercube(d=1, seed=rng).random(n)
    panels = [sectioning_panel(simulate(pb, x, reps, RngStream(seed, i)), levels) for i, x in enumerate(X)]
    y = np.array([p.point_estimates for p in panels]).T
    cov = np.array([p.noise_cov for p in panels])
    idx = rng.choice(n, size=rng.integers(1, 3), replace=False)
    gap = np.abs(y[1, idx] - y[0, idx])
    y[1, idx] = y[0, idx] - rng.uniform(0.1, 0.5, idx.size) * gap
    return ModelInputs(X, y, cov, levels, pb.lower, pb.upper)


@pytest.mark.slow
def test_c4_non_crossing(capsys):
    tol = 1e-6
    first = resolved = used = tried = 0
    seed = 0
    while used < 50:
        inp = crossing_fixture(seed)
        seed += 1
        tried += 1
        if fit(inp, lam=0.0).kappa <= tol:
            continue
        used += 1
        res = fit(inp)
        first += res.escalations == 0 and res.kappa <= tol
        resolved += res.kappa <= tol
    ok = first >= 45 and resolved == 50
    report(capsys, 4, ok, f"{first}/50 non-crossing at default lambda (>= 45), {resolved}/50 after "
                          f"escalation (50 needed); {tried} fixtures drawn")
    assert ok


# ---------------------------------------------------------------------------
# 5. Exp1 reproduction

@pytest.mark.slow
def test_c5_exp1(capsys):
    pb = get_problem("exp1")
    cfg = OptimizerConfig(T=1000, d0_size=6, r0=50, levels=(0.6, 0.95))
    t = time.time()
    s = run_macro(cfg, pb, 20, "qml", master_seed=MASTER_SEED)
    dt = time.time() - t
    hits = [abs(r["final_x"][0] - 0.258) < 0.035 for r in s["reports"] if r["error"] is None]
    freq = sum(hits) / 20
    ok = freq >= 0.7 and dt < 300
    report(capsys, 5, ok, f"final x within 0.035 of 0.258 in {freq:.0%} of 20 reps (>= 70%); {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 7. Exp2 comparison

@pytest.fixture(scope="module")
def exp2_runs():
    pb = get_problem("exp2")
    cfg = OptimizerConfig(T=1000, r0=20, levels=(0.6, 0.95))
    t = time.time()
    out = {alg: run_macro(cfg, pb, 20, alg, master_seed=MASTER_SEED) for alg in ("qml", "q-baseline")}
    return out, time.time() - t


@pytest.mark.slow
def test_c6_exp2_selection(capsys, exp2_runs):
    runs, dt = exp2_runs
    q, b = runs["qml"]["true_selection_freq"], runs["q-baseline"]["true_selection_freq"]
    xs = float(true_argmin(get_problem("exp2"), 0.95)[0])
    ok = q is not None and b is not None and q >= b and q >= 0.6 and dt < 600
    report(capsys, 6, ok, f"true selection (x* = {xs:.4f}) QML {q:.0%} vs baseline {b:.0%} "
                          f"(QML >= baseline and >= 60%); {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_c7_initial_model_accuracy(capsys, exp2_runs):
    runs, _ = exp2_runs
    lo, hi = runs["qml"]["mean_pred_error"], runs["q-baseline"]["mean_pred_error"]
    ok = lo is not None and hi is not None and lo < hi
    report(capsys, 7, ok, f"mean holdout RMSE of initial model: level 0.6 {lo:.3f} < level 0.95 {hi:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 8. two-dimensional L1-L3

C8_LEVELS = (0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)


@pytest.mark.slow
def test_c8_two_dim_suite(capsys):
    cfg = OptimizerConfig(T=100_000, d0_size=20, r0=50, levels=C8_LEVELS)
    t = time.time()
    wins, lines = 0, []
    for pid in ("AckleyLogn", "RastriginLogn", "LevyLogn"):
        pb = get_problem(pid, dim=2)
        s = {alg: run_macro(cfg, pb, 10, alg, master_seed=MASTER_SEED) for alg in ("qml", "q-baseline")}
        # a run that never reaches G >= 0.99 counts as needing more than T
        m = {alg: (v["mean_s99"] if v["mean_s99"] is not None else math.inf) for alg, v in s.items()}
        wins += m["qml"] < m["q-baseline"]
        lines.append(f"{pid}: QML {m['qml']:.4g} ({s['qml']['frac_reaching_g99']:.0%} reach, final G "
                     f"{s['qml']['mean_final_g']:.3f}) vs baseline {m['q-baseline']:.4g} "
                     f"({s['q-baseline']['frac_reaching_g99']:.0%} reach, final G "
                     f"{s['q-baseline']['mean_final_g']:.3f})")
    dt = time.time() - t
    ok = wins >= 2 and dt < 3600
    report(capsys, 8, ok, f"QML lower mean S_0.99 on {wins}/3 problems (>= 2); {dt:.0f}s; " + "; ".join(lines))
    assert ok


# ---------------------------------------------------------------------------
# 9. property suites standalone

def test_c9_property_suites(capsys):
    t = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(HERE / "test_optimizer.py")], capture_output=True, text=True, cwd=HERE.parent)
    dt = time.time() - t
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and dt < 60
    report(capsys, 9, ok, f"optimizer property suite: {tail}; {dt:.0f}s (< 60s)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
