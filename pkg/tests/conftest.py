import numpy as np
import pytest

from qmlopt.cokrige import ModelInputs


def smooth_levels(X, n_levels, rng):
    """Increasing smooth curves: level l = base + l * (0.5 + positive bump)."""
    w = rng.normal(size=(X.shape[1],))
    base = np.sin(3 * X @ w) + 0.3 * (X**2).sum(1)
    out = [base]
    for _ in range(1, n_levels):
        out.append(out[-1] + 0.5 + 0.2 * np.cos(2 * X @ w) ** 2)
    return np.array(out)


def make_inputs(rng, n=8, d=1, p=2, noise=0.0):
    X = rng.random((n, d))
    y = smooth_levels(X, p, rng)
    cov = np.zeros((n, p, p))
    if noise > 0:
        for i in range(n):
            A = rng.normal(size=(p, p))
            cov[i] = noise * (A @ A.T / p + 0.1 * np.eye(p))
    return ModelInputs(X, y, cov, lower=np.zeros(d), upper=np.ones(d))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
