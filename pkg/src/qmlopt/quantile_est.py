"""Order-statistic quantile estimates and sectioning noise covariances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_N_BATCHES = 10


@dataclass(frozen=True)
class QuantilePanel:
    """Quantile estimates at one design point for a ladder of levels.

    Attributes
    ----------
    levels : (m,) array
        Increasing quantile levels.
    point_estimates : (m,) array
        Full-sample order-statistic estimates, one per level.
    noise_cov : (m, m) array
        Sectioning estimate of the covariance of the point estimates.
    n_used, n_b, n_c : int
        Total samples, batch count and batch size.
    low_confidence : bool
        Set when some level indexes below the first order statistic of a
        batch, i.e. ``floor(alpha * n_c) == 0``.
    """

    levels: np.ndarray
    point_estimates: np.ndarray
    noise_cov: np.ndarray
    n_used: int
    n_b: int
    n_c: int
    low_confidence: bool = False

    @property
    def noise_var(self) -> np.ndarray:
        return np.diag(self.noise_cov).copy()


def _order_index(alpha, n):
    # 0-based index of the floor(alpha*n)-th order statistic, clamped to [1, n]
    idx = np.floor(np.asarray(alpha, dtype=float) * n + 1e-9).astype(int)
    return np.clip(idx, 1, n) - 1


def empirical_quantile(samples, alpha):
    """The ``floor(alpha * n)``-th order statistic (1-based, clamped to [1, n]).

    ``alpha`` may be a scalar or an array of levels.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empirical_quantile needs at least one sample")
    idx = _order_index(alpha, x.size)
    if np.ndim(idx) == 0:
        return float(np.partition(x, int(idx))[int(idx)])
    return np.sort(x)[idx]


def sectioning_panel(samples, levels, n_b: int = DEFAULT_N_BATCHES) -> QuantilePanel:
    """Point estimates plus the sectioning covariance of the estimates.

    The sample is split, in order, into ``n_b`` consecutive batches of
    ``n_c = n // n_b`` runs; leftover runs only enter the full-sample
    estimates. For levels ``j, k``::

        cov[j, k] = sum_l (Y_jl - Y_j) (Y_kl - Y_k) / (n_b (n_b - 1))

    with ``Y_jl`` the batch-``l`` estimate and ``Y_j`` the full-sample one.
    """
    x = np.asarray(samples, dtype=float).ravel()
    levels = np.asarray(levels, dtype=float).ravel()
    if n_b < 2:
        raise ValueError("sectioning needs at least two batches")
    n = x.size
    n_c = n // n_b
    if n_c < 1:
        raise ValueError(f"{n} samples cannot fill {n_b} batches")

    full = np.sort(x)[_order_index(levels, n)]
    batches = np.sort(x[: n_b * n_c].reshape(n_b, n_c), axis=1)
    per_batch = batches[:, _order_index(levels, n_c)]
    dev = per_batch - full
    cov = dev.T @ dev / (n_b * (n_b - 1))
    low = bool(np.any(np.floor(levels * n_c + 1e-9) < 1))
    return QuantilePanel(levels, full, cov, n, n_b, n_c, low)


def normal_quantile_cov(p: float, q: float) -> float:
    """Limit of ``n * cov`` of the sample p- and q-quantiles of N(0, 1), ``p <= q``.

    ``p (1 - q) / (f(xi_p) f(xi_q))`` with ``f`` the standard normal density.
    """
    from scipy.stats import norm

    p, q = min(p, q), max(p, q)
    return p * (1 - q) / (norm.pdf(norm.ppf(p)) * norm.pdf(norm.ppf(q)))


@dataclass
class EstimatorCheck:
    """Monte Carlo mean of ``n * (sectioning estimate)`` against its limit."""

    name: str
    observed: float
    expected: float
    rel_tol: float
    low_confidence: bool = False

    @property
    def ratio(self) -> float:
        return self.observed / self.expected

    @property
    def passed(self) -> bool:
        return abs(self.ratio - 1.0) <= self.rel_tol


def validate_estimators(n: int = 10_000, n_panels: int = 500, levels=(0.6, 0.95),
                        n_b: int = DEFAULT_N_BATCHES, seed: int = 0,
                        cov_tol: float = 0.15, var_tol: float = 0.10) -> list:
    """Check sectioning covariances on standard-normal samples.

    Two checks: the cross-covariance of ``levels[0], levels[-1]`` and the
    variance at the median, each scaled by ``n`` and averaged over
    ``n_panels`` independent panels.
    """
    rng = np.random.default_rng(seed)
    a, b = float(levels[0]), float(levels[-1])
    lv = np.array([a, b, 0.5])
    cov_sum = var_sum = 0.0
    low = False
    for _ in range(n_panels):
        panel = sectioning_panel(rng.standard_normal(n), lv, n_b)
        cov_sum += panel.noise_cov[0, 1]
        var_sum += panel.noise_cov[2, 2]
        low |= panel.low_confidence
    return [
        EstimatorCheck(f"cov({a:g},{b:g})", float(n * cov_sum / n_panels), float(normal_quantile_cov(a, b)),
                       cov_tol, low),
        EstimatorCheck("var(0.5)", float(n * var_sum / n_panels), float(normal_quantile_cov(0.5, 0.5)),
                       var_tol, low),
    ]
