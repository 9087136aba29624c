"""Stochastic co-kriging over a ladder of quantile levels.

Level ``l`` of the model is ``Z_l = rho_{l-1} Z_{l-1} + delta_l`` with
independent Gaussian-correlation processes ``delta_l`` of constant mean
``beta_l``. Observations are ``Y_l(x) = Z_l(x) + eps_l(x)`` where the noise
vector ``eps(x)`` has a known (estimated) covariance across levels at the same
point and is independent across points.

Levels are indexed from 0 here; index ``p - 1`` is the top of the chain.

The autoregressive products are collected in an upper-triangular matrix
``c[j, s] = rho_j * ... * rho_{s-1}`` (``c[s, s] = 1``), so that

* the ``(k, s)`` block of ``R_z`` is ``sum_j sigma2_j c[j, k] c[j, s] A_j``,
* the trend matrix ``H`` has block ``(k, s) = c[s, k] * 1`` for ``k >= s``,
* ``h_l(x) = c[:, l]``.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

logger = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-4
SCHEMA = "qmlopt.cokrige/v1"


class FittingError(RuntimeError):
    """Covariance matrix could not be factorised, even with jitter."""


@dataclass
class Hyperparams:
    """Model parameters for a chain of ``p`` levels in ``d`` dimensions.

    ``theta[l, j]`` is a squared length-scale: the correlation is
    ``exp(-sum_j (x_j - x'_j)**2 / theta[l, j])``.
    """

    rho: np.ndarray
    theta: np.ndarray
    sigma2: np.ndarray
    beta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        p = self.sigma2.size
        if self.theta.shape[0] != p or self.rho.size != p - 1:
            raise ValueError(f"inconsistent hyperparameter shapes for {p} levels")
        if np.any(self.theta <= 0) or np.any(self.sigma2 <= 0):
            raise ValueError("theta and sigma2 must be strictly positive")

    @property
    def n_levels(self) -> int:
        return self.sigma2.size

    def to_dict(self) -> dict:
        return {
            "rho": self.rho.tolist(),
            "theta": self.theta.tolist(),
            "sigma2": self.sigma2.tolist(),
            "beta": None if self.beta is None else np.asarray(self.beta).tolist(),
        }


@dataclass
class ModelInputs:
    """Design, per-level point estimates and per-point noise covariances.

    Attributes
    ----------
    design : (n, d) array
    y : (p, n) array
        ``y[l, i]`` is the level-``l`` estimate at design point ``i``.
    noise_cov : (n, p, p) array
        Noise covariance of the estimates at each point.
    levels : (p,) array
        Quantile levels the rows of ``y`` belong to (labels only).
    lower, upper : (d,) arrays
        Domain box; defaults to the bounding box of the design.
    """

    design: np.ndarray
    y: np.ndarray
    noise_cov: np.ndarray
    levels: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        n, d = self.design.shape
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        p = self.y.shape[0]
        if self.y.shape != (p, n):
            raise ValueError(f"y must have shape (levels, {n}), got {self.y.shape}")
        nc = np.asarray(self.noise_cov, dtype=float)
        if nc.ndim == 2 and p == 1:
            nc = nc.reshape(n, 1, 1)
        if nc.shape != (n, p, p):
            raise ValueError(f"noise_cov must have shape ({n}, {p}, {p}), got {nc.shape}")
        self.noise_cov = nc
        self.levels = (np.arange(p, dtype=float) if self.levels is None
                       else np.asarray(self.levels, dtype=float))
        self.lower = self.design.min(axis=0) if self.lower is None else np.asarray(self.lower, float)
        self.upper = self.design.max(axis=0) if self.upper is None else np.asarray(self.upper, float)

    @property
    def n_points(self) -> int:
        return self.design.shape[0]

    @property
    def n_levels(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.design.shape[1]

    @property
    def y_stacked(self) -> np.ndarray:
        return self.y.ravel()

    @functools.cached_property
    def sqdist(self) -> np.ndarray:
        """Per-dimension squared differences between design points, (n, n, d)."""
        return sq_diffs(self.design, self.design)

    @functools.cached_property
    def r_eps(self) -> np.ndarray:
        """Block noise matrix: block ``(k, s)`` is ``diag(noise_cov[:, k, s])``."""
        n, p = self.n_points, self.n_levels
        out = np.zeros((p * n, p * n))
        idx = np.arange(n)
        for k in range(p):
            for s in range(p):
                out[k * n + idx, s * n + idx] = self.noise_cov[:, k, s]
        return out

    def subset(self, level_idx: Sequence[int]) -> "ModelInputs":
        """Inputs restricted to the given levels (in the order given)."""
        li = np.asarray(level_idx, dtype=int)
        return ModelInputs(self.design, self.y[li], self.noise_cov[:, li][:, :, li],
                           self.levels[li], self.lower, self.upper)


def sq_diffs(X1, X2) -> np.ndarray:
    X1, X2 = np.atleast_2d(X1), np.atleast_2d(X2)
    return (X1[:, None, :] - X2[None, :, :]) ** 2


def corr_from_sq(sq, theta) -> np.ndarray:
    # a 2-D matvec is markedly faster than the stacked 3-D one
    flat = sq.reshape(-1, sq.shape[-1]) @ (1.0 / np.asarray(theta, dtype=float))
    return np.exp(-flat).reshape(sq.shape[:-1])


def gauss_corr(X1, X2, theta) -> np.ndarray:
    """Gaussian correlation ``exp(-sum_j (x1_j - x2_j)^2 / theta_j)``."""
    return corr_from_sq(sq_diffs(X1, X2), theta)


def ar_products(rho) -> np.ndarray:
    """Upper-triangular ``c[j, s] = prod(rho[j:s])`` with unit diagonal."""
    rho = np.atleast_1d(rho)
    p = rho.size + 1
    c = np.zeros((p, p))
    for j in range(p):
        c[j, j] = 1.0
        for s in range(j + 1, p):
            c[j, s] = c[j, s - 1] * rho[s - 1]
    return c


def spatial_cov(design, hyper: Hyperparams, sqdist=None) -> np.ndarray:
    """``R_z`` for the stacked observation vector."""
    c = ar_products(hyper.rho)
    sq = sq_diffs(design, design) if sqdist is None else sqdist
    n = sq.shape[0]
    p = hyper.n_levels
    A = np.stack([corr_from_sq(sq, hyper.theta[j]) for j in range(p)])
    w = hyper.sigma2[:, None, None] * c[:, :, None] * c[:, None, :]
    # sum_j w[j, k, s] A_j[a, b] as one matrix product, then reorder to (k, a, s, b)
    R = np.tensordot(w, A, axes=(0, 0))
    return R.transpose(0, 2, 1, 3).reshape(p * n, p * n)


def trend_matrix(n: int, rho) -> np.ndarray:
    """``H`` with block ``(k, s) = c[s, k] * ones(n)`` for ``k >= s``."""
    return np.repeat(ar_products(rho).T, n, axis=0)


def chol_with_jitter(M: np.ndarray):
    """Cholesky factor of ``M``, adding diagonal jitter only if needed.

    Returns ``(factor, jitter)``; jitter escalates from 1e-8 to 1e-4 times the
    mean diagonal.
    """
    try:
        return linalg.cho_factor(M, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(M)))
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jit = rel * scale
        try:
            return linalg.cho_factor(M + jit * np.eye(len(M)), lower=True, check_finite=False), jit
        except linalg.LinAlgError:
            rel *= 10.0
    raise FittingError("covariance matrix not positive definite after jitter")


def _logdet(cf) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def _tri_solve(cf, B):
    return linalg.solve_triangular(cf[0], B, lower=True, check_finite=False)


class _GLS:
    """GLS quantities for one covariance matrix (R or R_z)."""

    def __init__(self, cov, H, y):
        self.cf, self.jitter = chol_with_jitter(cov)
        self.W = _tri_solve(self.cf, H)
        G = self.W.T @ self.W
        self.G_cf, _ = chol_with_jitter(G)
        wy = _tri_solve(self.cf, y)
        self.beta = linalg.cho_solve(self.G_cf, self.W.T @ wy)
        self.resid_w = wy - self.W @ self.beta
        self.alpha = linalg.cho_solve(self.cf, y - H @ self.beta)

    def loglik(self) -> float:
        return -0.5 * _logdet(self.cf) - 0.5 * float(self.resid_w @ self.resid_w)

    def variance(self, prior, T, h):
        """Predictive variance for columns of ``T`` (stacked t vectors)."""
        V = _tri_solve(self.cf, T)
        zeta = h - self.W.T @ V
        corr = np.sum(zeta * linalg.cho_solve(self.G_cf, zeta), axis=0)
        return prior - np.sum(V**2, axis=0) + corr


class AssembledModel:
    """Co-kriging model with fixed hyperparameters, ready for prediction.

    Immutable after construction. ``predict`` works on batches of points.
    """

    def __init__(self, inputs: ModelInputs, hyper: Hyperparams):
        if hyper.n_levels != inputs.n_levels:
            raise ValueError("hyperparameters and inputs disagree on the number of levels")
        if hyper.theta.shape[1] != inputs.dim:
            raise ValueError("theta must have one entry per input dimension")
        self.inputs = inputs
        n = inputs.n_points
        self.c = ar_products(hyper.rho)
        self.r_z = spatial_cov(inputs.design, hyper, inputs.sqdist)
        self.r = self.r_z + inputs.r_eps
        self.h_matrix = trend_matrix(n, hyper.rho)
        self._gls = _GLS(self.r, self.h_matrix, inputs.y_stacked)
        self.hyper = replace(hyper, beta=self._gls.beta.copy())
        self.jitter = self._gls.jitter

    @property
    def n_levels(self) -> int:
        return self.hyper.n_levels

    @property
    def beta(self) -> np.ndarray:
        return self.hyper.beta

    @functools.cached_property
    def _gls_spatial(self) -> _GLS:
        return _GLS(self.r_z, self.h_matrix, self.inputs.y_stacked)

    @functools.cached_property
    def loglik(self) -> float:
        return self._gls.loglik()

    def _check_level(self, level: int) -> int:
        p = self.n_levels
        if not -p <= level < p:
            raise IndexError(f"level {level} out of range for a {p}-level model")
        return level % p

    def _cross_cov(self, level: int, X) -> np.ndarray:
        """Stacked ``t_l(x)`` vectors, one column per row of ``X``."""
        hp, c, D = self.hyper, self.c, self.inputs.design
        cols = None
        for j in range(level + 1):
            coef = hp.sigma2[j] * c[j, level]
            if coef == 0.0:
                continue
            block = np.kron(c[j][:, None], gauss_corr(D, X, hp.theta[j])) * coef
            cols = block if cols is None else cols + block
        if cols is None:
            cols = np.zeros((self.r.shape[0], len(X)))
        return cols

    def prior_var(self, level: int) -> float:
        level = self._check_level(level)
        return float(np.sum(self.c[:, level] ** 2 * self.hyper.sigma2))

    @functools.cached_property
    def _process_weights(self) -> np.ndarray:
        # w[j] = sigma2_j * sum_s c[j, s] alpha_s, so that the level-l mean is
        # c[:, l] . (beta + A_j(X, D) w[j])
        n = self.inputs.n_points
        alpha = self._gls.alpha.reshape(self.n_levels, n)
        return self.hyper.sigma2[:, None] * (self.c @ alpha)

    def predict_means(self, X=None, sq=None) -> np.ndarray:
        """Predictive means of every level, shape ``(p, len(X))``.

        ``sq`` may carry precomputed ``sq_diffs(X, design)``.
        """
        if sq is None:
            sq = sq_diffs(np.atleast_2d(np.asarray(X, dtype=float)), self.inputs.design)
        w = self._process_weights
        g = np.stack([corr_from_sq(sq, self.hyper.theta[j]) @ w[j] for j in range(self.n_levels)])
        return self.c.T @ (self.beta[:, None] + g)

    def predict_mean(self, X, level: int = -1) -> np.ndarray:
        level = self._check_level(level)
        return self.predict_means(X)[level]

    def predict(self, X, level: int = -1, spatial: bool = True):
        """Mean, full variance and spatial-only variance at rows of ``X``.

        The full variance uses ``R = R_z + R_eps``; the spatial variance
        replaces ``R`` by ``R_z`` and is zero at design points, which is what
        keeps expected improvement from reselecting them. Both variances are
        clamped at zero.
        """
        level = self._check_level(level)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = self._cross_cov(level, X)
        h = np.repeat(self.c[:, level][:, None], len(X), axis=1)
        mean = self.c[:, level] @ self.beta + T.T @ self._gls.alpha
        prior = self.prior_var(level)
        var_full = np.maximum(self._gls.variance(prior, T, h), 0.0)
        if not spatial:
            return mean, var_full, None
        var_sp = np.maximum(self._gls_spatial.variance(prior, T, h), 0.0)
        return mean, var_full, var_sp

    def to_dict(self) -> dict:
        """JSON-ready dump: hyperparameters, design and estimates."""
        inp = self.inputs
        return {
            "schema": SCHEMA,
            "levels": inp.levels.tolist(),
            "design": inp.design.tolist(),
            "y": inp.y.tolist(),
            "noise_cov": inp.noise_cov.tolist(),
            "lower": inp.lower.tolist(),
            "upper": inp.upper.tolist(),
            "hyper": self.hyper.to_dict(),
            "jitter": self.jitter,
            "loglik": self.loglik,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AssembledModel":
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported model schema {data.get('schema')!r}")
        inp = ModelInputs(data["design"], data["y"], data["noise_cov"], data["levels"],
                          data["lower"], data["upper"])
        h = data["hyper"]
        return cls(inp, Hyperparams(h["rho"], h["theta"], h["sigma2"]))


def assemble(inputs: ModelInputs, hyper: Hyperparams) -> AssembledModel:
    return AssembledModel(inputs, hyper)


def predict(model: AssembledModel, level: int, x):
    """Scalar convenience wrapper: ``(mean, var_full, var_spatial)`` at ``x``."""
    m, vf, vs = model.predict(np.atleast_2d(x), level)
    return float(m[0]), float(vf[0]), float(vs[0])


def loglik(inputs: ModelInputs, hyper: Hyperparams) -> float:
    """Profile log-likelihood ``-0.5 ln|R| - 0.5 r' R^-1 r`` (``-inf`` if singular)."""
    try:
        H = trend_matrix(inputs.n_points, hyper.rho)
        cov = spatial_cov(inputs.design, hyper, inputs.sqdist) + inputs.r_eps
        return _GLS(cov, H, inputs.y_stacked).loglik()
    except FittingError:
        return -np.inf


def _single_level_loglik(resid, cov) -> float:
    H = np.ones((len(resid), 1))
    try:
        return _GLS(cov, H, resid).loglik()
    except FittingError:
        return -np.inf


def decomposed_term(inputs: ModelInputs, level: int, theta, sigma2, rho=None) -> float:
    """Log-likelihood of one level's autoregressive residual.

    Level 0 is ``Y_0`` under ``sigma2 A + N_00``; level ``j`` is
    ``Y_j - rho Y_{j-1}`` under
    ``sigma2 A + N_jj + rho^2 N_{j-1,j-1} - 2 rho N_{j-1,j}``.
    """
    A = sigma2 * corr_from_sq(inputs.sqdist, theta)
    nc = inputs.noise_cov
    if level == 0:
        return _single_level_loglik(inputs.y[0], A + np.diag(nc[:, 0, 0]))
    j = level
    resid = inputs.y[j] - rho * inputs.y[j - 1]
    noise = nc[:, j, j] + rho**2 * nc[:, j - 1, j - 1] - 2.0 * rho * nc[:, j - 1, j]
    return _single_level_loglik(resid, A + np.diag(noise))


def decomposed_loglik(inputs: ModelInputs, hyper: Hyperparams) -> np.ndarray:
    """Per-level terms whose sum approximates ``loglik`` (exact when noise-free)."""
    terms = [decomposed_term(inputs, 0, hyper.theta[0], hyper.sigma2[0])]
    for j in range(1, hyper.n_levels):
        terms.append(decomposed_term(inputs, j, hyper.theta[j], hyper.sigma2[j], hyper.rho[j - 1]))
    return np.array(terms)


# ----------------------------------------------------------------------------
# crossing penalty

def audit_grid(lower, upper, n: int = 512, seed: int = 0) -> np.ndarray:
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    u = qmc.LatinHypercube(d=lower.size, seed=seed).random(n)
    return qmc.scale(u, lower, upper)


def min_gap(model: AssembledModel, X=None, sq=None) -> tuple:
    """Smallest successive-level gap over rows of ``X``: ``(phi, argmin_row)``."""
    if model.n_levels < 2:
        return np.inf, None
    gaps = np.diff(model.predict_means(X, sq), axis=0).min(axis=0)
    i = int(np.argmin(gaps))
    return float(gaps[i]), i


def crossing_penalty(model: AssembledModel, grid=None, n_grid: int = 512,
                     polish_top: int = 5, seed: int = 0) -> tuple:
    """``(phi, kappa)`` for the model's predictive curves.

    ``phi`` is the minimum over the grid (512-point Latin hypercube over the
    domain plus the design points, unless ``grid`` is given) of
    ``Z_{l+1}(x) - Z_l(x)``, refined by bounded Nelder-Mead from the
    ``polish_top`` best grid points. ``kappa = max(0, -phi)``. A single-level
    model has no penalty.
    """
    phi, _ = _audit(model, grid, n_grid, polish_top, seed)
    return phi, max(0.0, -phi)


def _audit(model, grid=None, n_grid=512, polish_top=5, seed=0):
    # (phi, location of phi)
    if model.n_levels < 2:
        return np.inf, None
    inp = model.inputs
    if grid is None:
        grid = np.vstack([audit_grid(inp.lower, inp.upper, n_grid, seed), inp.design])
    gaps = np.diff(model.predict_means(grid), axis=0).min(axis=0)
    i0 = int(np.argmin(gaps))
    phi, where = float(gaps[i0]), grid[i0]
    bounds = list(zip(inp.lower, inp.upper))

    def gap_at(x):
        x = np.clip(x, inp.lower, inp.upper)[None, :]
        return min_gap(model, x)[0]

    for i in np.argsort(gaps)[:polish_top]:
        res = optimize.minimize(gap_at, grid[i], method="Nelder-Mead", bounds=bounds,
                                options={"maxfev": 200 * inp.dim, "xatol": 1e-8, "fatol": 1e-10})
        if res.fun < phi:
            phi, where = float(res.fun), np.clip(res.x, inp.lower, inp.upper)
    return phi, where


# ----------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class HyperBounds:
    """Box bounds on the hyperparameters of a ``p``-level chain."""

    theta_lo: np.ndarray
    theta_hi: np.ndarray
    sigma2_lo: np.ndarray
    sigma2_hi: np.ndarray
    rho_lo: float = 0.0
    rho_hi: float = 5.0


def default_bounds(inputs: ModelInputs) -> HyperBounds:
    """Length-scales within 1e-3..1e3 squared domain widths, variances within
    1e-6..1e2 of the per-level sample variance, rho in [0, 5]."""
    width2 = (inputs.upper - inputs.lower) ** 2
    width2 = np.where(width2 > 0, width2, 1.0)
    var = np.var(inputs.y, axis=1)
    var = np.where(var > 0, var, 1.0)
    return HyperBounds(1e-3 * width2, 1e3 * width2, 1e-6 * var, 1e2 * var)


@dataclass(frozen=True)
class FitOptions:
    """Search settings for ``fit``.

    The defaults are the full-strength settings; the sequential optimiser
    passes a lighter configuration because it refits every iteration.
    """

    n_starts: int = 8
    maxiter_per_param: int = 200
    stage1_starts: int = 3
    grid_size: int = 512
    polish_top: int = 5
    kappa_tol: float = 1e-6
    # the search penalises gaps below this margin so that the optimum does not
    # sit exactly on the boundary and dip below zero between penalty points
    penalty_margin: float = 1e-5
    max_refinements: int = 6
    max_escalations: int = 3
    perturb_scale: float = 0.15
    seed: int = 0


@dataclass
class FitResult:
    hyper: Hyperparams
    model: AssembledModel
    loglik: float
    phi: float
    kappa: float
    lam: float
    warm_start: Hyperparams
    escalations: int = 0
    flagged: bool = False
    audit_grid_size: int = 0
    messages: list = field(default_factory=list)
    crossing_at: Optional[np.ndarray] = None
    refinements: int = 0


class _Codec:
    """Maps hyperparameters to the unit cube (log scale for theta, sigma2)."""

    def __init__(self, bounds: HyperBounds, p: int, d: int):
        self.p, self.d = p, d
        lo = np.concatenate([np.log(np.broadcast_to(bounds.theta_lo, (p, d)).ravel()),
                             np.log(bounds.sigma2_lo[:p]), np.full(p - 1, bounds.rho_lo)])
        hi = np.concatenate([np.log(np.broadcast_to(bounds.theta_hi, (p, d)).ravel()),
                             np.log(bounds.sigma2_hi[:p]), np.full(p - 1, bounds.rho_hi)])
        self.lo, self.hi = lo, hi

    @property
    def size(self) -> int:
        return self.lo.size

    def decode(self, u) -> Hyperparams:
        v = self.lo + np.clip(u, 0.0, 1.0) * (self.hi - self.lo)
        p, d = self.p, self.d
        theta = np.exp(v[: p * d]).reshape(p, d)
        sigma2 = np.exp(v[p * d: p * d + p])
        return Hyperparams(v[p * d + p:], theta, sigma2)

    def encode(self, h: Hyperparams) -> np.ndarray:
        v = np.concatenate([np.log(h.theta).ravel(), np.log(h.sigma2), h.rho])
        return np.clip((v - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def _fit_decomposed(inputs: ModelInputs, bounds: HyperBounds, opts: FitOptions,
                    rng: np.random.Generator) -> Hyperparams:
    """Stage 1: maximise each decomposed term on its own parameters."""
    p, d = inputs.n_levels, inputs.dim
    theta = np.zeros((p, d))
    sigma2 = np.zeros(p)
    rho = np.zeros(p - 1)
    for lev in range(p):
        lo = np.concatenate([np.log(bounds.theta_lo), [np.log(bounds.sigma2_lo[lev])]])
        hi = np.concatenate([np.log(bounds.theta_hi), [np.log(bounds.sigma2_hi[lev])]])
        if lev > 0:
            lo = np.append(lo, bounds.rho_lo)
            hi = np.append(hi, bounds.rho_hi)

        def neg(u, lev=lev, lo=lo, hi=hi):
            v = lo + np.clip(u, 0, 1) * (hi - lo)
            r = v[d + 1] if lev > 0 else None
            ll = decomposed_term(inputs, lev, np.exp(v[:d]), np.exp(v[d]), r)
            return -ll if np.isfinite(ll) else 1e300

        k = lo.size
        # centre-ish start: moderate length-scale, variance near the sample variance
        u0 = np.full(k, 0.5)
        u0[:d] = 0.4
        if lev > 0:
            u0[-1] = (1.0 - bounds.rho_lo) / (bounds.rho_hi - bounds.rho_lo)
        starts = [u0] + [rng.uniform(0.05, 0.95, k) for _ in range(max(opts.stage1_starts - 1, 0))]
        best = None
        for s in starts:
            res = optimize.minimize(neg, s, method="Nelder-Mead", bounds=[(0, 1)] * k,
                                    options={"maxfev": opts.maxiter_per_param * k,
                                             "xatol": 1e-4, "fatol": 1e-8})
            if best is None or res.fun < best.fun:
                best = res
        v = lo + np.clip(best.x, 0, 1) * (hi - lo)
        theta[lev] = np.exp(v[:d])
        sigma2[lev] = np.exp(v[d])
        if lev > 0:
            rho[lev - 1] = v[d + 1]
    return Hyperparams(rho, theta, sigma2)


def fit(inputs: ModelInputs, bounds: Optional[HyperBounds] = None, lam: Optional[float] = None,
        options: Optional[FitOptions] = None, start: Optional[Hyperparams] = None) -> FitResult:
    """Penalised maximum likelihood fit of the co-kriging hyperparameters.

    Stage 1 maximises each decomposed likelihood term separately. Stage 2
    minimises ``Q = -loglik + lam * kappa`` over all parameters jointly with
    bounded Nelder-Mead from the stage-1 optimum, an optional caller-supplied
    ``start`` and random perturbations. ``kappa`` is evaluated on the audit
    grid without polishing during the search, against a small
    ``penalty_margin``; the winner is audited with
    polishing. A crossing found between penalty points is added to the
    penalty set and the search repeated at the same ``lam`` (up to
    ``max_refinements`` times); after that the fit is repeated with
    ``10 * lam`` while it still crosses.

    ``lam=None`` uses ``1e3 * (1 + |loglik at the warm start|)``; ``lam=0``
    gives the ordinary MLE.
    """
    opts = options or FitOptions()
    if inputs.n_points < 2:
        raise ValueError("fit needs at least two design points")
    bounds = bounds or default_bounds(inputs)
    p, d = inputs.n_levels, inputs.dim
    rng = np.random.default_rng(opts.seed)
    codec = _Codec(bounds, p, d)

    warm = _fit_decomposed(inputs, bounds, opts, rng)
    warm_ll = loglik(inputs, warm)
    if lam is None:
        lam = 1e3 * (1.0 + abs(warm_ll)) if np.isfinite(warm_ll) else 1e3
    grid = None
    penalty_pts = {}
    if p > 1:
        grid = np.vstack([audit_grid(inputs.lower, inputs.upper, opts.grid_size, opts.seed),
                          inputs.design])
        penalty_pts["X"] = grid
        penalty_pts["sq"] = sq_diffs(grid, inputs.design)

    def objective(u, lam_):
        h = codec.decode(u)
        try:
            model = AssembledModel(inputs, h)
        except FittingError:
            return 1e300
        q = -model.loglik
        if lam_ > 0 and p > 1:
            phi, _ = min_gap(model, sq=penalty_pts["sq"])
            q += lam_ * max(0.0, opts.penalty_margin - phi)
        return q

    starts = [codec.encode(warm)]
    if start is not None and start.n_levels == p and start.theta.shape[1] == d:
        starts.append(codec.encode(start))
    while len(starts) < max(opts.n_starts, 1):
        base = starts[0]
        starts.append(np.clip(base + opts.perturb_scale * rng.standard_normal(base.size), 0, 1))

    def search(lam_, seeds):
        best_u, best_q = None, np.inf
        for s in seeds:
            res = optimize.minimize(objective, s, args=(lam_,), method="Nelder-Mead",
                                    bounds=[(0, 1)] * codec.size,
                                    options={"maxfev": opts.maxiter_per_param * codec.size,
                                             "xatol": 1e-5, "fatol": 1e-9, "adaptive": codec.size > 4})
            if res.fun < best_q:
                best_u, best_q = np.clip(res.x, 0, 1), res.fun
        return best_u, best_q

    best_u, best_q = search(lam, starts)
    if best_u is None or best_q >= 1e300:
        raise FittingError("no start produced a factorisable covariance matrix")

    def add_penalty_point(x):
        X = np.vstack([penalty_pts["X"], x])
        penalty_pts.update(X=X, sq=sq_diffs(X, inputs.design))

    result = _finish(inputs, codec, best_u, lam, warm, grid, opts)
    refinements = 0
    # the audit may find a crossing between penalty points; penalise it there
    # and search again at the same lam before making lam larger
    while p > 1 and lam > 0 and result.kappa > opts.kappa_tol and refinements < opts.max_refinements:
        refinements += 1
        add_penalty_point(result.crossing_at)
        best_u, _ = search(lam, [best_u])
        result = _finish(inputs, codec, best_u, lam, warm, grid, opts)
    while p > 1 and lam > 0 and result.kappa > opts.kappa_tol and result.escalations < opts.max_escalations:
        lam *= 10.0
        esc = result.escalations + 1
        add_penalty_point(result.crossing_at)
        best_u, _ = search(lam, [best_u] + starts[:2])
        result = _finish(inputs, codec, best_u, lam, warm, grid, opts)
        result.escalations = esc
    result.refinements = refinements
    if p > 1 and lam > 0 and result.kappa > opts.kappa_tol:
        result.flagged = True
        result.messages.append(f"crossing persists after {result.escalations} escalations "
                               f"(kappa={result.kappa:.3g})")
    return result


def _finish(inputs, codec, u, lam, warm, grid, opts) -> FitResult:
    hyper = codec.decode(u)
    model = AssembledModel(inputs, hyper)
    phi, where = _audit(model, grid=grid, polish_top=opts.polish_top)
    return FitResult(model.hyper, model, model.loglik, phi, max(0.0, -phi), lam, warm,
                     audit_grid_size=0 if grid is None else len(grid), crossing_at=where)
