"""Stochastic loss simulators with closed-form quantile oracles.

Every built-in problem has the form ``L(x) = mean(x) + noise(x)`` where the
noise is either ``Normal(0, scale(x)**2)`` or ``exp(Normal(0, scale(x)**2))``.
Both families have an exact quantile function, which the metrics and the test
suite use as ground truth.

Random numbers come from a counter-based generator (Philox) keyed on
``(master_seed, point_index)``. Replication ``j`` at a point always consumes
raw draw ``j`` of that point's stream, so samples can be appended in any
chunking and the concatenation is identical to a single call.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Philox, SeedSequence
from scipy import optimize, special
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import qmc

PROBLEM_IDS = ("Fig1", "Exp1", "Exp2", "AckleyLogn", "RastriginLogn", "LevyLogn", "Custom")
NOISE_FAMILIES = ("Normal", "Lognormal")


class DomainError(ValueError):
    """A point lies outside the problem's box domain."""


@dataclass(frozen=True, eq=False)
class LossProblem:
    """A stochastic loss ``mean_fn(x) + noise`` on an axis-aligned box.

    ``noise_fn`` returns the noise scale at ``x``: the standard deviation for
    the Normal family, the log-scale standard deviation for Lognormal.
    """

    id: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    mean_fn: Callable[[np.ndarray], float]
    noise_fn: Callable[[np.ndarray], float]
    noise_family: str = "Normal"
    name: str = ""

    def __post_init__(self):
        if self.id not in PROBLEM_IDS:
            raise ValueError(f"unknown problem id {self.id!r}")
        if self.noise_family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.noise_family!r}")
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.dim < 1 or lower.shape != (self.dim,) or upper.shape != (self.dim,):
            raise ValueError("domain bounds must have one entry per dimension")
        if np.any(lower >= upper):
            raise ValueError("domain lower bound must be below upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def key(self) -> str:
        return self.name or f"{self.id}-{self.dim}d"

    def check_point(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dim,):
            raise DomainError(f"expected a point of dimension {self.dim}, got shape {x.shape}")
        if np.any(x < self.lower) or np.any(x > self.upper):
            raise DomainError(f"point {x} outside domain [{self.lower}, {self.upper}]")
        return x

    def with_noise_scale(self, scale: float) -> "LossProblem":
        """Copy of the problem with a location-independent noise scale."""
        scale = float(scale)
        return LossProblem(self.id, self.dim, self.lower, self.upper, self.mean_fn,
                           lambda x: scale, self.noise_family, name=f"{self.key}-const{scale:g}")


@dataclass
class RngStream:
    """Position in the random stream of one design point."""

    master_seed: int
    point_index: int
    replication_counter: int = 0
    _key: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> np.ndarray:
        if self._key is None:
            ss = SeedSequence(int(self.master_seed) % 2**64, spawn_key=(int(self.point_index),))
            self._key = ss.generate_state(2, dtype=np.uint64)
        return self._key

    def standard_normals(self, n: int) -> np.ndarray:
        """Next ``n`` standard normal draws; advances the counter."""
        start = self.replication_counter
        block, offset = divmod(start, 4)
        counter = np.array([block, 0, 0, 0], dtype=np.uint64)
        raw = Philox(key=self.key, counter=counter).random_raw(offset + n)[offset:]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        self.replication_counter = start + n
        return special.ndtri(u)


def simulate(problem: LossProblem, x, n: int, stream: RngStream) -> np.ndarray:
    """Draw ``n`` i.i.d. losses at ``x`` from ``stream``."""
    if n < 1:
        raise ValueError("replication count must be at least 1")
    x = problem.check_point(x)
    scale = float(problem.noise_fn(x))
    if scale < 0:
        raise ValueError(f"negative noise scale {scale} at {x}")
    z = stream.standard_normals(int(n))
    mean = float(problem.mean_fn(x))
    if problem.noise_family == "Normal":
        return mean + scale * z
    return mean + np.exp(scale * z)


def true_quantile(problem: LossProblem, x, alpha: float) -> float:
    """Exact ``alpha``-quantile of ``L(x)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = problem.check_point(x)
    z = special.ndtri(alpha)
    scale = float(problem.noise_fn(x))
    if problem.noise_family == "Normal":
        return float(problem.mean_fn(x) + scale * z)
    return float(problem.mean_fn(x) + np.exp(scale * z))


def true_quantile_many(problem: LossProblem, X, alpha: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.array([true_quantile(problem, x, alpha) for x in X])


def true_argmin(problem: LossProblem, alpha: float, grid_size: Optional[int] = None,
                n_starts: int = 50, seed: int = 0) -> np.ndarray:
    """Minimiser of the true ``alpha``-quantile surface.

    1-D problems use a dense grid (10^4 points by default) followed by a
    bounded scalar polish around the best grid cell. Higher dimensions score a
    space-filling sample and polish the ``n_starts`` best points with
    Nelder-Mead.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return _true_argmin_cached(problem, float(alpha), grid_size, n_starts, seed).copy()


@functools.lru_cache(maxsize=128)
def _true_argmin_cached(problem, alpha, grid_size, n_starts, seed):
    lo, hi = problem.lower, problem.upper

    def f(x):
        x = np.clip(np.atleast_1d(x), lo, hi)
        return true_quantile(problem, x, alpha)

    if problem.dim == 1:
        n = grid_size or 10_000
        grid = np.linspace(lo[0], hi[0], n)
        vals = np.array([f(g) for g in grid])
        i = int(np.argmin(vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, n - 1)]
        res = optimize.minimize_scalar(lambda t: f(t), bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-10})
        best = np.array([res.x]) if res.fun <= vals[i] else np.array([grid[i]])
        return best

    n = grid_size or min(20_000 * problem.dim, 200_000)
    sample = qmc.scale(qmc.LatinHypercube(d=problem.dim, seed=seed).random(n), lo, hi)
    vals = np.array([f(s) for s in sample])
    starts = sample[np.argsort(vals)[:n_starts]]
    best_x, best_v = starts[0], vals.min()
    for s in starts:
        res = optimize.minimize(f, s, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                                options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 4000})
        if res.fun < best_v:
            best_x, best_v = np.clip(res.x, lo, hi), res.fun
    return np.asarray(best_x, dtype=float)


# ----------------------------------------------------------------------------
# built-in problems

def _exp_mean(x):
    t = x[0] - 0.02
    return 5.0 * (0.2 * t + 1.0) * np.cos(13.0 * t)


def _ackley(x):
    d = len(x)
    return (-20.0 * np.exp(-0.2 * np.sqrt(np.sum(x**2) / d))
            - np.exp(np.sum(np.cos(2 * np.pi * x)) / d) + 20.0 + np.e)


def _rastrigin(x):
    return 10.0 * len(x) + np.sum(x**2 - 10.0 * np.cos(2 * np.pi * x))


def _levy(x):
    w = 1.0 + (x - 1.0) / 4.0
    head = np.sin(np.pi * w[0]) ** 2
    mid = np.sum((w[:-1] - 1) ** 2 * (1 + 10 * np.sin(np.pi * w[:-1] + 1) ** 2))
    tail = (w[-1] - 1) ** 2 * (1 + np.sin(2 * np.pi * w[-1]) ** 2)
    return head + mid + tail


def fig1(**_) -> LossProblem:
    return LossProblem(
        "Fig1", 1, [0.0], [2.0],
        mean_fn=lambda x: np.sin(2.5 * x[0]) * np.sin(1.5 * x[0]),
        noise_fn=lambda x: np.sqrt(0.01 + 0.25 * (1 - np.sin(2.5 * x[0])) ** 2),
    )


def exp1(**_) -> LossProblem:
    return LossProblem("Exp1", 1, [0.0], [1.0], mean_fn=_exp_mean,
                       noise_fn=lambda x: np.sqrt(5.0 * x[0]))


def exp2(**_) -> LossProblem:
    return LossProblem("Exp2", 1, [0.0], [1.0], mean_fn=_exp_mean,
                       noise_fn=lambda x: np.sqrt(10.0 * (2.0 + np.sin(10 * np.pi * x[0] - 0.5))))


def ackley_logn(dim: int = 5, **_) -> LossProblem:
    return LossProblem("AckleyLogn", dim, np.full(dim, -10.0), np.full(dim, 10.0), _ackley,
                       lambda x: 1.6 + 0.01 * np.sum((x - 1.0) ** 2), "Lognormal")


def rastrigin_logn(dim: int = 5, **_) -> LossProblem:
    return LossProblem("RastriginLogn", dim, np.full(dim, -10.0), np.full(dim, 10.0), _rastrigin,
                       lambda x: 1.6 + 0.01 * np.sum((x - 1.0) ** 2), "Lognormal")


def levy_logn(dim: int = 5, **_) -> LossProblem:
    return LossProblem("LevyLogn", dim, np.full(dim, -10.0), np.full(dim, 10.0), _levy,
                       lambda x: 1.6 + 0.01 * np.sum(x**2), "Lognormal")


def custom_problem(lower: Sequence[float], upper: Sequence[float],
                   grid: Sequence[Sequence[float]], mean: Sequence, noise_scale: Sequence,
                   noise_family: str = "Normal", name: str = "custom") -> LossProblem:
    """Problem defined by tabulated mean and noise scale on a tensor grid.

    ``grid`` holds one increasing coordinate vector per dimension; ``mean`` and
    ``noise_scale`` are arrays of shape ``[len(g) for g in grid]``. Values in
    between are linearly interpolated.
    """
    axes = [np.asarray(g, dtype=float) for g in grid]
    mean_arr = np.asarray(mean, dtype=float)
    scale_arr = np.asarray(noise_scale, dtype=float)
    shape = tuple(len(a) for a in axes)
    if mean_arr.shape != shape or scale_arr.shape != shape:
        raise ValueError(f"mean/noise tables must have shape {shape}")
    if np.any(scale_arr <= 0):
        raise ValueError("noise scale must be strictly positive on the grid")
    mean_i = RegularGridInterpolator(axes, mean_arr)
    scale_i = RegularGridInterpolator(axes, scale_arr)
    return LossProblem("Custom", len(axes), lower, upper,
                       mean_fn=lambda x: float(mean_i(x[None, :])[0]),
                       noise_fn=lambda x: float(scale_i(x[None, :])[0]),
                       noise_family=noise_family, name=name)


_BUILDERS = {
    "Fig1": fig1,
    "Exp1": exp1,
    "Exp2": exp2,
    "AckleyLogn": ackley_logn,
    "RastriginLogn": rastrigin_logn,
    "LevyLogn": levy_logn,
}


@functools.lru_cache(maxsize=None)
def _cached_builtin(pid: str, dim: Optional[int]) -> LossProblem:
    kwargs = {} if dim is None else {"dim": dim}
    return _BUILDERS[pid](**kwargs)


def get_problem(problem_id: str, dim: Optional[int] = None, custom: Optional[dict] = None) -> LossProblem:
    """Look up a problem by id (case-insensitive).

    Built-ins are cached so repeated lookups return the same object, which
    keeps the ``true_argmin`` cache effective.
    """
    lookup = {p.lower(): p for p in PROBLEM_IDS}
    pid = lookup.get(str(problem_id).lower())
    if pid is None:
        raise ValueError(f"unknown problem id {problem_id!r}; choose from {PROBLEM_IDS}")
    if pid == "Custom":
        if custom is None:
            raise ValueError("problem 'Custom' requires a custom definition block")
        return custom_problem(**custom)
    if pid in ("Fig1", "Exp1", "Exp2") and dim not in (None, 1):
        raise ValueError(f"{pid} is one-dimensional")
    return _cached_builtin(pid, dim)
