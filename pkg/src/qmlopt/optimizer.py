"""Sequential multi-level quantile optimisation (searching + allocation loop).

Each iteration

1. picks a new design point by maximising expected improvement on the
   currently guiding level, using the spatial-only predictive variance, and
   runs ``r0`` replications there;
2. sizes the iteration budget ``B_k``, tops every point up to the
   replication floor ``r_k`` and spreads the rest with an OCBA ratio rule;
3. re-estimates the quantile panels, raises the noise tolerance ``C_0``,
   recomputes the accepted sets ``E_l``, the guiding level ``h`` and the
   pruned level subset ``pi`` and refits the co-kriging model.

The single-level baseline is the same loop with only the objective level.

Levels are 0-based internally; traces report ``h`` 1-based.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import ndtr
from scipy.stats import qmc

from .cokrige import AssembledModel, FitOptions, FittingError, ModelInputs, fit
from .quantile_est import DEFAULT_N_BATCHES, QuantilePanel, sectioning_panel
from .sim_core import LossProblem, RngStream, simulate, true_quantile
from .trace import RunTrace, TraceRow

logger = logging.getLogger(__name__)

EI_FLOOR = 1e-12
RESELECT_TOL = 1e-9
ALGORITHMS = ("qml", "q-baseline")

# the loop refits every iteration, so it searches less hard than a one-off fit
LOOP_FIT = FitOptions(n_starts=2, maxiter_per_param=60, stage1_starts=2, polish_top=3, max_refinements=1,
                      max_escalations=1)


@dataclass
class OptimizerConfig:
    """Algorithm parameters.

    ``d0_size``, ``ei_search_budget`` and ``c0`` default to ``max(6, 2d+2)``,
    ``200 d`` and the largest level-1 noise variance over the initial design.
    The replication floor is ``r_k = r0 + ceil(rk_scale * (k - 1)**rk_power)``.
    """

    T: int = 1000
    d0_size: Optional[int] = None
    r0: int = 50
    levels: tuple = (0.6, 0.95)
    c0: Optional[float] = None
    rk_scale: float = 1.0
    rk_power: float = 2.1
    ei_search_budget: Optional[int] = None
    ei_polish_top: int = 5
    n_b: int = DEFAULT_N_BATCHES
    classical_ocba: bool = False
    max_lower_level_budget: Optional[int] = None
    calibrate: bool = False
    seed: int = 0
    fit: FitOptions = LOOP_FIT

    def validate(self, dim: int = 1) -> None:
        lv = np.asarray(self.levels, dtype=float)
        if lv.ndim != 1 or lv.size < 1 or np.any(lv <= 0) or np.any(lv >= 1):
            raise ValueError("levels: every level must lie in (0, 1)")
        if np.any(np.diff(lv) <= 0):
            raise ValueError("levels: must be strictly increasing")
        if self.r0 < 1:
            raise ValueError("r0: must be positive")
        if self.n_b < 2 or self.r0 < self.n_b:
            raise ValueError("r0: must be at least n_b so every batch has one run")
        if self.initial_size(dim) < 2:
            raise ValueError("d0_size: need at least two initial points")
        if self.r0 * self.initial_size(dim) > self.T:
            raise ValueError("T: budget smaller than the initial design cost r0 * d0_size")
        if self.rk_scale < 0 or self.rk_power <= 0:
            raise ValueError("rk_scale/rk_power: floor schedule must be non-decreasing")

    def initial_size(self, dim: int) -> int:
        return self.d0_size if self.d0_size is not None else max(6, 2 * dim + 2)

    def search_budget(self, dim: int) -> int:
        return self.ei_search_budget if self.ei_search_budget is not None else 200 * dim

    def r_k(self, k: int) -> int:
        return int(self.r0 + math.ceil(self.rk_scale * max(k - 1, 0) ** self.rk_power))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [float(a) for a in self.levels]
        return d

    def digest(self, problem_key: str = "") -> str:
        blob = json.dumps({"config": self.to_dict(), "problem": problem_key}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def baseline_config(config: OptimizerConfig) -> OptimizerConfig:
    """Single-level variant that models only the objective level."""
    return replace(config, levels=(float(config.levels[-1]),), max_lower_level_budget=None)


@dataclass
class DesignPoint:
    x: np.ndarray
    stream: RngStream
    samples: np.ndarray
    panel: Optional[QuantilePanel] = None

    @property
    def n(self) -> int:
        return self.samples.size


@dataclass
class OptimizerState:
    k: int
    points: list
    budget_iter: int
    remaining: int
    h: int
    pi: list
    accept_sets: list
    c0_k: float
    incumbent: int = 0
    z_star: float = np.inf
    model: Optional[AssembledModel] = None
    lower_level_spent: int = 0
    flags: list = field(default_factory=list)

    @property
    def design(self) -> np.ndarray:
        return np.array([p.x for p in self.points])

    @property
    def n_counts(self) -> np.ndarray:
        return np.array([p.n for p in self.points], dtype=int)

    def estimates(self, level: int) -> np.ndarray:
        return np.array([p.panel.point_estimates[level] for p in self.points])

    def noise_vars(self, level: int) -> np.ndarray:
        return np.array([p.panel.noise_cov[level, level] for p in self.points])


@dataclass
class RunResult:
    trace: RunTrace
    final_x: np.ndarray
    final_y: float
    state: OptimizerState
    initial_model: Optional[AssembledModel]
    initial_level: float


# ----------------------------------------------------------------------------
# stage rules

def expected_improvement(z_star, mean, s):
    """``s phi(u) + (z* - mean) Phi(u)`` with ``u = (z* - mean) / s``.

    ``s`` is a standard deviation. Where ``s == 0`` the improvement is
    deterministic: ``max(z* - mean, 0)``.
    """
    mean = np.asarray(mean, dtype=float)
    s = np.asarray(s, dtype=float)
    diff = z_star - mean
    safe = np.where(s > 0, s, 1.0)
    u = diff / safe
    ei = s * np.exp(-0.5 * u**2) / math.sqrt(2 * math.pi) + diff * ndtr(u)
    out = np.where(s > 0, ei, np.maximum(diff, 0.0))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def update_budget(b_prev: int, deficit: int, max_noise_var: float, s2_new: float) -> int:
    """``B_k = max(deficit, floor(B_{k-1} (1 + v / (v + s2))))``.

    ``v`` is the largest noise variance at the guiding level and ``s2`` the
    spatial predictive variance at the newly selected point.
    """
    denom = max_noise_var + s2_new
    if denom > 0:
        ratio = max_noise_var / denom
    else:
        ratio = 0.0
    growth = math.floor(b_prev * (1.0 + ratio) + 1e-9)
    return int(max(deficit, growth))


def _largest_remainder(weights, total: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return np.zeros(w.size, dtype=int)
    q = total * w / w.sum()
    base = np.floor(q).astype(int)
    left = total - base.sum()
    if left > 0:
        frac = q - base
        # stable sort: ties go to the lowest index
        order = np.argsort(-frac, kind="stable")
        base[order[:left]] += 1
    return base


def ocba_weights(estimates, variances, classical: bool = False) -> np.ndarray:
    """Continuous OCBA shares for minimisation.

    Non-best points get ``sd_i / gap_i`` (squared under ``classical``); the
    best gets ``sd_b * sqrt(sum_i w_i / var_i)`` (``w_i**2`` under
    ``classical``). Gaps below ``1e-6 * spread`` are floored; if every estimate
    ties the split is uniform.
    """
    y = np.asarray(estimates, dtype=float)
    v = np.asarray(variances, dtype=float)
    n = y.size
    if n == 1:
        return np.ones(1)
    spread = y.max() - y.min()
    if spread <= 0:
        return np.full(n, 1.0 / n)
    vmax = v.max()
    v = np.maximum(v, 1e-12 * vmax if vmax > 0 else 1e-300)
    sd = np.sqrt(v)
    b = int(np.argmin(y))
    gap = np.maximum(y - y[b], 1e-6 * spread)
    w = sd / gap
    if classical:
        w = w**2
    others = np.arange(n) != b
    inner = np.sum((w[others] ** 2 if classical else w[others]) / v[others])
    w[b] = sd[b] * math.sqrt(inner)
    return w / w.sum()


def ocba_allocate(estimates, variances, counts, budget: int, floor: int = 0,
                  classical: bool = False):
    """Integer allocation of ``budget`` new replications.

    Points first get topped up to ``floor`` replications; the remainder is
    split by ``ocba_weights`` with largest-remainder rounding. If the budget
    cannot cover the top-ups it is split in proportion to the deficits.

    Returns ``(allocation, shortfall_flag)``.
    """
    counts = np.asarray(counts, dtype=int)
    deficit = np.maximum(floor - counts, 0)
    if budget <= 0:
        return np.zeros(counts.size, dtype=int), bool(deficit.sum() > 0)
    if deficit.sum() > budget:
        return _largest_remainder(deficit, budget), True
    rest = budget - int(deficit.sum())
    alloc = deficit + _largest_remainder(ocba_weights(estimates, variances, classical), rest)
    return alloc, False


def update_levels(noise_var, c0: float, h_prev: int = 0, force_top: bool = False):
    """Accepted sets, guiding level and pruned level subset.

    ``noise_var[i, l]`` is the noise variance of point ``i`` at level ``l``.
    Point ``i`` joins ``E_0 .. E_{l*}`` where ``l*`` is the highest level with
    variance ``<= c0``. ``h`` is the highest level with a non-empty accepted
    set, never below ``h_prev``. Level ``j <= h`` stays in ``pi`` unless some
    level in ``(j, h]`` has the same accepted set.

    Returns ``(E, h, pi, flagged)``.
    """
    nv = np.atleast_2d(np.asarray(noise_var, dtype=float))
    n, m = nv.shape
    E = [set() for _ in range(m)]
    for i in range(n):
        ok = np.flatnonzero(nv[i] <= c0)
        if ok.size:
            for l in range(ok.max() + 1):
                E[l].add(i)
    nonempty = [l for l in range(m) if E[l]]
    flagged = not E[0]
    h = max(nonempty) if nonempty else 0
    h = max(h, h_prev)
    if force_top:
        h = m - 1
    pi = [j for j in range(h + 1) if not any(E[l] == E[j] for l in range(j + 1, h + 1))]
    return [frozenset(e) for e in E], h, pi, flagged


def update_c0(c0_prev: float, eps_hat: float, n_best: int, remaining: int,
              n_design: int, budget_iter: int) -> float:
    """``max(C0_{k-1}, eps * N / (N + A / (|D| + A / B)))``."""
    if budget_iter <= 0:
        return c0_prev
    future = remaining / (n_design + remaining / budget_iter)
    return max(c0_prev, eps_hat * n_best / (n_best + future))


# ----------------------------------------------------------------------------
# helpers

def maximin_lhs(n: int, lower, upper, rng: np.random.Generator, tries: int = 20) -> np.ndarray:
    """Latin hypercube with the largest minimum pairwise distance of ``tries`` draws."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    best, best_d = None, -1.0
    for _ in range(tries):
        u = qmc.LatinHypercube(d=lower.size, seed=rng).random(n)
        diff = u[:, None, :] - u[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dmin = dist[np.triu_indices(n, 1)].min() if n > 1 else 0.0
        if dmin > best_d:
            best, best_d = u, dmin
    return qmc.scale(best, lower, upper)


def _child_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**63, *tags]))


def model_inputs(points, level_idx, problem: LossProblem) -> ModelInputs:
    li = list(level_idx)
    y = np.array([[p.panel.point_estimates[l] for p in points] for l in li])
    cov = np.array([p.panel.noise_cov[np.ix_(li, li)] for p in points])
    levels = np.array([points[0].panel.levels[l] for l in li]) if points else None
    return ModelInputs(np.array([p.x for p in points]), y, cov, levels,
                       problem.lower, problem.upper)


def loo_standardized(model: AssembledModel) -> np.ndarray:
    """Leave-one-out standardised residuals of a single-level model."""
    R = model.r
    H = model.h_matrix
    y = model.inputs.y_stacked
    Rinv = linalg.cho_solve(linalg.cho_factor(R + model.jitter * np.eye(len(R))), np.eye(len(R)))
    resid = Rinv @ (y - H @ model.beta)
    d = np.diag(Rinv)
    return resid / np.sqrt(d)


# ----------------------------------------------------------------------------
# the loop

class QuantileOptimizer:
    """Stateful driver of one optimisation run."""

    def __init__(self, config: OptimizerConfig, problem: LossProblem,
                 on_row: Optional[Callable[[TraceRow], None]] = None):
        config.validate(problem.dim)
        self.cfg = config
        self.problem = problem
        self.levels = np.asarray(config.levels, dtype=float)
        self.m = self.levels.size
        self.on_row = on_row
        self.state: Optional[OptimizerState] = None
        self.trace: Optional[RunTrace] = None
        self.initial_model: Optional[AssembledModel] = None
        self._last_hyper = None

    # -- simulation bookkeeping
    def _new_point(self, x, n: int) -> DesignPoint:
        idx = 0 if self.state is None else len(self.state.points)
        idx = len(self._pending) if self.state is None else idx
        stream = RngStream(self.cfg.seed, idx)
        pt = DesignPoint(np.asarray(x, dtype=float), stream, simulate(self.problem, x, n, stream))
        self._refresh(pt)
        return pt

    def _refresh(self, pt: DesignPoint) -> None:
        pt.panel = sectioning_panel(pt.samples, self.levels, self.cfg.n_b)

    def _add_reps(self, pt: DesignPoint, n: int) -> None:
        if n > 0:
            pt.samples = np.concatenate([pt.samples, simulate(self.problem, pt.x, n, pt.stream)])
            self._refresh(pt)

    # -- modelling
    def _fit(self, pi, seed_tag: int):
        st = self.state
        inputs = model_inputs(st.points, pi, self.problem)
        start = self._last_hyper if self._last_hyper is not None and \
            self._last_hyper.n_levels == len(pi) else None
        opts = self.cfg.fit
        for attempt in range(3):
            try:
                res = fit(inputs, options=replace(opts, seed=int(_child_rng(self.cfg.seed, 7, seed_tag, attempt)
                                                                 .integers(2**31))), start=start)
                if res.flagged:
                    st.flags.append(f"k={st.k}: {res.messages[-1]}")
                self._last_hyper = res.hyper
                return res.model
            except FittingError as exc:
                st.flags.append(f"k={st.k}: fit attempt {attempt + 1} failed ({exc})")
                start = None
        st.flags.append(f"k={st.k}: model refresh skipped")
        return None

    def _set_z_star(self) -> None:
        st = self.state
        if st.model is None:
            return
        st.z_star = float(np.min(st.model.predict_mean(st.design, -1)))

    def _incumbent(self) -> int:
        y = self.state.estimates(self.m - 1)
        return int(np.argmin(y))

    # -- stages
    def searching_stage(self):
        """Maximise EI at the guiding level; returns ``(x, s2, fallback)``."""
        st, pb = self.state, self.problem
        model = st.model
        rng = _child_rng(self.cfg.seed, 11, st.k)
        cand = qmc.scale(qmc.LatinHypercube(d=pb.dim, seed=rng).random(self.cfg.search_budget(pb.dim)),
                         pb.lower, pb.upper)
        D = st.design
        near = np.min(np.abs(cand[:, None, :] - D[None, :, :]).max(-1), axis=1) <= RESELECT_TOL
        cand = cand[~near]
        mean, _, var_sp = model.predict(cand, -1)
        ei = expected_improvement(st.z_star, mean, np.sqrt(var_sp))

        def neg_ei(x):
            x = np.clip(x, pb.lower, pb.upper)
            mu, _, vs = model.predict(x[None, :], -1)
            return -expected_improvement(st.z_star, mu[0], math.sqrt(vs[0]))

        best_x, best_ei = cand[int(np.argmax(ei))], float(ei.max())
        bounds = list(zip(pb.lower, pb.upper))
        for i in np.argsort(-ei)[: self.cfg.ei_polish_top]:
            res = optimize.minimize(neg_ei, cand[i], method="Nelder-Mead", bounds=bounds,
                                    options={"maxfev": 100 * pb.dim, "xatol": 1e-7, "fatol": 1e-14})
            x = np.clip(res.x, pb.lower, pb.upper)
            if -res.fun > best_ei and np.min(np.abs(D - x).max(-1)) > RESELECT_TOL:
                best_x, best_ei = x, -float(res.fun)
        fallback = best_ei < EI_FLOOR
        if fallback:
            best_x = cand[int(np.argmax(var_sp))]
        _, _, s2 = model.predict(best_x[None, :], -1)
        return np.asarray(best_x, dtype=float), float(s2[0]), fallback

    # -- run
    def initialize(self) -> None:
        cfg, pb = self.cfg, self.problem
        n0 = cfg.initial_size(pb.dim)
        D0 = maximin_lhs(n0, pb.lower, pb.upper, _child_rng(cfg.seed, 1))
        self._pending = []
        r0 = cfg.r0
        for x in D0:
            self._pending.append(self._new_point(x, r0))
        points = self._pending
        c0 = cfg.c0
        if cfg.calibrate:
            r0, c0_cal = self._calibrate(points)
            c0 = c0 if c0 is not None else c0_cal
            self.r0 = r0
        else:
            self.r0 = r0
        if c0 is None:
            c0 = float(max(p.panel.noise_cov[0, 0] for p in points))
        spent = sum(p.n for p in points)
        E, _, _, _ = update_levels([np.diag(p.panel.noise_cov) for p in points], c0)
        self.state = OptimizerState(k=0, points=points, budget_iter=self.r0, remaining=cfg.T - spent,
                                    h=0, pi=[0], accept_sets=E, c0_k=c0)
        st = self.state
        st.model = self._fit(st.pi, 0)
        self.initial_model = st.model
        self._set_z_star()
        st.incumbent = self._incumbent()
        self.trace = RunTrace(header={
            "config_hash": cfg.digest(pb.key),
            "seed": cfg.seed,
            "problem": pb.key,
            "problem_id": pb.id,
            "dim": pb.dim,
            "levels": [float(a) for a in self.levels],
            "T": cfg.T,
            "r0": self.r0,
            "c0": c0,
            "initial_design": st.design.tolist(),
            "initial_evals": int(spent),
            "initial_xhat": st.points[st.incumbent].x.tolist(),
        })

    def _calibrate(self, points):
        """Double ``r0`` until level-1 LOO residuals look Gaussian.

        Accepts when 95% of standardised leave-one-out residuals satisfy
        ``|z| < 3``; ``C_0`` is then the largest level-1 noise variance.
        """
        cfg = self.cfg
        r0 = cfg.r0
        n0 = len(points)
        while True:
            self.state = OptimizerState(0, points, r0, cfg.T, 0, [0], [], 0.0)
            model = self._fit([0], 0)
            ok = model is not None and np.mean(np.abs(loo_standardized(model)) < 3) >= 0.95
            if ok or 2 * r0 * n0 > cfg.T // 2:
                break
            for p in points:
                self._add_reps(p, r0)
            r0 *= 2
        self.state = None
        return r0, float(max(p.panel.noise_cov[0, 0] for p in points))

    def step(self) -> TraceRow:
        cfg, st = self.cfg, self.state
        st.k += 1
        k = st.k
        r0 = self.r0
        flags = []
        h_level = st.pi[-1] if st.pi else st.h
        before = st.n_counts
        x_next = None
        if st.remaining >= r0:
            x_next, s2, fallback = self.searching_stage()
            if fallback:
                flags.append("exploration fallback")
            rk = cfg.r_k(k)
            deficit = int(np.sum(np.maximum(rk - before, 0)) + rk)
            st.points.append(self._new_point(x_next, r0))
            if k == 1:
                B = r0
            else:
                vmax = float(np.max(st.noise_vars(h_level)))
                B = update_budget(st.budget_iter, deficit, vmax, s2)
            B = min(B, st.remaining)
            spend = B - r0
        else:
            # leftover smaller than r0: one allocation-only pass
            rk = cfg.r_k(k)
            B = st.remaining
            spend = B
            flags.append("final allocation")
        counts = st.n_counts
        alloc, short = ocba_allocate(st.estimates(h_level), st.noise_vars(h_level), counts, spend,
                                     floor=rk, classical=cfg.classical_ocba)
        if short:
            flags.append("r_k floor shortfall")
        for pt, n in zip(st.points, alloc):
            self._add_reps(pt, int(n))
        st.budget_iter = B
        st.remaining -= B
        if st.h < self.m - 1:
            st.lower_level_spent += B

        # modelling update
        st.incumbent = self._incumbent()
        best = st.points[st.incumbent]
        st.c0_k = update_c0(st.c0_k, float(best.panel.noise_cov[-1, -1]), best.n, st.remaining,
                            len(st.points), B)
        force = (cfg.max_lower_level_budget is not None
                 and st.lower_level_spent >= cfg.max_lower_level_budget)
        noise = [np.diag(p.panel.noise_cov) for p in st.points]
        st.accept_sets, st.h, st.pi, empty = update_levels(noise, st.c0_k, st.h, force)
        if empty:
            flags.append("E_1 empty")
        if st.remaining > 0:
            model = self._fit(st.pi, k)
            if model is not None:
                st.model = model
            self._set_z_star()

        grown = st.n_counts.copy()
        grown[: before.size] -= before
        alloc_map = {i: int(n) for i, n in enumerate(grown) if n > 0}
        xhat = best.x
        row = TraceRow(
            k=k,
            x_next=None if x_next is None else [float(v) for v in x_next],
            alloc=alloc_map,
            h=st.h + 1,
            pi=[float(self.levels[j]) for j in st.pi],
            B=int(B),
            A=int(st.remaining),
            xhat=[float(v) for v in xhat],
            y_hat=float(best.panel.point_estimates[-1]),
            v_true=true_quantile(self.problem, xhat, float(self.levels[-1])),
            flags=flags + [f for f in st.flags],
        )
        st.flags.clear()
        self.trace.rows.append(row)
        if self.on_row is not None:
            self.on_row(row)
        return row

    def run(self) -> RunResult:
        self.initialize()
        while self.state.remaining > 0:
            self.step()
        st = self.state
        best = st.points[st.incumbent]
        return RunResult(self.trace, best.x.copy(), float(best.panel.point_estimates[-1]), st,
                         self.initial_model, float(self.levels[0]))


def run(config: OptimizerConfig, problem: LossProblem, algorithm: str = "qml",
        on_row: Optional[Callable[[TraceRow], None]] = None) -> RunResult:
    """Run one optimisation; ``algorithm='q-baseline'`` models the objective level only."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    cfg = baseline_config(config) if algorithm == "q-baseline" else config
    return QuantileOptimizer(cfg, problem, on_row).run()
