"""Large-deviation computations: control cost, penalized rate minimization via an
exact discrete adjoint, lower-bound sweeps, tail-probability Monte Carlo and a
mollification stability check.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from . import spectral as sp
from .detpde import (DriftSpec, TrajectorySnapshot, check_cfl, solve_advection_diffusion,
                     solve_skeleton_euler, solve_skeleton_transport, step_count)
from .noise import NoiseModel, derive_seed
from .spde import StochasticRunConfig, run_coupled
from .spectral import SpectralField, TorusGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant divergence-free control ``g``: ``coeffs[j]`` on ``[times[j], times[j+1])``.

    The last piece runs to ``T``.
    """

    grid: TorusGrid
    times: np.ndarray
    coeffs: np.ndarray
    alpha: float
    T: float

    def __post_init__(self):
        t = np.asarray(self.times, float)
        c = np.asarray(self.coeffs, complex)
        if c.shape != (len(t), 2, self.grid.N, self.grid.N):
            raise ValueError(f"control coefficients must have shape (pieces, 2, N, N), got {c.shape}")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0) or t[-1] >= self.T:
            raise ValueError("control times must start at 0, increase, and end before T")
        div = np.abs(sp.div_hat(self.grid, c)).max()
        if div > 1e-9 * max(np.sqrt((np.abs(c) ** 2).sum()), 1.0):
            raise ValueError(f"control is not divergence-free (max |div| = {div:.3e})")
        if np.abs(c[:, :, 0, 0]).max() > 1e-12 * max(np.abs(c).max(), 1.0):
            raise ValueError("control must have zero mean")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: TorusGrid, pieces: int, T: float, alpha: float) -> ControlPath:
        return cls(grid, np.arange(pieces) * (T / pieces), np.zeros((pieces, 2, grid.N, grid.N), complex), alpha, T)

    @classmethod
    def constant(cls, field: sp.VectorField, T: float, alpha: float) -> ControlPath:
        return cls(field.grid, np.array([0.0]), field.coeffs[None], alpha, T)

    @property
    def durations(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.T))

    def with_coeffs(self, coeffs: np.ndarray) -> ControlPath:
        return ControlPath(self.grid, self.times, coeffs, self.alpha, self.T)

    def __mul__(self, a: float) -> ControlPath:
        return self.with_coeffs(self.coeffs * a)

    __rmul__ = __mul__

    def __add__(self, other: ControlPath) -> ControlPath:
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: ControlPath) -> ControlPath:
        return self.with_coeffs(self.coeffs - other.coeffs)

    def l2_norm_sq(self) -> float:
        """``int ||g_t||^2_{L2} dt``."""
        return float((self.durations * sp.sobolev_norm_sq(self.grid, self.coeffs, 0.0).sum(axis=-1)).sum())

    def cost(self) -> float:
        return rate_cost(self)

    def to_csv(self, path, tol: float = 0.0) -> None:
        """Sparse checkpoint: one row per (piece, mode) with both components."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "k1", "k2", "g1_re", "g1_im", "g2_re", "g2_im"])
            k1, k2 = self.grid.wavenumbers
            for j, t in enumerate(self.times):
                c = self.coeffs[j]
                nz = np.argwhere((np.abs(c) > tol).any(axis=0))
                for i0, i1 in nz:
                    a, b = c[0, i0, i1], c[1, i0, i1]
                    w.writerow([repr(float(t)), int(k1[i0, i1]), int(k2[i0, i1])]
                               + [repr(float(x)) for x in (a.real, a.imag, b.real, b.imag)])

    @classmethod
    def from_csv(cls, path, grid: TorusGrid, alpha: float, T: float) -> ControlPath:
        rows = list(csv.DictReader(open(path)))
        times = sorted({float(r["t"]) for r in rows}) or [0.0]
        c = np.zeros((len(times), 2, grid.N, grid.N), complex)
        for r in rows:
            j = times.index(float(r["t"]))
            idx = grid.mode_index(int(r["k1"]), int(r["k2"]))
            c[j, 0][idx] = complex(float(r["g1_re"]), float(r["g1_im"]))
            c[j, 1][idx] = complex(float(r["g2_re"]), float(r["g2_im"]))
        return cls(grid, np.array(times), c, alpha, T)


def rate_cost(g: ControlPath) -> float:
    """``1/2 sum_j dt_j ||g_j||^2_{H^alpha}`` (left-endpoint quadrature)."""
    per_piece = sp.sobolev_norm_sq(g.grid, g.coeffs, g.alpha).sum(axis=-1)
    return 0.5 * float((g.durations * per_piece).sum())


@dataclass(frozen=True, eq=False)
class RateProblem:
    """Penalized rate problem ``min_g cost(g) + lam/2 ||f^g - f*||^2_{H^-delta}``.

    ``target`` is either a terminal field or a trajectory saved at every step;
    ``mismatch="trajectory"`` penalizes the sup over steps instead of ``T`` only.
    Controls live on ``pieces`` equal intervals and modes ``|k| <= control_radius``.
    """

    f0: SpectralField
    b: DriftSpec
    target: SpectralField | TrajectorySnapshot
    T: float
    dt: float
    alpha: float = 0.5
    lam: float = 1.0
    delta: float = 1.0
    pieces: int = 4
    control_radius: float = 3.0
    max_iter: int = 200
    tol: float = 1e-10
    mismatch: Literal["terminal", "trajectory"] = "terminal"
    forward: Literal["transport", "euler"] = "transport"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.delta < 0:
            raise ValueError("mismatch index delta must be nonnegative")
        step_count(self.T, self.dt)

    @property
    def grid(self) -> TorusGrid:
        return self.f0.grid

    @property
    def steps(self) -> int:
        return step_count(self.T, self.dt)

    def control_mask(self) -> np.ndarray:
        g = self.grid
        return (g.k_abs <= self.control_radius) & (g.k_sq > 0)

    def zero_control(self) -> ControlPath:
        return ControlPath.zeros(self.grid, self.pieces, self.T, self.alpha)

    def target_at(self, m: int) -> np.ndarray:
        if isinstance(self.target, TrajectorySnapshot):
            return self.target.fields[m]
        if m != self.steps:
            raise ValueError("a terminal target has no intermediate states")
        return self.target.coeffs


@dataclass
class ForwardRun:
    states: np.ndarray          # (M+1, N, N)
    objective: float
    cost: float
    mismatch: float
    argmax: int


def _piece_of_step(problem: RateProblem, g: ControlPath) -> np.ndarray:
    t = np.arange(problem.steps) * problem.dt
    return np.clip(np.searchsorted(g.times, t + 1e-12, side="right") - 1, 0, len(g.times) - 1)


def _forward(problem: RateProblem, g: ControlPath) -> ForwardRun:
    grid = problem.grid
    dt = problem.dt
    b_phys = problem.b.velocity_phys(grid)
    g_phys = sp.to_physical(grid, g.coeffs)
    piece = _piece_of_step(problem, g)
    P = grid.heat_multiplier(dt)
    M = problem.steps
    states = np.empty((M + 1, grid.N, grid.N), complex)
    f = problem.f0.coeffs.copy()
    states[0] = f
    for m in range(M):
        v = b_phys + g_phys[piece[m]]
        if problem.forward == "euler":
            v = v + sp.to_physical(grid, sp.biot_savart_hat(grid, f))
        f = P * (f - dt * sp.transport_phys(grid, v, f))
        states[m + 1] = f
    w = grid.sobolev_weight(-problem.delta)
    if problem.mismatch == "terminal":
        mism = float((w * np.abs(states[M] - problem.target_at(M)) ** 2).sum())
        arg = M
    else:
        vals = [float((w * np.abs(states[m] - problem.target_at(m)) ** 2).sum()) for m in range(M + 1)]
        arg = int(np.argmax(vals))
        mism = vals[arg]
    c = rate_cost(g)
    return ForwardRun(states, c + 0.5 * problem.lam * mism, c, mism, arg)


def evaluate_control(problem: RateProblem, g: ControlPath) -> tuple[TrajectorySnapshot, float]:
    """Skeleton trajectory under ``g`` and the penalized objective."""
    run = _forward(problem, g)
    traj = TrajectorySnapshot(problem.grid, np.arange(problem.steps + 1) * problem.dt, run.states)
    return traj, run.objective


def objective_gradient(problem: RateProblem, g: ControlPath) -> tuple[float, np.ndarray, ForwardRun]:
    """Objective and its L2 coefficient gradient in ``g`` (shape of ``g.coeffs``).

    Exact adjoint of the discrete forward map (transport skeleton only).  The
    gradient is projected on divergence-free fields supported on the control
    modes, i.e. it is the gradient of the restricted problem.
    """
    if problem.forward != "transport":
        raise NotImplementedError("adjoint gradients are provided for the transport skeleton only")
    run = _forward(problem, g)
    w = problem.grid.sobolev_weight(-problem.delta)
    inject = problem.lam * w * (run.states[run.argmax] - problem.target_at(run.argmax))
    grad = _adjoint_gradient(problem, g, run.states, inject, run.argmax)
    grad += g.durations[:, None, None, None] * problem.grid.sobolev_weight(g.alpha) * g.coeffs
    return run.objective, grad, run


def _adjoint_gradient(problem: RateProblem, g: ControlPath, states: np.ndarray, inject: np.ndarray,
                      at: int) -> np.ndarray:
    """Gradient in ``g`` of ``<inject, f_at>`` for the discrete transport skeleton."""
    grid = problem.grid
    dt = problem.dt
    b_phys = problem.b.velocity_phys(grid)
    g_phys = sp.to_physical(grid, g.coeffs)
    piece = _piece_of_step(problem, g)
    P = grid.heat_multiplier(dt)
    D = grid.dealias_mask
    M = problem.steps
    lam_state = inject if at == M else np.zeros((grid.N, grid.N), complex)
    grad = np.zeros_like(g.coeffs)
    for m in range(M - 1, -1, -1):
        q = P * lam_state
        qd = sp.to_physical(grid, D * q)
        f_grad = sp.to_physical(grid, sp.grad_hat(grid, states[m]))
        grad[piece[m]] -= dt * sp.from_physical(grid, qd * f_grad)
        v = b_phys + g_phys[piece[m]]
        lam_state = q + dt * sp.div_hat(grid, sp.from_physical(grid, qd * v))
        if m == at:
            lam_state = lam_state + inject
    return sp.leray_hat(grid, grad) * problem.control_mask()


def planted_control(problem: RateProblem, covector: SpectralField, scale: float) -> ControlPath:
    """Minimum-energy-type control: the ``H^alpha`` Riesz image of ``covector`` pulled back through
    the linearized skeleton at ``g = 0``, rescaled to ``L2_t L2_x`` norm ``scale``.

    Such a control lies (to first order in ``scale``) in the range of the adjoint, so it is the
    cheapest control reaching its own endpoint.
    """
    g0 = problem.zero_control()
    run = _forward(problem, g0)
    d = riesz_direction(g0, _adjoint_gradient(problem, g0, run.states, covector.coeffs, problem.steps))
    norm = np.sqrt(g0.with_coeffs(d).l2_norm_sq() / problem.T)
    if norm == 0:
        raise ValueError("covector is invisible to the controls")
    return g0.with_coeffs(d * (scale / norm))


def riesz_direction(g: ControlPath, grad: np.ndarray) -> np.ndarray:
    """H^alpha-in-space, L2-in-time Riesz representative of an L2 coefficient gradient."""
    w = g.grid.sobolev_weight(-g.alpha).copy()
    w[0, 0] = 0.0
    return grad * w / g.durations[:, None, None, None]


@dataclass
class OptimizationReport:
    status: str
    iterations: int
    objectives: list[float]
    costs: list[float]
    mismatches: list[float]
    steps: list[float]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "rate_cost", "mismatch", "step_size"])
            for i, row in enumerate(zip(self.objectives, self.costs, self.mismatches, self.steps)):
                w.writerow([i] + [repr(float(x)) for x in row])


def minimize_rate(problem: RateProblem, g0: ControlPath | None = None,
                  armijo: float = 1e-4, shrink: float = 0.5) -> tuple[ControlPath, float, OptimizationReport]:
    """Gradient descent in the ``L2_t H^alpha`` geometry with Armijo backtracking.

    Trial steps use the Barzilai-Borwein length; the accepted objective
    sequence is nonincreasing by construction.  Returns ``(g*, rate_cost(g*), report)``.
    """
    if problem.max_iter <= 0:
        raise ValueError("optimizer budget must be positive")
    g = g0 if g0 is not None else problem.zero_control()
    J, grad, run = objective_gradient(problem, g)
    report = OptimizationReport("max_iter", 0, [J], [run.cost], [run.mismatch], [0.0])
    step = 1.0
    prev = None
    for it in range(problem.max_iter):
        d = riesz_direction(g, grad)
        dd = float(sp.inner(grad, d).sum())
        if dd <= problem.tol * max(1.0, abs(J)):
            report.status = "converged"
            break
        if prev is not None:
            s_vec = g.coeffs - prev[0].coeffs
            y_vec = grad - prev[1]
            sy = float(sp.inner(s_vec, y_vec).sum())
            if sy > 0:
                # s in primal coordinates, y a gradient: <s, y> / <y, R y>
                yRy = float(sp.inner(y_vec, riesz_direction(g, y_vec)).sum())
                step = sy / yRy if yRy > 0 else step
        accepted = False
        for _ in range(60):
            trial = g.with_coeffs(g.coeffs - step * d)
            J_new, grad_new, run_new = objective_gradient(problem, trial)
            if J_new <= J - armijo * step * dd:
                accepted = True
                break
            step *= shrink
        if not accepted:
            report.status = "stalled"
            break
        prev = (g, grad)
        g, J, grad, run = trial, J_new, grad_new, run_new
        report.objectives.append(J)
        report.costs.append(run.cost)
        report.mismatches.append(run.mismatch)
        report.steps.append(step)
        report.iterations = it + 1
    return g, rate_cost(g), report


def finite_difference_check(problem: RateProblem, g: ControlPath, coords: int = 10, h: float = 1e-5,
                            seed: int = 0) -> dict:
    """Compare the adjoint gradient with central differences along random basis directions.

    A direction is one control piece and one half-lattice mode ``k`` with the
    divergence-free polarization ``k_perp / |k|``, real or imaginary.
    """
    rng = np.random.default_rng(seed)
    grid = problem.grid
    _, grad, _ = objective_gradient(problem, g)
    mask = problem.control_mask()
    k1, k2 = grid.wavenumbers
    upper = mask & ((k1 > 0) | ((k1 == 0) & (k2 > 0)))
    cand = np.argwhere(upper)
    rel = []
    for _ in range(coords):
        j = int(rng.integers(len(g.times)))
        i0, i1 = cand[rng.integers(len(cand))]
        phase = 1.0 if rng.random() < 0.5 else 1j
        k = np.array([k1[i0, i1], k2[i0, i1]], float)
        a = np.array([-k[1], k[0]]) / np.linalg.norm(k)
        dirc = np.zeros_like(g.coeffs)
        dirc[j, :, i0, i1] = a * phase
        dirc[j, :, (-k1[i0, i1]) % grid.N, (-k2[i0, i1]) % grid.N] = a * np.conj(phase)
        dg = g.with_coeffs(dirc)
        fd = (_forward(problem, g + h * dg).objective - _forward(problem, g - h * dg).objective) / (2 * h)
        ad = float(sp.inner(grad, dirc).sum())
        rel.append(abs(fd - ad) / max(abs(fd), abs(ad), 1e-300))
    return {"max_rel_error": float(max(rel)), "rel_errors": rel}


def random_control(grid: TorusGrid, rng: np.random.Generator, T: float, alpha: float, pieces: int = 4,
                   radius: float = 3.0, scale: float = 1.0) -> ControlPath:
    """Random smooth divergence-free control on modes ``|k| <= radius``."""
    mask = (grid.k_abs <= radius) & (grid.k_sq > 0)
    c = np.empty((pieces, 2, grid.N, grid.N), complex)
    for j in range(pieces):
        u = rng.standard_normal((2, grid.N, grid.N))
        c[j] = sp.leray_hat(grid, sp.from_physical(grid, u) * mask)
    l2 = np.sqrt(sp.sobolev_norm_sq(grid, c, 0.0).sum() / pieces)
    return ControlPath(grid, np.arange(pieces) * (T / pieces), c * (scale / l2), alpha, T)


# ---------------------------------------------------------------- lower bounds


@dataclass
class LowerBoundReport:
    ratios: list[float]
    excluded: int
    delta: float

    @property
    def min_ratio(self) -> float:
        return float(min(self.ratios)) if self.ratios else float("nan")


def rate_ratio(g: ControlPath, traj: TrajectorySnapshot, fbar: TrajectorySnapshot, f0: SpectralField,
               delta: float) -> float | None:
    """``rate_cost(g) ||f0||^2 / ||f^g - fbar||^2_{C0 H^-delta}``, or None when the deviation vanishes."""
    dev = float(sp.sobolev_norm_sq(traj.grid, traj.fields - fbar.fields, -delta).max())
    if dev < 1e-24:
        return None
    return rate_cost(g) * float(sp.sobolev_norm_sq(f0.grid, f0.coeffs, 0.0)) / dev


def lower_bound_check(f0: SpectralField, b: DriftSpec, controls: Sequence[ControlPath], delta: float,
                      dt: float) -> LowerBoundReport:
    """Empirical lower-bound constant over a sweep of controls (needs ``delta > 1``)."""
    if delta <= 1.0:
        raise ValueError(f"lower bounds need delta > d/2 = 1, got {delta}")
    T = controls[0].T
    fbar = solve_advection_diffusion(f0, b, T, dt)
    ratios, excluded = [], 0
    for g in controls:
        traj = solve_skeleton_transport(f0, b, g, T, dt)
        r = rate_ratio(g, traj, fbar, f0, delta)
        if r is None:
            excluded += 1
        else:
            ratios.append(r)
    return LowerBoundReport(ratios, excluded, delta)


# ---------------------------------------------------------------- tail probabilities


@dataclass
class TailReport:
    R: float
    delta: float
    rows: list[dict] = field(default_factory=list)

    @property
    def probabilities(self) -> list[float]:
        return [r["p_hat"] for r in self.rows]


def tail_probability_mc(f0: SpectralField, b: DriftSpec, models: Sequence[NoiseModel], R: float, delta: float,
                        paths: int, T: float, dt: float, seed: int = 0, stride: int | None = None) -> TailReport:
    """Monte Carlo ``P(||f^n - fbar||_{C0 H^-delta} >= R)`` per noise model with Wilson intervals."""
    if paths < 100:
        raise ValueError("tail estimates need at least 100 paths")
    grid = f0.grid
    rep = TailReport(R, delta)
    for model in models:
        seeds = tuple(derive_seed(seed, model.n, p) for p in range(paths))
        cfg = StochasticRunConfig(grid, dt, T, model, seed=seed, paths=paths, stride=stride, path_seeds=seeds)
        cp = run_coupled("transport", cfg, f0, b, s_values=(), delta=delta, keep="none")
        sup = np.sqrt(cp.sup_error("lln"))
        valid = np.isfinite(sup)
        hits = int((sup[valid] >= R).sum())
        total = int(valid.sum())
        p_hat = hits / total
        ci = stats.binomtest(hits, total).proportion_ci(confidence_level=0.95, method="wilson")
        rep.rows.append({
            "n": model.n, "epsilon": model.epsilon, "hits": hits, "paths": total, "p_hat": p_hat,
            "ci_low": ci.low, "ci_high": ci.high,
            "eps_log_p": model.epsilon * np.log(p_hat) if p_hat > 0 else float("-inf"),
            "degenerate": p_hat in (0.0, 1.0),
        })
    return rep


# ---------------------------------------------------------------- mollification


def spectral_mollify(f: SpectralField, width: float) -> SpectralField:
    """Sharp Fourier truncation at ``|k| <= 1 / width``."""
    return SpectralField(f.grid, f.coeffs * (f.grid.k_abs <= 1.0 / width), f.zero_mean)


def mollification_stability(f0: SpectralField, widths: Sequence[float], g: ControlPath, b: DriftSpec,
                            dt: float, norm_index: float = 1.0) -> list[dict]:
    """Deviation of the skeleton solution under mollified initial data, per width."""
    base = solve_skeleton_transport(f0, b, g, g.T, dt)
    rows = []
    for w in widths:
        fm = spectral_mollify(f0, w)
        data_err = float(np.sqrt(sp.sobolev_norm_sq(f0.grid, fm.coeffs - f0.coeffs, 0.0)))
        traj = solve_skeleton_transport(fm, b, g, g.T, dt)
        dev = float(np.sqrt(sp.sobolev_norm_sq(f0.grid, traj.fields - base.fields, -norm_index).max()))
        rows.append({"width": w, "data_error": data_err, "deviation": dev,
                     "ratio": dev / data_err if data_err > 0 else 0.0})
    return rows
