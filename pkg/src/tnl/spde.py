"""Stochastic time steppers sharing one Brownian driver.

All runners are batched over Monte Carlo paths: states carry a leading path
axis, and each path draws from its own seed.  The Ito form is discretized
directly with the noise coefficient at the left endpoint and the Laplacian
applied through the heat integrating factor:

    f_{m+1} = P_dt (f_m - dt b . grad f_m - sqrt(eps_n) dW_m . grad f_m)

The limit fluctuation equations are driven by every grid-resolvable mode
(``|k| <= N // 3``); their low modes coincide with the finite-``n`` noise, which
is the coupling that makes ``X^n - X`` computable pathwise.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import spectral as sp
from .detpde import DriftSpec, StabilityError, TrajectorySnapshot, check_cfl, step_count
from .noise import BrownianDriver, NoiseModel, build_noise_model, derive_seed, noise_field_hat
from .spectral import SpectralField, TorusGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StochasticRunConfig:
    """Grid, time mesh, noise and seeding of a batch of paths.

    Path ``p`` uses seed ``derive_seed(seed, p)`` unless ``path_seeds`` is given.
    ``amplitude`` scales every driver increment (0 switches the noise off).
    """

    grid: TorusGrid
    dt: float
    T: float
    noise: NoiseModel
    seed: int = 0
    paths: int = 1
    stride: int | None = None
    amplitude: float = 1.0
    l2_tol: float = 0.05
    chunk: int = 128
    path_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.noise.radius > self.grid.k_max:
            raise ValueError(f"noise radius {self.noise.radius} exceeds the dealias cutoff {self.grid.k_max}")
        step_count(self.T, self.dt)
        if self.path_seeds is not None and len(self.path_seeds) != self.paths:
            raise ValueError("path_seeds must have one entry per path")

    @property
    def steps(self) -> int:
        return step_count(self.T, self.dt)

    @property
    def save_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return max(1, self.steps // 10)

    def seeds(self) -> np.ndarray:
        if self.path_seeds is not None:
            return np.array(self.path_seeds, dtype=np.uint64)
        return np.array([derive_seed(self.seed, p) for p in range(self.paths)], dtype=np.uint64)

    @property
    def full_noise(self) -> NoiseModel:
        """All grid-resolvable modes: the discrete stand-in for the untruncated noise."""
        return build_noise_model(self.noise.alpha, self.grid.k_max)

    def save_points(self) -> list[int]:
        M, s = self.steps, self.save_stride
        pts = list(range(0, M + 1, s))
        if pts[-1] != M:
            pts.append(M)
        return pts


@dataclass(eq=False)
class CoupledPath:
    """Co-evolved fields on shared drivers with per-path error records.

    ``errors[name]`` has shape ``(len(times), paths)``; aborted paths carry NaN.
    """

    kind: str
    times: np.ndarray
    fields: dict[str, TrajectorySnapshot]
    errors: dict[str, np.ndarray]
    aborted: np.ndarray
    seeds: np.ndarray
    epsilon: float
    meta: dict = field(default_factory=dict)

    @property
    def abort_count(self) -> int:
        return int(self.aborted.sum())

    def sup_error(self, name: str) -> np.ndarray:
        """Per-path maximum over saved times (the sup in time, sampled)."""
        return np.nanmax(self.errors[name], axis=0)


# ---------------------------------------------------------------- internals


def _batched(f0, paths: int) -> tuple[TorusGrid, np.ndarray]:
    if isinstance(f0, SpectralField):
        grid, c = f0.grid, f0.coeffs
    else:
        c = np.asarray(f0, complex)
        grid = sp.get_grid(c.shape[-1])
    return grid, np.broadcast_to(c, (paths, grid.N, grid.N)).copy()


def _limit_series(limit, grid: TorusGrid, M: int, dt: float) -> np.ndarray:
    """Coefficients of a precomputed limit at every step ``0..M``.

    A bare ``SpectralField`` is held frozen in time.
    """
    if isinstance(limit, SpectralField):
        if limit.grid != grid:
            raise ValueError("limit field lives on a different grid")
        return np.broadcast_to(limit.coeffs, (M + 1, grid.N, grid.N))
    if isinstance(limit, TrajectorySnapshot):
        if limit.grid != grid:
            raise ValueError("limit trajectory lives on a different grid")
        f = limit.fields
        if len(f) != M + 1 or not np.allclose(limit.times, np.arange(M + 1) * dt, atol=1e-12):
            raise ValueError("limit trajectory must be saved at every step of the run's time mesh")
        return f
    f = np.asarray(limit)
    if f.shape[0] != M + 1:
        raise ValueError("limit trajectory must be saved at every step of the run's time mesh")
    return f


class _Stepper:
    """Shared per-chunk machinery: drivers, noise fields and snapshot buffers."""

    def __init__(self, cfg: StochasticRunConfig, seeds: np.ndarray):
        self.cfg = cfg
        self.grid = cfg.grid
        self.P = cfg.grid.heat_multiplier(cfg.dt)
        self.driver = BrownianDriver(seeds, amplitude=cfg.amplitude)
        self.full = cfg.full_noise
        self.full_plus = self.full.layout(self.grid).plus
        self.mask_n = cfg.noise.mask(self.grid)
        self.sqrt_eps = np.sqrt(cfg.noise.epsilon)

    def increments(self) -> tuple[np.ndarray, np.ndarray]:
        """``(dW_full, dW_n)`` coefficients for the current step, then advance."""
        dB = self.driver.increments(self.full_plus, self.cfg.dt)
        full = noise_field_hat(self.full, self.grid, dB)
        self.driver.advance(self.cfg.dt)
        return full, full * self.mask_n


def _l2(grid, c):
    return np.sqrt(sp.sobolev_norm_sq(grid, c, 0.0))


# ---------------------------------------------------------------- finite-n SPDEs


def _run_finite(kind: str, f0, cfg: StochasticRunConfig, b: DriftSpec | None) -> tuple[TrajectorySnapshot, dict]:
    grid = cfg.grid
    M, dt = cfg.steps, cfg.dt
    saves = cfg.save_points()
    seeds = cfg.seeds()
    b_phys = b.velocity_phys(grid) if b is not None else None
    if b_phys is not None:
        check_cfl(grid, dt, b_phys)
    out = np.empty((len(saves), cfg.paths, grid.N, grid.N), complex)
    aborted = np.zeros(cfg.paths, bool)
    for lo in range(0, cfg.paths, cfg.chunk):
        hi = min(cfg.paths, lo + cfg.chunk)
        st = _Stepper(cfg, seeds[lo:hi])
        _, f = _batched(f0, hi - lo)
        if kind == "euler":
            sp_mean = f[:, 0, 0]
            if np.abs(sp_mean).max() > 1e-12 * max(np.abs(f).max(), 1.0):
                raise ValueError("vorticity must have zero spatial mean")
        n0 = _l2(grid, f)
        dead = np.zeros(hi - lo, bool)
        si = 0
        if saves[0] == 0:
            out[0, lo:hi] = f
            si = 1
        for m in range(M):
            _, dWn = st.increments()
            vel = st.sqrt_eps * sp.to_physical(grid, dWn)
            if kind == "euler":
                vel = vel + dt * sp.to_physical(grid, sp.biot_savart_hat(grid, f))
            elif b_phys is not None:
                vel = vel + dt * b_phys
            adv = sp.transport_phys(grid, vel, f)
            # vel is divergence-free, so v . grad f = div(v f) has no mean; drop the roundoff
            adv[..., 0, 0] = 0.0
            f = st.P * (f - adv)
            nm = _l2(grid, f)
            bad = ~np.isfinite(nm) | (nm > n0 * (1 + cfg.l2_tol))
            if bad.any():
                dead |= bad
                f[bad] = 0.0
            if si < len(saves) and m + 1 == saves[si]:
                out[si, lo:hi] = f
                out[si, lo:hi][dead] = np.nan
                si += 1
        aborted[lo:hi] = dead
    times = np.array(saves) * dt
    return TrajectorySnapshot(grid, times, out, cfg.save_stride), {"aborted": aborted}


def run_stochastic_transport(f0: SpectralField, b: DriftSpec, cfg: StochasticRunConfig) -> TrajectorySnapshot:
    """Finite-``n`` stochastic transport in Ito form; fields have shape ``(S, paths, N, N)``.

    Paths whose L2 norm exceeds ``(1 + cfg.l2_tol) ||f0||`` are aborted and
    saved as NaN.
    """
    traj, meta = _run_finite("transport", f0, cfg, b)
    traj.meta.update(meta)
    return traj


def run_stochastic_euler(xi0: SpectralField, cfg: StochasticRunConfig) -> TrajectorySnapshot:
    """Finite-``n`` stochastic 2D Euler vorticity in Ito form."""
    traj, meta = _run_finite("euler", xi0, cfg, None)
    traj.meta.update(meta)
    return traj


# ---------------------------------------------------------------- limit fluctuations


def _run_linear(kind: str, cfg: StochasticRunConfig, limit, b: DriftSpec | None) -> TrajectorySnapshot:
    grid = cfg.grid
    M, dt = cfg.steps, cfg.dt
    series = _limit_series(limit, grid, M, dt)
    saves = cfg.save_points()
    seeds = cfg.seeds()
    b_phys = b.velocity_phys(grid) if (b is not None and kind == "transport") else None
    out = np.zeros((len(saves), cfg.paths, grid.N, grid.N), complex)
    for lo in range(0, cfg.paths, cfg.chunk):
        hi = min(cfg.paths, lo + cfg.chunk)
        st = _Stepper(cfg, seeds[lo:hi])
        y = np.zeros((hi - lo, grid.N, grid.N), complex)
        si = 1 if saves[0] == 0 else 0
        for m in range(M):
            dW, _ = st.increments()
            lim = series[m]
            grad_lim = sp.to_physical(grid, sp.grad_hat(grid, lim))
            noise_phys = sp.to_physical(grid, dW)
            prod = (noise_phys * grad_lim).sum(axis=-3)
            if kind == "transport":
                if b_phys is not None:
                    prod = prod + dt * (b_phys * sp.to_physical(grid, sp.grad_hat(grid, y))).sum(axis=-3)
            elif kind == "euler":
                u_lim = sp.to_physical(grid, sp.biot_savart_hat(grid, lim))
                u_y = sp.to_physical(grid, sp.biot_savart_hat(grid, y))
                grad_y = sp.to_physical(grid, sp.grad_hat(grid, y))
                prod = prod + dt * ((u_y * grad_lim).sum(axis=-3) + (u_lim * grad_y).sum(axis=-3))
            # kind == "convolution": forcing only, sign flipped below
            rhs = sp.from_physical(grid, prod) * grid.dealias_mask
            if kind == "convolution":
                y = st.P * (y + rhs)
            else:
                y = st.P * (y - rhs)
            if si < len(saves) and m + 1 == saves[si]:
                out[si, lo:hi] = y
                si += 1
    return TrajectorySnapshot(grid, np.array(saves) * dt, out, cfg.save_stride)


def run_fluctuation_transport(cfg: StochasticRunConfig, fbar: TrajectorySnapshot, b: DriftSpec) -> TrajectorySnapshot:
    """``dX + b . grad X dt = Delta X dt - dW . grad fbar``, ``X_0 = 0``.

    ``fbar`` must be saved at every step of ``cfg``'s mesh (stride 1).
    """
    return _run_linear("transport", cfg, fbar, b)


def run_fluctuation_euler(cfg: StochasticRunConfig, xibar: TrajectorySnapshot) -> TrajectorySnapshot:
    """Linearized fluctuation of 2D Euler around the Navier-Stokes limit ``xibar``."""
    return _run_linear("euler", cfg, xibar, None)


def stochastic_convolution(cfg: StochasticRunConfig, xibar: TrajectorySnapshot | SpectralField) -> TrajectorySnapshot:
    """``Z_t = int_0^t P_{t-s} (dW_s . grad xibar_s)``.

    ``xibar`` is either saved at every step or a single field frozen in time.
    """
    return _run_linear("convolution", cfg, xibar, None)


# ---------------------------------------------------------------- coupled runs


def run_coupled(kind: Literal["transport", "euler"], cfg: StochasticRunConfig, init: SpectralField,
                b: DriftSpec | None = None, s_values: tuple[float, ...] = (1.4,), delta: float = 1.0,
                keep: Literal["all", "final", "none"] = "final", track_martingale: bool = False,
                martingale_beta: float = 3.0) -> CoupledPath:
    """Co-evolve the finite-``n`` SPDE, its deterministic limit and the limit fluctuation.

    Recorded per saved time and path:

    * ``clt_s={s}``: ``||(u^n - u)/sqrt(eps_n) - U||^2_{H^-s}`` for each ``s``;
    * ``lln``: ``||u^n - u||^2_{H^-delta}``;
    * ``fluct``: ``||(u^n - u)/sqrt(eps_n)||^2_{H^-delta}``;
    * ``martingale`` (optional): ``||M^n_t||^2_{H^-beta} / eps_n`` with
      ``M^n`` the accumulated noise term.
    """
    if kind not in ("transport", "euler"):
        raise ValueError(f"unknown coupled kind {kind!r}")
    grid = cfg.grid
    M, dt = cfg.steps, cfg.dt
    saves = cfg.save_points()
    seeds = cfg.seeds()
    b = b if b is not None else DriftSpec("zero")
    b_phys = b.velocity_phys(grid)
    check_cfl(grid, dt, b_phys)
    _, c0 = _batched(init, 1)
    if kind == "euler" and abs(c0[0, 0, 0]) > 1e-12 * max(np.abs(c0).max(), 1.0):
        raise ValueError("vorticity must have zero spatial mean")
    eps = cfg.noise.epsilon
    sqrt_eps = np.sqrt(eps)
    S, P = len(saves), cfg.paths
    names = [f"clt_s={s:g}" for s in s_values] + ["lln", "fluct"] + (["martingale"] if track_martingale else [])
    errors = {k: np.full((S, P), np.nan) for k in names}
    keep_idx = list(range(S)) if keep == "all" else ([S - 1] if keep == "final" else [])
    store = {k: np.zeros((len(keep_idx), P, grid.N, grid.N), complex) for k in ("finite", "fluct")}
    limit_store = np.zeros((len(keep_idx), grid.N, grid.N), complex)
    aborted = np.zeros(P, bool)
    t_start = time.perf_counter()

    def record(si, lo, hi, un, ubar, U, mart, dead):
        d = un - ubar
        Xn = d / sqrt_eps if sqrt_eps > 0 else np.zeros_like(d)
        diff = Xn - U
        for s in s_values:
            errors[f"clt_s={s:g}"][si, lo:hi] = sp.sobolev_norm_sq(grid, diff, -s)
        errors["lln"][si, lo:hi] = sp.sobolev_norm_sq(grid, d, -delta)
        errors["fluct"][si, lo:hi] = sp.sobolev_norm_sq(grid, Xn, -delta)
        if track_martingale:
            errors["martingale"][si, lo:hi] = sp.sobolev_norm_sq(grid, mart, -martingale_beta) / eps if eps > 0 else 0.0
        for k in names:
            errors[k][si, lo:hi][dead] = np.nan
        if si in keep_idx:
            j = keep_idx.index(si)
            store["finite"][j, lo:hi] = un
            store["fluct"][j, lo:hi] = U
            limit_store[j] = ubar[0]

    for lo in range(0, P, cfg.chunk):
        hi = min(P, lo + cfg.chunk)
        st = _Stepper(cfg, seeds[lo:hi])
        un = np.broadcast_to(c0, (hi - lo, grid.N, grid.N)).copy()
        ubar = c0.copy()
        U = np.zeros_like(un)
        mart = np.zeros_like(un)
        n0 = _l2(grid, un)
        dead = np.zeros(hi - lo, bool)
        si = 0
        if saves[0] == 0:
            record(0, lo, hi, un, ubar, U, mart, dead)
            si = 1
        for m in range(M):
            dW, dWn = st.increments()
            noise_n = sqrt_eps * sp.to_physical(grid, dWn)
            noise_full = sp.to_physical(grid, dW)
            grad_bar = sp.to_physical(grid, sp.grad_hat(grid, ubar))
            grad_U = sp.to_physical(grid, sp.grad_hat(grid, U))
            grad_n = sp.to_physical(grid, sp.grad_hat(grid, un))
            if kind == "transport":
                adv_n = b_phys
                adv_bar = b_phys
                lin = (b_phys * grad_U).sum(axis=-3)
            else:
                adv_n = sp.to_physical(grid, sp.biot_savart_hat(grid, un))
                adv_bar = sp.to_physical(grid, sp.biot_savart_hat(grid, ubar))
                u_U = sp.to_physical(grid, sp.biot_savart_hat(grid, U))
                lin = (u_U * grad_bar).sum(axis=-3) + (adv_bar * grad_U).sum(axis=-3)
            drift_n = dt * (adv_n * grad_n).sum(axis=-3)
            noise_term = (noise_n * grad_n).sum(axis=-3)
            if track_martingale:
                nt = sp.from_physical(grid, noise_term) * grid.dealias_mask
                un_new = st.P * (un - sp.from_physical(grid, drift_n) * grid.dealias_mask - nt)
                mart = mart - nt
            else:
                un_new = st.P * (un - sp.from_physical(grid, drift_n + noise_term) * grid.dealias_mask)
            ubar_new = st.P * (ubar - dt * sp.from_physical(grid, (adv_bar * grad_bar).sum(axis=-3)) * grid.dealias_mask)
            forcing = (noise_full * grad_bar).sum(axis=-3)
            U = st.P * (U - sp.from_physical(grid, dt * lin + forcing) * grid.dealias_mask)
            un, ubar = un_new, ubar_new
            nm = _l2(grid, un)
            bad = ~np.isfinite(nm) | (nm > n0 * (1 + cfg.l2_tol))
            if bad.any():
                dead |= bad
                un[bad] = 0.0
            if si < S and m + 1 == saves[si]:
                record(si, lo, hi, un, ubar, U, mart, dead)
                si += 1
        aborted[lo:hi] = dead

    times = np.array(saves) * dt
    kt = times[keep_idx] if keep_idx else np.array([])
    fields = {}
    if keep_idx:
        fields = {
            "finite": TrajectorySnapshot(grid, kt, store["finite"], cfg.save_stride),
            "fluct": TrajectorySnapshot(grid, kt, store["fluct"], cfg.save_stride),
            "limit": TrajectorySnapshot(grid, kt, limit_store, cfg.save_stride),
        }
    meta = {"wall_time": time.perf_counter() - t_start, "aborted": int(aborted.sum()), "n": cfg.noise.n,
            "epsilon": eps, "paths": P, "steps": M}
    log.info("coupled %s n=%d paths=%d aborted=%d in %.1fs", kind, cfg.noise.n, P, meta["aborted"], meta["wall_time"])
    return CoupledPath(kind, times, fields, errors, aborted, seeds, eps, meta)


def dual_pairing(fbar: TrajectorySnapshot, duals: np.ndarray, cfg: StochasticRunConfig) -> np.ndarray:
    """``sum_m <fbar_m grad g_m, dW_m>`` on ``cfg``'s driver, one value per path.

    ``duals[m]`` holds ``S_{T, t_m} phi`` at the left endpoint of step ``m``.
    This is the weak (dual) representation of ``<X_T, phi>``.
    """
    grid = cfg.grid
    M = cfg.steps
    series = _limit_series(fbar, grid, M, cfg.dt)
    st = _Stepper(cfg, cfg.seeds())
    acc = np.zeros(cfg.paths)
    for m in range(M):
        dW, _ = st.increments()
        flux = sp.to_physical(grid, series[m]) * sp.to_physical(grid, sp.grad_hat(grid, duals[m]))
        flux_hat = sp.from_physical(grid, flux)
        acc += sp.inner(flux_hat[None], dW).sum(axis=-1)
    return acc
