"""Deterministic solvers: advection-diffusion, 2D Navier-Stokes vorticity, the
controlled skeleton equations and the backward dual (Fokker-Planck) propagator.

Every solver uses the same integrating-factor Euler step

    f_{m+1} = P_dt (f_m - dt * (v_m . grad f_m))

with the heat semigroup ``P_dt`` applied exactly in Fourier space and the
transport term treated explicitly and dealiased.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import spectral as sp
from .spectral import SpectralField, TorusGrid, VectorField

log = logging.getLogger(__name__)

GROWTH_LIMIT = 10.0


class StabilityError(RuntimeError):
    """Raised when a time step violates the CFL rule or a run blows up."""


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """A smooth, time-independent drift ``b``.

    Presets: ``zero``, ``uniform`` (``(U, 0)``), ``shear`` (``(U sin 2 pi x2, 0)``),
    ``taylor_green`` (velocity of the ``sin 2 pi x1 sin 2 pi x2`` vortex, scaled
    to peak speed ``U``) and ``custom`` (explicit vector coefficients on a grid).
    Smooth presets sit in the Krylov-Rockner class with ``p = q = inf``.
    """

    preset: Literal["zero", "uniform", "shear", "taylor_green", "custom"] = "zero"
    amplitude: float = 1.0
    coeffs: np.ndarray | None = field(default=None, repr=False)
    p: float = np.inf
    q: float = np.inf

    @property
    def gamma(self) -> float:
        return 2.0 / self.q + 2.0 / self.p

    @property
    def divergence_free(self) -> bool:
        return self.preset != "custom" or _is_div_free(self.coeffs)

    def velocity_hat(self, grid: TorusGrid) -> np.ndarray:
        x1, x2 = grid.points
        U = self.amplitude
        if self.preset == "zero":
            return np.zeros((2, grid.N, grid.N), complex)
        if self.preset == "uniform":
            return sp.from_physical(grid, np.stack([np.full_like(x1, U), np.zeros_like(x1)]))
        if self.preset == "shear":
            return sp.from_physical(grid, np.stack([U * np.sin(2 * np.pi * x2), np.zeros_like(x1)]))
        if self.preset == "taylor_green":
            # u = (sin x1 cos x2, -cos x1 sin x2) in 2 pi units: peak speed U
            u1 = U * np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
            u2 = -U * np.cos(2 * np.pi * x1) * np.sin(2 * np.pi * x2)
            return sp.from_physical(grid, np.stack([u1, u2]))
        if self.preset == "custom":
            c = np.asarray(self.coeffs, complex)
            if c.shape != (2, grid.N, grid.N):
                raise ValueError("custom drift coefficients do not match the grid")
            return c
        raise ValueError(f"unknown drift preset {self.preset!r}")

    def velocity(self, grid: TorusGrid) -> VectorField:
        return VectorField(grid, self.velocity_hat(grid), divergence_free=self.divergence_free)

    def velocity_phys(self, grid: TorusGrid) -> np.ndarray:
        return sp.to_physical(grid, self.velocity_hat(grid))


def _is_div_free(c) -> bool:
    if c is None:
        return True
    c = np.asarray(c)
    N = c.shape[-1]
    grid = sp.get_grid(N)
    return np.abs(sp.div_hat(grid, c)).max() <= 1e-10 * max(np.sqrt((np.abs(c) ** 2).sum()), 1.0)


@dataclass(frozen=True, eq=False)
class TrajectorySnapshot:
    """Saved states of a run: ``fields[i]`` at ``times[i]``.

    ``fields`` may carry a batch axis after the time axis
    (``(S, paths, N, N)``) for stochastic runs.
    """

    grid: TorusGrid
    times: np.ndarray
    fields: np.ndarray
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.ndim != 1 or len(t) != len(self.fields):
            raise ValueError("times and fields disagree in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return len(self.times)

    def field(self, i: int) -> SpectralField:
        c = self.fields[i]
        if c.ndim != 2:
            raise ValueError("field() needs an unbatched trajectory; index the batch axis first")
        return SpectralField(self.grid, c)

    @property
    def final(self) -> SpectralField:
        return self.field(-1)

    def at_time(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not saved")
        return self.fields[i]

    def norms(self, s: float) -> np.ndarray:
        return np.sqrt(sp.sobolev_norm_sq(self.grid, self.fields, s))

    def to_csv(self, path, modes: list[tuple[int, int]]) -> None:
        """Write ``t, path, k1, k2, re, im`` rows for the selected modes."""
        f = self.fields
        batched = f.ndim == 4
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "path", "k1", "k2", "re", "im"])
            for i, t in enumerate(self.times):
                block = f[i] if batched else f[i][None]
                for p, c in enumerate(block):
                    for k1, k2 in modes:
                        v = c[self.grid.mode_index(k1, k2)]
                        w.writerow([repr(float(t)), p, k1, k2, repr(float(v.real)), repr(float(v.imag))])

    def save_npz(self, path, checkpoints: dict[str, float] | None = None) -> None:
        """Full-field dump; ``checkpoints`` maps names to saved times."""
        extra = {}
        for name, t in (checkpoints or {}).items():
            extra[f"checkpoint_{name}"] = self.at_time(t)
        np.savez(path, times=self.times, fields=self.fields, N=self.grid.N, **extra)


def step_count(T: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if T < 0:
        raise ValueError(f"T must be nonnegative, got {T}")
    M = int(round(T / dt))
    if abs(M * dt - T) > 1e-9 * max(T, dt):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return M


def cfl_limit(grid: TorusGrid, speed: float) -> float:
    """Largest explicit step for a transport velocity of the given peak speed."""
    if speed <= 0:
        return np.inf
    return 0.5 / (2 * np.pi * grid.k_max * speed)


def check_cfl(grid: TorusGrid, dt: float, v_phys: np.ndarray) -> None:
    speed = float(np.sqrt((v_phys**2).sum(axis=-3)).max()) if v_phys is not None else 0.0
    lim = cfl_limit(grid, speed)
    if dt > lim * (1 + 1e-12):
        raise StabilityError(f"dt={dt:g} exceeds the transport CFL limit {lim:.3g} (peak speed {speed:.3g})")


class ControlSchedule:
    """Piecewise-constant (left endpoint) lookup of control fields on the solver grid."""

    def __init__(self, times: np.ndarray, coeffs: np.ndarray):
        self.times = np.asarray(times, float)
        self.coeffs = coeffs

    def index(self, t: float) -> int:
        return int(np.clip(np.searchsorted(self.times, t + 1e-12, side="right") - 1, 0, len(self.times) - 1))

    def at(self, t: float) -> np.ndarray:
        return self.coeffs[self.index(t)]


def integrate(grid: TorusGrid, f0: np.ndarray, T: float, dt: float,
              advect: Callable[[int, float, np.ndarray], np.ndarray], stride: int = 1,
              check: bool = True) -> TrajectorySnapshot:
    """Integrating-factor Euler with a caller-supplied explicit term.

    ``advect(m, t, f)`` returns the coefficients of the term subtracted from
    ``f`` before diffusion.  Snapshots are taken every ``stride`` steps and at
    ``T``.
    """
    M = step_count(T, dt)
    P = grid.heat_multiplier(dt)
    f = np.array(f0, complex)
    n0 = float(np.sqrt(sp.sobolev_norm_sq(grid, f, 0.0)).max())
    times, saved = [0.0], [f.copy()]
    for m in range(M):
        t = m * dt
        f = P * (f - dt * advect(m, t, f))
        if check and n0 > 0:
            nm = float(np.sqrt(sp.sobolev_norm_sq(grid, f, 0.0)).max())
            if not np.isfinite(nm) or nm > GROWTH_LIMIT * n0:
                raise StabilityError(f"L2 norm grew from {n0:.3e} to {nm:.3e} at step {m + 1}")
        if (m + 1) % stride == 0 or m + 1 == M:
            times.append((m + 1) * dt)
            saved.append(f.copy())
    return TrajectorySnapshot(grid, np.array(times), np.array(saved), stride)


def _field_coeffs(f: SpectralField | np.ndarray) -> tuple[TorusGrid, np.ndarray]:
    if isinstance(f, SpectralField):
        return f.grid, f.coeffs
    c = np.asarray(f)
    return sp.get_grid(c.shape[-1]), c


def _control_schedule(g, grid: TorusGrid) -> ControlSchedule | None:
    if g is None:
        return None
    sched = ControlSchedule(g.times, g.coeffs)
    if sched.coeffs.shape[-1] != grid.N:
        raise ValueError("control grid does not match the field grid")
    return sched


def _linear(solver):
    """Let a linear solver accept complex (non-Hermitian) data such as a lone ``e_k``."""

    def wrapped(f0, *args, **kwargs):
        grid, c0 = _field_coeffs(f0)
        re = sp.symmetrize(grid, c0)
        im = (c0 - re) / 1j
        if not np.abs(im).max() > 1e-15 * max(np.abs(c0).max(), 1e-300):
            return solver(f0, *args, **kwargs)
        a = solver(SpectralField(grid, re), *args, **kwargs)
        b = solver(SpectralField(grid, im), *args, **kwargs)
        return TrajectorySnapshot(grid, a.times, a.fields + 1j * b.fields, a.stride)

    wrapped.__name__ = solver.__name__
    wrapped.__doc__ = solver.__doc__
    return wrapped


@_linear
def solve_advection_diffusion(f0: SpectralField, b: DriftSpec, T: float, dt: float,
                              stride: int = 1) -> TrajectorySnapshot:
    """``d_t f + b . grad f = Delta f``."""
    grid, c0 = _field_coeffs(f0)
    b_phys = b.velocity_phys(grid)
    check_cfl(grid, dt, b_phys)
    if not np.any(b_phys):
        return integrate(grid, c0, T, dt, lambda m, t, f: 0.0, stride)
    return integrate(grid, c0, T, dt, lambda m, t, f: sp.transport_phys(grid, b_phys, f), stride)


@_linear
def solve_skeleton_transport(f0: SpectralField, b: DriftSpec, g, T: float, dt: float,
                             stride: int = 1) -> TrajectorySnapshot:
    """Skeleton of the transport equation: advection by ``b + g_t``, ``g`` a ``ControlPath``."""
    grid, c0 = _field_coeffs(f0)
    b_phys = b.velocity_phys(grid)
    sched = _control_schedule(g, grid)
    if sched is None:
        return solve_advection_diffusion(f0, b, T, dt, stride)
    g_phys = sp.to_physical(grid, sched.coeffs)
    for gp in g_phys:
        check_cfl(grid, dt, b_phys + gp)

    def advect(m, t, f):
        return sp.transport_phys(grid, b_phys + g_phys[sched.index(t)], f)

    return integrate(grid, c0, T, dt, advect, stride)


def _require_zero_mean(c: np.ndarray) -> None:
    if np.abs(c[..., 0, 0]).max() > 1e-12 * max(np.abs(c).max(), 1.0):
        raise ValueError("vorticity must have zero spatial mean")


def _nse_advect(grid: TorusGrid, dt: float, extra=None):
    def advect(m, t, xi):
        u = sp.to_physical(grid, sp.biot_savart_hat(grid, xi))
        if extra is not None:
            u = u + extra(t)
        check_cfl(grid, dt, u)
        return sp.transport_phys(grid, u, xi)

    return advect


def solve_nse_vorticity(xi0: SpectralField, T: float, dt: float, stride: int = 1) -> TrajectorySnapshot:
    """``d_t xi + (K * xi) . grad xi = Delta xi``."""
    grid, c0 = _field_coeffs(xi0)
    _require_zero_mean(c0)
    return integrate(grid, c0, T, dt, _nse_advect(grid, dt), stride)


def solve_skeleton_euler(xi0: SpectralField, g, T: float, dt: float, stride: int = 1) -> TrajectorySnapshot:
    """Navier-Stokes vorticity with the extra advecting control ``g``."""
    grid, c0 = _field_coeffs(xi0)
    _require_zero_mean(c0)
    sched = _control_schedule(g, grid)
    if sched is None:
        return solve_nse_vorticity(xi0, T, dt, stride)
    g_phys = sp.to_physical(grid, sched.coeffs)
    return integrate(grid, c0, T, dt, _nse_advect(grid, dt, lambda t: g_phys[sched.index(t)]), stride)


@_linear
def solve_backward_dual(phi: SpectralField, b: DriftSpec, tau: float, dt: float,
                        stride: int = 1) -> TrajectorySnapshot:
    """``g_t = S_{tau, t} phi`` for ``d_t g + div(b g) + Delta g = 0``, ``g_tau = phi``.

    Solved forward in reversed time ``h_s = g_{tau - s}``; the returned
    snapshot is indexed by the original time ``t`` in ``[0, tau]``.
    """
    if tau <= 0:
        raise ValueError(f"terminal time must be positive, got {tau}")
    grid, c0 = _field_coeffs(phi)
    b_phys = b.velocity_phys(grid)
    check_cfl(grid, dt, b_phys)
    # the Fokker-Planck sign: d_s h = Delta h + div(b h)
    traj = integrate(grid, c0, tau, dt, lambda m, t, h: -sp.div_product_phys(grid, b_phys, h), stride)
    times = tau - traj.times[::-1]
    times[0] = 0.0
    return TrajectorySnapshot(grid, times, traj.fields[::-1].copy(), stride)


def propagate_dual(phi: SpectralField, b: DriftSpec, tau: float, t: float, dt: float) -> SpectralField:
    """``S_{tau, t} phi`` at a single time."""
    if t == tau:
        return phi
    traj = solve_backward_dual(phi, b, tau - t, dt, stride=step_count(tau - t, dt))
    return SpectralField(traj.grid, traj.fields[0])


def c_delta_norm(f: SpectralField | np.ndarray, delta: float, grid: TorusGrid | None = None) -> float:
    """Proxy Holder norm ``sup|f| + sup|(-Delta)^(delta/2) f|`` on the grid."""
    if isinstance(f, SpectralField):
        grid, c = f.grid, f.coeffs
    else:
        c = np.asarray(f)
    re = sp.symmetrize(grid, c)
    im = (c - re) / 1j
    total = 0.0
    for part in (re, im):
        u = sp.to_physical(grid, part)
        du = sp.to_physical(grid, part * grid.sobolev_weight(delta / 2.0) * (grid.k_sq > 0))
        total += np.abs(u).max() + (np.abs(du).max() if delta > 0 else 0.0)
    return float(total)
