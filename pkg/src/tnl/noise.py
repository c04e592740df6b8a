"""Transport noise: the divergence-free Fourier basis, its scaling and a seeded driver.

The real noise field is

    W(t, x) = sum_{k != 0} |k|^(-alpha) a_k e_k(x) B^k_t

with ``a_k = +-k_perp/|k|`` (sign fixed by the half-lattice ``k`` belongs to),
``B^{-k} = conj(B^k)`` and ``E|B^k_t|^2 = t``.  Only the half-lattice
``k1 > 0 or (k1 == 0 and k2 > 0)`` is ever sampled.

Per-mode Gaussian increments are derived from a SplitMix64 hash of
``(seed, k1, k2, step)``, so a mode's stream does not depend on which other modes
are requested.  That is what couples a cutoff-``n`` model with a larger one, or
with the full grid-resolvable noise, on one driver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from .spectral import TorusGrid, VectorField, leray_hat, sobolev_norm_sq

C_D = 2.0  # d / (d - 1) with d = 2

Window = Literal["lowpass", "band"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_OFFSET = np.uint64(1 << 32)


def splitmix64(x) -> np.ndarray:
    """One SplitMix64 output for each (uint64) state in ``x``."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed; ``derive_seed(m, n, path)`` never depends on sibling keys."""
    h = splitmix64(np.uint64(master & 0xFFFFFFFFFFFFFFFF))
    for key in keys:
        h = splitmix64(h ^ splitmix64(np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)))
    return int(h)


def _uniform53(h: np.ndarray) -> np.ndarray:
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def in_upper_half(k1, k2) -> np.ndarray:
    k1 = np.asarray(k1)
    k2 = np.asarray(k2)
    return (k1 > 0) | ((k1 == 0) & (k2 > 0))


def lattice_modes(lo: float, hi: float) -> np.ndarray:
    """Integer vectors with ``lo <= |k| <= hi`` and ``k != 0``, shape ``(M, 2)``."""
    r = int(np.floor(hi))
    k = np.arange(-r, r + 1)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    ksq = k1**2 + k2**2
    sel = (ksq >= lo * lo) & (ksq <= hi * hi) & (ksq > 0)
    return np.stack([k1[sel], k2[sel]], axis=1)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Spectral window, weights and scaling of ``W^{n, alpha}``."""

    alpha: float
    n: int
    window: Window = "lowpass"
    modes: np.ndarray = field(repr=False, default=None)
    epsilon: float = field(default=None)

    def __post_init__(self):
        if self.modes is None:
            lo, hi = (self.n, 2 * self.n) if self.window == "band" else (1, self.n)
            object.__setattr__(self, "modes", lattice_modes(lo, hi))
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", C_D / self.weight_sum)

    @cached_property
    def weight_sum(self) -> float:
        """``sum |k|^(-2 alpha)`` over the window, i.e. the trace weight of ``Q^n``."""
        ksq = (self.modes.astype(float) ** 2).sum(axis=1)
        return float(np.sum(ksq ** (-self.alpha)))

    @property
    def mode_count(self) -> int:
        return len(self.modes)

    @property
    def radius(self) -> float:
        return 2.0 * self.n if self.window == "band" else float(self.n)

    @cached_property
    def plus_modes(self) -> np.ndarray:
        m = self.modes
        return m[in_upper_half(m[:, 0], m[:, 1])]

    @cached_property
    def unit_vectors(self) -> np.ndarray:
        """``a_k`` for every entry of ``modes``."""
        k = self.modes.astype(float)
        perp = np.stack([-k[:, 1], k[:, 0]], axis=1) / np.linalg.norm(k, axis=1)[:, None]
        sign = np.where(in_upper_half(self.modes[:, 0], self.modes[:, 1]), 1.0, -1.0)
        return perp * sign[:, None]

    def summary(self) -> dict:
        return {"alpha": self.alpha, "n": self.n, "window": self.window,
                "epsilon": self.epsilon, "mode_count": self.mode_count}

    def to_json(self) -> str:
        return json.dumps(self.summary())

    def mask(self, grid: TorusGrid) -> np.ndarray:
        """Indicator of the window on the grid."""
        lo, hi = (self.n, 2 * self.n) if self.window == "band" else (1, self.n)
        ksq = grid.k_sq
        return (ksq >= lo * lo) & (ksq <= hi * hi) & (ksq > 0)

    def layout(self, grid: TorusGrid) -> "_GridLayout":
        """Index tables mapping sampled half-lattice increments onto ``grid``."""
        cache = self.__dict__.setdefault("_layouts", {})
        if grid.N not in cache:
            if self.radius > grid.k_max:
                raise ValueError(f"noise radius {self.radius} exceeds the dealias cutoff {grid.k_max} of N={grid.N}")
            cache[grid.N] = _GridLayout.build(self, grid)
        return cache[grid.N]


@dataclass(frozen=True, eq=False)
class _GridLayout:
    plus: np.ndarray        # (Mp, 2) integer modes in the upper half-lattice
    idx_plus: tuple
    idx_minus: tuple
    amp: np.ndarray         # (2, Mp): |k|^-alpha a_k

    @classmethod
    def build(cls, model: NoiseModel, grid: TorusGrid) -> _GridLayout:
        plus = model.plus_modes
        k = plus.astype(float)
        norm = np.linalg.norm(k, axis=1)
        a = np.stack([-k[:, 1], k[:, 0]]) / norm
        amp = a * norm ** (-model.alpha)
        N = grid.N
        return cls(plus, (plus[:, 0] % N, plus[:, 1] % N), ((-plus[:, 0]) % N, (-plus[:, 1]) % N), amp)


class BrownianDriver:
    """Seeded complex Brownian increments for a batch of independent paths.

    ``seeds`` is an int or a sequence (one per path); path ``p`` only ever
    reads from its own seed, so batching never changes a path's draws.  The
    driver is single-owner mutable state: ``increments`` reads the current step,
    ``advance`` moves the clock.
    """

    def __init__(self, seeds, amplitude: float = 1.0):
        arr = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
        self.batched = np.ndim(seeds) > 0
        self.seeds = arr
        self.amplitude = float(amplitude)
        self.step = 0
        self.time = 0.0
        self._base: dict[bytes, np.ndarray] = {}

    @property
    def paths(self) -> int:
        return len(self.seeds)

    def _base_hash(self, plus: np.ndarray) -> np.ndarray:
        key = plus.tobytes()
        if key not in self._base:
            k1 = plus[:, 0].astype(np.int64).astype(np.uint64) + _OFFSET
            k2 = plus[:, 1].astype(np.int64).astype(np.uint64) + _OFFSET
            with np.errstate(over="ignore"):
                h = splitmix64(self.seeds)[:, None]
                h = splitmix64(h ^ splitmix64(k1)[None, :])
                h = splitmix64(h ^ splitmix64(k2 * _MIX1)[None, :])
            self._base[key] = h
        return self._base[key]

    def increments(self, plus: np.ndarray, dt: float) -> np.ndarray:
        """Complex increments ``Delta B^k`` over the current step, shape ``(paths, Mp)``."""
        if not in_upper_half(plus[:, 0], plus[:, 1]).all():
            raise ValueError("increments are only sampled on the upper half-lattice")
        step_key = splitmix64(np.uint64(self.step) + np.uint64(0x5DEECE66D))
        h = splitmix64(self._base_hash(plus) ^ step_key)
        u1 = _uniform53(splitmix64(h ^ np.uint64(1)))
        u2 = _uniform53(splitmix64(h ^ np.uint64(2)))
        r = np.sqrt(-2.0 * np.log(u1)) * np.sqrt(dt / 2.0) * self.amplitude
        theta = 2.0 * np.pi * u2
        return r * np.cos(theta) + 1j * r * np.sin(theta)

    def advance(self, dt: float) -> None:
        self.step += 1
        self.time += dt

    def reset(self) -> None:
        self.step = 0
        self.time = 0.0


def build_noise_model(alpha: float, n: int, window: Window = "lowpass") -> NoiseModel:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if int(n) != n or n < 1:
        raise ValueError(f"cutoff n must be a positive integer, got {n}")
    if window not in ("lowpass", "band"):
        raise ValueError(f"unknown window {window!r}")
    return NoiseModel(float(alpha), int(n), window)


def noise_field_hat(model: NoiseModel, grid: TorusGrid, dB: np.ndarray) -> np.ndarray:
    """Coefficients ``(paths, 2, N, N)`` of ``sum |k|^-alpha a_k e_k dB^k`` from half-lattice increments."""
    lay = model.layout(grid)
    out = np.zeros((dB.shape[0], 2, grid.N, grid.N), complex)
    vals = lay.amp[None] * dB[:, None, :]
    out[:, :, lay.idx_plus[0], lay.idx_plus[1]] = vals
    # a_{-k} = a_k and dB^{-k} = conj(dB^k)
    out[:, :, lay.idx_minus[0], lay.idx_minus[1]] = np.conj(vals)
    return out


def sample_increment_hat(model: NoiseModel, grid: TorusGrid, driver: BrownianDriver, dt: float) -> np.ndarray:
    """Batched increment coefficients at the driver's current step (clock not advanced)."""
    dB = driver.increments(model.layout(grid).plus, dt)
    return noise_field_hat(model, grid, dB)


def sample_noise_increment(model: NoiseModel, driver: BrownianDriver, dt: float,
                           grid: TorusGrid) -> VectorField | np.ndarray:
    """One step of ``W^{n, alpha}`` (without the ``sqrt(eps_n)`` factor); advances the driver.

    Returns a ``VectorField`` for a single-path driver, the raw batched
    coefficient array otherwise.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    c = sample_increment_hat(model, grid, driver, dt)
    driver.advance(dt)
    if driver.batched:
        return c
    return VectorField(grid, c[0], divergence_free=True)


def ito_integral_variance(model: NoiseModel, f_path: np.ndarray, dt: float, grid: TorusGrid) -> float:
    """Predicted variance of ``sum_m <f_m, Delta W_m>`` for a deterministic path.

    ``f_path`` holds vector coefficients ``(M, 2, N, N)`` at the left endpoints
    of the ``M`` steps.  Equals the left-point quadrature of
    ``int ||Pi f_r||^2_{H^-alpha}`` restricted to the model's window.
    """
    f_path = np.asarray(f_path)
    proj = leray_hat(grid, f_path) * model.mask(grid)
    return float(dt * sobolev_norm_sq(grid, proj, -model.alpha).sum())


def covariance_apply(f: VectorField, alpha: float) -> VectorField:
    """``Q^alpha f = (-Delta)^-alpha Pi f``."""
    grid = f.grid
    if np.abs(f.coeffs[:, 0, 0]).max() > 1e-14 * max(np.abs(f.coeffs).max(), 1.0):
        raise ValueError("covariance operator needs a zero-mean field")
    w = grid.sobolev_weight(-alpha)
    w = w.copy()
    w[0, 0] = 0.0
    return VectorField(grid, leray_hat(grid, f.coeffs) * w, divergence_free=True)
