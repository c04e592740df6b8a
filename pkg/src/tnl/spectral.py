"""Fields on the unit 2-torus in Fourier representation.

Coefficients are stored in numpy FFT order on an ``(N, N)`` array, normalized so
that ``f(x) = sum_k c[k] exp(2 pi i k.x)``; the first array axis carries ``k1``
(direction ``x1``) and the second ``k2``.  With this normalization the L2 inner
product on the unit torus is ``sum_k conj(a[k]) b[k]`` and ``c[0, 0]`` is the
spatial mean.

The module has two layers.  The array kernels (``to_physical``, ``grad_hat``,
``transport_hat``...) take raw coefficient arrays with arbitrary leading batch
axes and are what the time steppers use.  ``SpectralField`` and ``VectorField``
are small immutable wrappers around single fields, carrying the grid and the
validation the public operations promise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusGrid:
    """Uniform ``N x N`` grid on ``[0, 1)^2`` with its wavenumber tables."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 8 or self.N % 2:
            raise ValueError(f"grid resolution must be an even integer >= 8, got {self.N!r}")

    @property
    def k_max(self) -> int:
        """Dealiasing cutoff of the 2/3 rule."""
        return self.N // 3

    @property
    def spacing(self) -> float:
        return 1.0 / self.N

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.fft.fftfreq(self.N, d=1.0 / self.N).astype(int)
        k1, k2 = np.meshgrid(k, k, indexing="ij")
        return k1, k2

    @cached_property
    def k_vec(self) -> np.ndarray:
        """Integer wavevectors, shape ``(2, N, N)``."""
        return np.stack(self.wavenumbers).astype(float)

    @cached_property
    def k_deriv(self) -> np.ndarray:
        """Wavevectors used by derivative operators (Nyquist components zeroed).

        Zeroing the Nyquist entry keeps spectral derivatives real and exactly
        skew-adjoint on the grid.
        """
        kd = self.k_vec.copy()
        kd[kd == -self.N // 2] = 0.0
        return kd

    @cached_property
    def k_sq(self) -> np.ndarray:
        return (self.k_vec**2).sum(axis=0)

    @cached_property
    def k_abs(self) -> np.ndarray:
        return np.sqrt(self.k_sq)

    @cached_property
    def kd_sq(self) -> np.ndarray:
        return (self.k_deriv**2).sum(axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        k1, k2 = self.wavenumbers
        return (np.abs(k1) <= self.k_max) & (np.abs(k2) <= self.k_max)

    @cached_property
    def points(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.N) / self.N
        return np.meshgrid(x, x, indexing="ij")

    @cached_property
    def _conj_index(self) -> tuple[np.ndarray, np.ndarray]:
        idx = (-np.arange(self.N)) % self.N
        return idx, np.arange(self.N // 2 + 1, self.N)

    def mode_index(self, k1: int, k2: int) -> tuple[int, int]:
        """Array position of the mode ``(k1, k2)``."""
        h = self.N // 2
        if not (-h <= k1 < h and -h <= k2 < h):
            raise ValueError(f"mode {(k1, k2)} not representable on N={self.N}")
        return k1 % self.N, k2 % self.N

    def sobolev_weight(self, s: float) -> np.ndarray:
        """``|k|^(2s)`` off the origin, 1 at ``k = 0``."""
        w = np.ones_like(self.k_sq)
        nz = self.k_sq > 0
        w[nz] = self.k_sq[nz] ** s
        return w

    def heat_multiplier(self, t: float) -> np.ndarray:
        return np.exp(-4.0 * np.pi**2 * self.k_sq * t)


@lru_cache(maxsize=None)
def get_grid(N: int) -> TorusGrid:
    return TorusGrid(N)


# ---------------------------------------------------------------- array kernels


def to_physical(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Real physical values from full Hermitian coefficients.

    Only the non-negative ``k2`` half is read, which enforces Hermitian
    symmetry on the way out.
    """
    N = grid.N
    return sfft.irfft2(c[..., : N // 2 + 1], s=(N, N), norm="forward")


def from_physical(grid: TorusGrid, u: np.ndarray) -> np.ndarray:
    """Full coefficient array of real physical values (exactly Hermitian)."""
    N = grid.N
    half = sfft.rfft2(u, norm="forward")
    out = np.empty(u.shape[:-2] + (N, N), dtype=complex)
    out[..., : N // 2 + 1] = half
    rows, cols = grid._conj_index
    out[..., N // 2 + 1 :] = np.conj(half[..., rows, :][..., N - cols])
    return out


def symmetrize(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Average ``c(k)`` with ``conj(c(-k))``."""
    rows = (-np.arange(grid.N)) % grid.N
    return 0.5 * (c + np.conj(c[..., rows, :][..., rows]))


def grad_hat(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Spectral gradient, output has a component axis inserted before the grid axes."""
    return (1j * TWO_PI) * grid.k_deriv * c[..., None, :, :]


def div_hat(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    return (1j * TWO_PI) * (grid.k_deriv * v).sum(axis=-3)


def curl_hat(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """``d1 v2 - d2 v1``."""
    kd = grid.k_deriv
    return (1j * TWO_PI) * (kd[0] * v[..., 1, :, :] - kd[1] * v[..., 0, :, :])


def leray_hat(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    kd = grid.k_deriv
    ksq = grid.kd_sq
    safe = np.where(ksq > 0, ksq, 1.0)
    proj = (kd * v).sum(axis=-3) / safe
    return v - kd * proj[..., None, :, :]


def biot_savart_hat(grid: TorusGrid, xi: np.ndarray) -> np.ndarray:
    """Velocity with ``curl u = xi`` and ``div u = 0``.

    Stream function ``psi = -xi / (4 pi^2 |k|^2)``, ``u = (-d2 psi, d1 psi)``,
    i.e. ``u_hat = i (k2, -k1) xi_hat / (2 pi |k|^2)``.
    """
    kd = grid.k_deriv
    ksq = grid.kd_sq
    factor = np.where(ksq > 0, 1j / (TWO_PI * np.where(ksq > 0, ksq, 1.0)), 0.0)
    fx = factor * xi
    return np.stack([kd[1] * fx, -kd[0] * fx], axis=-3)


def transport_phys(grid: TorusGrid, v_phys: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Dealiased ``v . grad f`` for ``v`` already in physical space."""
    g = to_physical(grid, grad_hat(grid, c))
    prod = (v_phys * g).sum(axis=-3)
    return from_physical(grid, prod) * grid.dealias_mask


def transport_hat(grid: TorusGrid, v: np.ndarray, c: np.ndarray) -> np.ndarray:
    return transport_phys(grid, to_physical(grid, v), c)


def div_product_phys(grid: TorusGrid, v_phys: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Dealiased ``div(v f)``."""
    f = to_physical(grid, c)
    flux = from_physical(grid, v_phys * f[..., None, :, :])
    return div_hat(grid, flux) * grid.dealias_mask


def sobolev_norm_sq(grid: TorusGrid, c: np.ndarray, s: float) -> np.ndarray:
    """Squared ``H^s`` norm over the last two axes."""
    w = grid.sobolev_weight(s)
    return (w * np.abs(c) ** 2).sum(axis=(-2, -1))


def inner(c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """L2 inner product of real fields from their coefficients."""
    return np.real((np.conj(c1) * c2).sum(axis=(-2, -1)))


# ---------------------------------------------------------------- value types


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpectralField:
    """A real scalar field on the torus, held as Fourier coefficients."""

    grid: TorusGrid
    coeffs: np.ndarray
    zero_mean: bool = False

    def __post_init__(self):
        c = _frozen(self.coeffs)
        if c.shape != (self.grid.N, self.grid.N):
            raise ValueError(f"coefficients must have shape {(self.grid.N,) * 2}, got {c.shape}")
        if self.zero_mean and c[0, 0] != 0:
            raise ValueError("field flagged zero-mean has a nonzero k=0 coefficient")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_physical(cls, grid: TorusGrid, values: np.ndarray, zero_mean: bool = False) -> SpectralField:
        c = from_physical(grid, np.asarray(values, dtype=float))
        if zero_mean:
            c[0, 0] = 0.0
        return cls(grid, c, zero_mean)

    @classmethod
    def zeros(cls, grid: TorusGrid) -> SpectralField:
        return cls(grid, np.zeros((grid.N, grid.N), complex), zero_mean=True)

    @classmethod
    def from_modes(cls, grid: TorusGrid, modes: dict[tuple[int, int], complex]) -> SpectralField:
        """Field with the given coefficients; conjugate partners are filled in."""
        c = np.zeros((grid.N, grid.N), complex)
        for (k1, k2), val in modes.items():
            c[grid.mode_index(k1, k2)] = val
            c[grid.mode_index(-k1, -k2)] = np.conj(val)
        return cls(grid, c, zero_mean=c[0, 0] == 0)

    @classmethod
    def random(cls, grid: TorusGrid, rng: np.random.Generator, k_lo: float = 1.0,
               k_hi: float | None = None, decay: float = 0.0) -> SpectralField:
        """Random zero-mean field supported on ``k_lo <= |k| <= k_hi``."""
        k_hi = grid.k_max if k_hi is None else k_hi
        u = rng.standard_normal((grid.N, grid.N))
        c = from_physical(grid, u)
        band = (grid.k_abs >= k_lo) & (grid.k_abs <= k_hi) & grid.dealias_mask
        c = np.where(band, c * grid.sobolev_weight(-decay / 2.0), 0.0)
        return cls(grid, c, zero_mean=True)

    def to_physical(self) -> np.ndarray:
        """Physical values; complex only if the coefficients are not Hermitian."""
        re_part = symmetrize(self.grid, self.coeffs)
        im_part = (self.coeffs - re_part) / 1j
        out = to_physical(self.grid, re_part)
        if np.abs(im_part).max() > 1e-12 * max(np.abs(self.coeffs).max(), 1e-300):
            out = out + 1j * to_physical(self.grid, im_part)
        return out

    def coefficient(self, k1: int, k2: int) -> complex:
        return complex(self.coeffs[self.grid.mode_index(k1, k2)])

    def mean(self) -> float:
        return float(self.coeffs[0, 0].real)

    def hermitian_residue(self) -> float:
        c = self.coeffs
        sym = symmetrize(self.grid, c)
        scale = max(np.abs(c).max(), 1e-300)
        return float(np.abs(c - sym).max() / scale)

    def _check(self, other: SpectralField):
        if other.grid != self.grid:
            raise ValueError(f"grid mismatch: N={self.grid.N} vs N={other.grid.N}")

    def __add__(self, other: SpectralField) -> SpectralField:
        self._check(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs, self.zero_mean and other.zero_mean)

    def __sub__(self, other: SpectralField) -> SpectralField:
        self._check(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs, self.zero_mean and other.zero_mean)

    def __mul__(self, a: float) -> SpectralField:
        return SpectralField(self.grid, self.coeffs * a, self.zero_mean)

    __rmul__ = __mul__

    def __neg__(self) -> SpectralField:
        return self * -1.0

    def inner(self, other: SpectralField) -> float:
        self._check(other)
        return float(inner(self.coeffs, other.coeffs))


@dataclass(frozen=True, eq=False)
class VectorField:
    """A real 2-component vector field; ``coeffs`` has shape ``(2, N, N)``."""

    grid: TorusGrid
    coeffs: np.ndarray
    divergence_free: bool = False

    def __post_init__(self):
        c = _frozen(self.coeffs)
        if c.shape != (2, self.grid.N, self.grid.N):
            raise ValueError(f"vector coefficients must have shape (2, N, N), got {c.shape}")
        if self.divergence_free:
            div = np.abs((self.grid.k_deriv * c).sum(axis=0)).max() * TWO_PI
            scale = np.sqrt((np.abs(c) ** 2).sum())
            if div > 1e-10 * max(scale, 1.0):
                raise ValueError(f"field flagged divergence-free has divergence {div:.3e}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_components(cls, u1: SpectralField, u2: SpectralField, divergence_free: bool = False) -> VectorField:
        u1._check(u2)
        return cls(u1.grid, np.stack([u1.coeffs, u2.coeffs]), divergence_free)

    @classmethod
    def from_physical(cls, grid: TorusGrid, values: np.ndarray, divergence_free: bool = False) -> VectorField:
        return cls(grid, from_physical(grid, np.asarray(values, dtype=float)), divergence_free)

    @classmethod
    def zeros(cls, grid: TorusGrid) -> VectorField:
        return cls(grid, np.zeros((2, grid.N, grid.N), complex), True)

    @classmethod
    def random(cls, grid: TorusGrid, rng: np.random.Generator, k_lo: float = 1.0,
               k_hi: float | None = None, divergence_free: bool = False) -> VectorField:
        c = np.stack([SpectralField.random(grid, rng, k_lo, k_hi).coeffs for _ in range(2)])
        if divergence_free:
            c = leray_hat(grid, c)
        return cls(grid, c, divergence_free)

    @property
    def components(self) -> tuple[SpectralField, SpectralField]:
        return SpectralField(self.grid, self.coeffs[0]), SpectralField(self.grid, self.coeffs[1])

    def to_physical(self) -> np.ndarray:
        return to_physical(self.grid, self.coeffs)

    def divergence(self) -> SpectralField:
        return SpectralField(self.grid, div_hat(self.grid, self.coeffs))

    def curl(self) -> SpectralField:
        return SpectralField(self.grid, curl_hat(self.grid, self.coeffs))

    def norm_sq(self, s: float = 0.0) -> float:
        return float(sobolev_norm_sq(self.grid, self.coeffs, s).sum())

    def inner(self, other: VectorField) -> float:
        if other.grid != self.grid:
            raise ValueError("grid mismatch")
        return float(inner(self.coeffs, other.coeffs).sum())

    def __add__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.coeffs + other.coeffs, self.divergence_free and other.divergence_free)

    def __sub__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.coeffs - other.coeffs, self.divergence_free and other.divergence_free)

    def __mul__(self, a: float) -> VectorField:
        return VectorField(self.grid, self.coeffs * a, self.divergence_free)

    __rmul__ = __mul__

    def __neg__(self) -> VectorField:
        return self * -1.0


# ---------------------------------------------------------------- operations


def sobolev_norm(f: SpectralField | VectorField, s: float) -> float:
    """``(sum_{k != 0} |k|^(2s) |f_k|^2 + |f_0|^2)^(1/2)``, summed over components."""
    return float(np.sqrt(sobolev_norm_sq(f.grid, f.coeffs, s).sum()))


def leray_project(v: VectorField) -> VectorField:
    """Orthogonal projection onto divergence-free fields; the mean is kept."""
    return VectorField(v.grid, leray_hat(v.grid, v.coeffs), divergence_free=True)


def biot_savart(xi: SpectralField) -> VectorField:
    if abs(xi.coeffs[0, 0]) > 1e-12 * max(np.abs(xi.coeffs).max(), 1.0):
        raise ValueError("Biot-Savart inversion needs a zero-mean vorticity")
    return VectorField(xi.grid, biot_savart_hat(xi.grid, xi.coeffs), divergence_free=True)


def heat_propagate(f: SpectralField, t: float) -> SpectralField:
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    return SpectralField(f.grid, f.coeffs * f.grid.heat_multiplier(t), f.zero_mean)


def transport_term(v: VectorField, f: SpectralField) -> SpectralField:
    """Dealiased pseudo-spectral ``v . grad f``."""
    if v.grid != f.grid:
        raise ValueError(f"grid mismatch: N={v.grid.N} vs N={f.grid.N}")
    grid = f.grid
    v_phys = to_physical(grid, v.coeffs)
    re_part = symmetrize(grid, f.coeffs)
    im_part = (f.coeffs - re_part) / 1j
    out = transport_phys(grid, v_phys, re_part)
    if np.abs(im_part).max() > 0:
        # complex test functions such as a lone e_k: the operator is linear
        out = out + 1j * transport_phys(grid, v_phys, im_part)
    return SpectralField(grid, out)


def fractional_laplacian_power(f: SpectralField, s: float) -> SpectralField:
    """``(-Delta)^(s/2)`` with ``|k|`` the bare Euclidean norm."""
    c = f.coeffs
    if s < 0 and abs(c[0, 0]) > 1e-14 * max(np.abs(c).max(), 1.0):
        raise ValueError("negative fractional powers need a zero-mean field")
    mult = f.grid.sobolev_weight(s / 2.0)
    if s < 0:
        mult = mult.copy()
        mult[0, 0] = 0.0
    return SpectralField(f.grid, c * mult, f.zero_mean or s < 0)


def mode(grid: TorusGrid, k1: int, k2: int, amplitude: complex = 1.0) -> SpectralField:
    """Single Fourier mode ``amplitude * e_k`` (not real unless paired)."""
    c = np.zeros((grid.N, grid.N), complex)
    c[grid.mode_index(k1, k2)] = amplitude
    return _raw_field(grid, c)


def _raw_field(grid: TorusGrid, c: np.ndarray) -> SpectralField:
    return SpectralField(grid, c, zero_mean=bool(c[0, 0] == 0))


def taylor_green(grid: TorusGrid, amplitude: float = 1.0) -> SpectralField:
    """``amplitude * sin(2 pi x1) sin(2 pi x2)``."""
    x1, x2 = grid.points
    return SpectralField.from_physical(grid, amplitude * np.sin(TWO_PI * x1) * np.sin(TWO_PI * x2), zero_mean=True)
