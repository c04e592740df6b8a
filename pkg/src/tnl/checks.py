"""Standalone invariant suites.  Each check returns a ``CheckResult``; a suite is a list of them."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import spectral as sp
from .detpde import (DriftSpec, solve_advection_diffusion, solve_backward_dual, solve_nse_vorticity,
                     step_count)
from .noise import BrownianDriver, build_noise_model, lattice_modes, noise_field_hat
from .spectral import SpectralField, TorusGrid

FOUR_PI2 = 4.0 * np.pi**2


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: value={self.value:.4g} threshold={self.threshold:.4g} {self.detail}".rstrip()


def _leq(name, value, threshold, detail=""):
    return CheckResult(name, float(value), float(threshold), bool(value <= threshold), detail)


def _rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


# ---------------------------------------------------------------- structural


def brute_epsilon(alpha: float, n: int) -> float:
    """``2 / sum_{0 < |k| <= n} |k|^{-2 alpha}`` by direct enumeration, summed small-to-large."""
    terms = sorted((k1 * k1 + k2 * k2) ** (-alpha)
                   for k1 in range(-n, n + 1) for k2 in range(-n, n + 1) if 0 < k1 * k1 + k2 * k2 <= n * n)
    return 2.0 / float(np.sum(terms))


def structural_suite(N: int = 32, seed: int = 0) -> list[CheckResult]:
    grid = sp.get_grid(N)
    rng = np.random.default_rng(seed)
    out = []
    for alpha, n, want in ((0.5, 1, 0.5), (1.0 - 1e-15, 2, 2.0 / 7.0)):
        model = build_noise_model(alpha, n)
        out.append(_leq(f"epsilon(alpha={alpha:.3g}, n={n}) vs brute sum",
                        abs(model.epsilon - brute_epsilon(alpha, n)), 1e-14, f"eps={model.epsilon:.15g}"))
        out.append(_leq(f"epsilon(alpha={alpha:.3g}, n={n}) vs closed form", abs(model.epsilon - want), 1e-14))

    model = build_noise_model(0.5, grid.k_max)
    drv = BrownianDriver(np.arange(8))
    c = noise_field_hat(model, grid, drv.increments(model.layout(grid).plus, 1e-3))
    scale = np.abs(c).max()
    div = np.abs(sp.div_hat(grid, c)).max() / scale
    out.append(_leq("noise divergence (relative, roundoff level)", div, 1e-14))
    phys = np.fft.ifft2(c, norm="forward")
    out.append(_leq("noise reality residue", np.abs(phys.imag).max() / np.abs(phys.real).max(), 1e-10))
    mirror = np.conj(c[..., (-np.arange(N)) % N, :][..., (-np.arange(N)) % N])
    out.append(_leq("noise Hermitian symmetry (exact)", np.abs(mirror - c).max(), 0.0))

    xi = SpectralField.random(grid, rng, 1, grid.k_max, 1.0).coeffs
    out.append(_leq("curl(biot_savart(xi)) = xi", _rel(sp.curl_hat(grid, sp.biot_savart_hat(grid, xi)), xi), 1e-10))
    v = sp.from_physical(grid, rng.standard_normal((2, N, N)))
    pv = sp.leray_hat(grid, v)
    out.append(_leq("Leray idempotence", _rel(sp.leray_hat(grid, pv), pv), 1e-10))
    f = SpectralField.random(grid, rng, 1, grid.k_max).coeffs
    two = grid.heat_multiplier(0.013) * grid.heat_multiplier(0.021)
    out.append(_leq("heat semigroup law", _rel(two * f, grid.heat_multiplier(0.034) * f), 1e-10))

    tg = sp.taylor_green(grid)
    traj = solve_nse_vorticity(tg, 0.1, 1e-4, stride=50)
    exact = np.exp(-8 * np.pi**2 * traj.times)[:, None, None] * tg.coeffs
    err = max(_rel(traj.fields[i], exact[i]) for i in range(len(traj)))
    out.append(_leq("Taylor-Green decay vs exp(-8 pi^2 t), dt=1e-4", err, 1e-5))
    return out


# ---------------------------------------------------------------- noise


def noise_suite(N: int = 96) -> list[CheckResult]:
    grid = sp.get_grid(N)
    out = []
    worst = 0.0
    for alpha in (0.25, 0.5, 0.75):
        for n in (1, 2, 5, 13, 32):
            m = build_noise_model(alpha, n)
            worst = max(worst, abs(m.epsilon * m.weight_sum - 2.0))
    out.append(_leq("eps_n * weight sum = c_d", worst, 1e-12))
    for alpha in (0.25, 0.5, 0.75):
        r = [build_noise_model(alpha, n).epsilon / n ** (2 * alpha - 2) for n in (8, 16, 32, 64)]
        out.append(_leq(f"eps_n / n^(2 alpha - 2) spread, alpha={alpha}", max(r) / min(r), 2.0))

    drv = BrownianDriver(np.arange(4))
    full = build_noise_model(0.5, grid.k_max)
    dB = drv.increments(full.layout(grid).plus, 1e-3)
    base = noise_field_hat(full, grid, dB)
    lo, hi = build_noise_model(0.5, 4), build_noise_model(0.5, 8)
    inc_lo = noise_field_hat(lo, grid, drv.increments(lo.layout(grid).plus, 1e-3))
    inc_hi = noise_field_hat(hi, grid, drv.increments(hi.layout(grid).plus, 1e-3))
    shell = hi.mask(grid) & ~lo.mask(grid)
    off_shell = np.abs((inc_hi - inc_lo) * ~shell).max()
    on_shell = np.sqrt((np.abs(inc_hi) ** 2).sum(axis=1))[:, shell].min()
    out.append(_leq("coupled increments differ only on n < |k| <= n'", off_shell, 0.0,
                    f"min |increment| on the shell {on_shell:.2e}"))
    # on its own modes, a model's sample agrees with the full-noise sample (shared driver)
    out.append(_leq("window sample = masked full sample", np.abs(inc_hi - base * hi.mask(grid)).max(), 0.0))

    # closed shells n <= |k| <= 2n: disjoint once n' > 2n, sharing only |k| = 2n when n' = 2n
    bands = {n: build_noise_model(0.5, n, "band").mask(grid) for n in (3, 4, 7, 8, 15)}
    overlap = sum(int((bands[a] & bands[b]).sum()) for a, b in ((3, 7), (4, 15), (7, 15)))
    out.append(_leq("band shells disjoint for n' > 2n", overlap, 0))
    shared = bands[4] & bands[8]
    out.append(_leq("band shells for n' = 2n meet only on |k| = 2n", np.abs(grid.k_sq[shared] - 64).max(), 0))

    drv = BrownianDriver(np.arange(4000))
    plus = lattice_modes(1, 3)
    plus = plus[(plus[:, 0] > 0) | ((plus[:, 0] == 0) & (plus[:, 1] > 0))]
    x = drv.increments(plus, 1.0)
    out.append(_leq("per-part increment variance = dt/2", abs(x.real.var() - 0.5) + abs(x.imag.var() - 0.5), 0.02))
    return out


# ---------------------------------------------------------------- dual propagator


def dual_suite(N: int = 64, dt: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    grid = sp.get_grid(N)
    rng = np.random.default_rng(seed)
    b = DriftSpec("taylor_green", amplitude=1.0)
    phi = SpectralField.random(grid, rng, 1, 6, 1.0)
    f0 = SpectralField.random(grid, rng, 1, 6, 1.0)
    tau, t, s = 0.03, 0.02, 0.01
    out = []
    for h in (dt, dt / 2):
        direct = solve_backward_dual(phi, b, tau - s, h).fields[0]
        mid = SpectralField(grid, solve_backward_dual(phi, b, tau - t, h).fields[0])
        comp = solve_backward_dual(mid, b, t - s, h).fields[0]
        out.append(_leq(f"semigroup composition, dt={h:g}", _rel(comp, direct), 1e-5))
    errs = []
    for h in (dt, dt / 2):
        M = step_count(tau, h)
        f = solve_advection_diffusion(f0, b, tau, h, stride=M)
        S = solve_backward_dual(phi, b, tau, h, stride=M)
        lhs = float(sp.inner(f.fields[-1], phi.coeffs))
        rhs = float(sp.inner(f0.coeffs, S.fields[0]))
        scale = np.sqrt(sp.sobolev_norm_sq(grid, f0.coeffs, 0) * sp.sobolev_norm_sq(grid, phi.coeffs, 0))
        errs.append(abs(lhs - rhs) / scale)
        out.append(_leq(f"forward/backward duality, dt={h:g}", errs[-1], 1e-5))
    out.append(_leq("duality error ratio under dt halving", errs[1] / errs[0], 0.5 + 0.05))
    return out


# ---------------------------------------------------------------- appendix lemmas


def heat_integral_ratio(grid: TorusGrid, rng, s: float, pieces: int = 5, t: float = 0.05) -> float:
    """``||int_0^t P_{t-r} f_r dr||^2_{H^{s+1}} / int_0^t ||f_r||^2_{H^s} dr``, piecewise-constant ``f``, exact in time."""
    edges = np.linspace(0.0, t, pieces + 1)
    f = np.stack([SpectralField.random(grid, rng, 1, grid.k_max).coeffs for _ in range(pieces)])
    lam = FOUR_PI2 * grid.k_sq
    lam_safe = np.where(lam > 0, lam, 1.0)
    acc = np.zeros_like(f[0])
    for j in range(pieces):
        w = (np.exp(-lam * (t - edges[j + 1])) - np.exp(-lam * (t - edges[j]))) / lam_safe
        acc += np.where(lam > 0, w, edges[j + 1] - edges[j]) * f[j]
    num = sp.sobolev_norm_sq(grid, acc, s + 1)
    den = (np.diff(edges) * sp.sobolev_norm_sq(grid, f, s)).sum()
    return float(num / den)


def heat_smoothing_ratio(grid: TorusGrid, u: np.ndarray, a: float, rho: float, t: float) -> float:
    """``||P_t u||_{H^{a+rho}} t^{rho/2} / ||u||_{H^a}``."""
    pu = grid.heat_multiplier(t) * u
    return float(np.sqrt(sp.sobolev_norm_sq(grid, pu, a + rho) / sp.sobolev_norm_sq(grid, u, a)) * t ** (rho / 2))


def transport_bound_ratio(grid: TorusGrid, rng, case: str) -> float:
    """Ratio of the two sides of a transport-term estimate for one random ``(V, f)`` pair."""
    k_hi = grid.k_max
    V = sp.leray_hat(grid, sp.from_physical(grid, rng.standard_normal((2, grid.N, grid.N))))
    V = V * (grid.k_abs <= k_hi) * grid.sobolev_weight(-rng.uniform(1.0, 2.5))
    f = SpectralField.random(grid, rng, 1, k_hi, rng.uniform(0.0, 2.0)).coeffs
    Vf = sp.transport_phys(grid, sp.to_physical(grid, V), f)
    if case == "i":
        a, b = 0.5, 0.25
        return float(np.sqrt(sp.sobolev_norm_sq(grid, Vf, -1 - b)
                             / (sp.sobolev_norm_sq(grid, V, 1 + a).sum() * sp.sobolev_norm_sq(grid, f, -b))))
    if case == "ii":
        b = 0.5
        return float(np.sqrt(sp.sobolev_norm_sq(grid, Vf, -1 - b)
                             / (sp.sobolev_norm_sq(grid, V, 1 - b).sum() * sp.sobolev_norm_sq(grid, f, 0))))
    if case == "iii":
        a, b, e = 0.5, 0.25, 0.1
        return float(np.sqrt(sp.sobolev_norm_sq(grid, Vf, -2 - b - e)
                             / (sp.sobolev_norm_sq(grid, V, a).sum() * sp.sobolev_norm_sq(grid, f, -b))))
    raise ValueError(f"unknown case {case!r}")


def lattice_convolution_sup(a: float, b: float, delta: float, R: int, j_max: int = 50) -> float:
    """``sup_{0<|j|<=j_max} |j|^delta sum_{l != 0, j} |l|^-a |j - l|^-b`` with both factors cut at ``|.| <= R``."""
    r = np.arange(-R, R + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    ksq = (k1 * k1 + k2 * k2).astype(float)
    inside = (ksq > 0) & (ksq <= R * R)
    safe = np.where(inside, ksq, 1.0)
    A = np.where(inside, safe ** (-a / 2), 0.0)
    B = np.where(inside, safe ** (-b / 2), 0.0)
    conv = fftconvolve(A, B, mode="same")  # centred: index R + j holds the sum at lag j
    js = np.arange(-j_max, j_max + 1)
    J1, J2 = np.meshgrid(js, js, indexing="ij")
    jsq = J1**2 + J2**2
    sel = (jsq > 0) & (jsq <= j_max**2)
    vals = conv[R + J1[sel], R + J2[sel]] * jsq[sel] ** (delta / 2)
    return float(vals.max())


def appendix_suite(seed: int = 0, samples: int = 200) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    g32, g64 = sp.get_grid(32), sp.get_grid(64)
    bound = 1.0 / (8 * np.pi**2)
    for s in (-1.0, 0.0, 0.5):
        worst = max(heat_integral_ratio(g32, rng, s) for _ in range(samples // 4))
        out.append(_leq(f"heat integral gain, s={s}", worst, bound * (1 + 1e-12), "bound 1/(8 pi^2)"))
    ts = np.logspace(-4, 0, 40)
    for rho in (0.5, 1.0, 2.0):
        cap = (rho / (8 * np.pi**2 * np.e)) ** (rho / 2)
        worst = 0.0
        for a in (-1.0, 0.0, 1.0):
            u = SpectralField.random(g32, rng, 1, g32.k_max).coeffs
            worst = max(worst, max(heat_smoothing_ratio(g32, u, a, rho, t) for t in ts))
        out.append(_leq(f"heat smoothing, rho={rho}", worst, cap * (1 + 1e-12), "bound (rho/(8 pi^2 e))^(rho/2)"))
    for case in ("i", "ii", "iii"):
        m32 = max(transport_bound_ratio(g32, rng, case) for _ in range(samples))
        m64 = max(transport_bound_ratio(g64, rng, case) for _ in range(samples // 4))
        out.append(_leq(f"transport bound ({case}) growth under N doubling", m64 / m32, 2.0,
                        f"max ratio N=32: {m32:.3g}, N=64: {m64:.3g}"))
    s200 = lattice_convolution_sup(1.5, 1.5, 0.5, 200)
    s400 = lattice_convolution_sup(1.5, 1.5, 0.5, 400)
    out.append(_leq("lattice convolution sup change, R 200 -> 400", abs(s400 - s200) / s200, 0.05,
                    f"sup={s200:.5g} -> {s400:.5g}"))
    return out


SUITES = {
    "structural": structural_suite,
    "noise": noise_suite,
    "dual": dual_suite,
    "appendix": appendix_suite,
}


def run_suite(name: str) -> tuple[list[CheckResult], float]:
    """Run one named suite; returns results and wall time in seconds."""
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    t0 = time.perf_counter()
    res = SUITES[name]()
    return res, time.perf_counter() - t0
