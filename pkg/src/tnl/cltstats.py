"""Monte Carlo rate experiments: per-n error moments, log-log slope fits,
Gaussianity diagnostics and coupling bounds on the Wasserstein-2 distance."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .detpde import DriftSpec
from .noise import build_noise_model, derive_seed
from .spde import CoupledPath, StochasticRunConfig, run_coupled
from .spectral import SpectralField, TorusGrid

log = logging.getLogger(__name__)

KINDS = ("transport_LLN", "euler_LLN", "transport_CLT", "euler_CLT", "transport_fluct", "euler_fluct")


class ExperimentError(RuntimeError):
    """An experiment hit one of its failure conditions (too many aborted paths, bad inputs)."""


def theoretical_exponent(kind: str, alpha: float, gamma_b: float = 0.0, param: float | None = None,
                         d: int = 2) -> float:
    """Decay exponent ``a`` of the squared error, ``E err^2 ~ n^{-a}``.

    ``param`` is ``delta`` for the transport kinds and ``beta`` for ``euler_CLT``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must satisfy 0 < alpha < 1 (d = 2): got {alpha}")
    if not 0.0 <= gamma_b < 1.0:
        raise ValueError(f"gamma_b must satisfy 0 <= gamma_b < 1 for the drift class: got {gamma_b}")
    damp = 1.0 - 2.0 * alpha / d
    if kind == "transport_CLT":
        cap = min(alpha, 1.0 - gamma_b)
        if param is None:
            return 2.0 * cap * damp
        if not 0.0 < param < cap:
            raise ValueError(f"delta must satisfy 0 < delta < min(alpha, 1 - gamma) = {cap}: got {param}")
        return 2.0 * param * damp
    if kind == "transport_LLN":
        if param is None or not 0.0 < param <= d / 2:
            raise ValueError(f"delta must satisfy 0 < delta <= d/2: got {param}")
        return 2.0 * param * damp
    if kind == "euler_CLT_Hminus1":
        return alpha * (1.0 - alpha)
    if kind == "euler_CLT":
        if param is None or not 0.0 < param < alpha:
            raise ValueError(f"beta must satisfy 0 < beta < alpha = {alpha}: got {param}")
        gam = min(param, alpha - param)
        return 2.0 * gam * (1.0 - alpha)
    raise ValueError(f"unknown exponent kind {kind!r}")


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci: tuple[float, float]
    ci_mc: tuple[float, float]


def fit_slope(x, y, y_se=None, level: float = 0.95) -> SlopeFit:
    """OLS of ``log y`` on ``log x``.

    ``ci`` comes from the regression residuals (infinite with fewer than three
    points).  ``ci_mc`` propagates the per-point Monte Carlo standard errors
    ``y_se`` through the OLS weights (delta method), so it shrinks like
    ``paths^{-1/2}``.
    """
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2:
        raise ValueError("slope fits need at least two points")
    res = stats.linregress(lx, ly)
    dof = len(lx) - 2
    q = stats.t.ppf(0.5 + level / 2, dof) if dof > 0 else np.inf
    half = q * res.stderr if dof > 0 else np.inf
    ci = (res.slope - half, res.slope + half)
    ci_mc = (np.nan, np.nan)
    if y_se is not None:
        w = (lx - lx.mean()) / ((lx - lx.mean()) ** 2).sum()
        sd = np.sqrt(((w * np.asarray(y_se, float) / np.asarray(y, float)) ** 2).sum())
        z = stats.norm.ppf(0.5 + level / 2)
        ci_mc = (res.slope - z * sd, res.slope + z * sd)
    return SlopeFit(float(res.slope), float(res.intercept), tuple(map(float, ci)), tuple(map(float, ci_mc)))


@dataclass
class RateRow:
    n: int
    epsilon: float
    mean: float
    stderr: float
    paths: int
    aborted: int
    final_mean: float


@dataclass
class RateEstimate:
    experiment: str
    rows: list[RateRow]
    slope: float
    ci: tuple[float, float]
    ci_mc: tuple[float, float]
    slope_eps: float
    fit_against: str
    exponent: float | None
    formula: str | None
    meta: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for r in self.rows:
            if r.paths < 2:
                raise ValueError("each n needs at least two paths")

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.rows])

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.means) < 0))

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "samples"}
        d["rows"] = [asdict(r) for r in self.rows]
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "epsilon", "mean_sq_error", "stderr", "paths", "aborted", "final_mean"])
            for r in self.rows:
                w.writerow([r.n, repr(float(r.epsilon)), repr(float(r.mean)), repr(float(r.stderr)), r.paths, r.aborted,
                            repr(float(r.final_mean))])

    def to_gnuplot(self, path) -> None:
        write_columns(path, [r.n for r in self.rows], self.means, f"{self.experiment}: n  mean_sq_error")


def write_columns(path, x, y, title: str = "") -> None:
    """Two-column whitespace data file with a ``#`` comment header (gnuplot friendly)."""
    with open(path, "w") as fh:
        if title:
            fh.write(f"# {title}\n")
        for a, b in zip(x, y):
            fh.write(f"{float(a)!r} {float(b)!r}\n")


def _quantity(kind: str, s: float) -> tuple[str, str, dict]:
    """(coupled kind, error key, run_coupled kwargs) for an experiment kind."""
    if kind in ("transport_LLN", "euler_LLN"):
        return kind.split("_")[0], "lln", {"s_values": (), "delta": s}
    if kind in ("transport_CLT", "euler_CLT"):
        return kind.split("_")[0], f"clt_s={s:g}", {"s_values": (s,)}
    if kind in ("transport_fluct", "euler_fluct"):
        return kind.split("_")[0], "fluct", {"s_values": (), "delta": s}
    raise ValueError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")


def _one_n(args) -> tuple[int, CoupledPath]:
    kind, alpha, n, window, paths, grid, T, dt, s, seed, init, b, stride = args
    ckind, key, kw = _quantity(kind, s)
    model = build_noise_model(alpha, n, window)
    seeds = tuple(derive_seed(seed, n, p) for p in range(paths))
    cfg = StochasticRunConfig(grid, dt, T, model, seed=seed, paths=paths, stride=stride, path_seeds=seeds)
    cp = run_coupled(ckind, cfg, init, b, keep="none", **kw)
    cp.meta["key"] = key
    return n, cp


def run_rate_experiment(kind: str, alpha: float, n_list: Sequence[int], paths: int, grid: TorusGrid, T: float,
                        s: float, init: SpectralField, dt: float = 1e-3, b: DriftSpec | None = None,
                        seed: int = 0, window: str = "lowpass", stride: int | None = None,
                        fit_against: str = "n", exponent: tuple[str, float | None] | None = None,
                        workers: int = 1, max_abort_fraction: float = 0.05,
                        on_run: Callable[[int, CoupledPath], None] | None = None) -> RateEstimate:
    """Per-``n`` mean of the per-path max-over-saves squared error, with a log-log fit.

    Path ``p`` at cutoff ``n`` uses seed ``derive_seed(seed, n, p)``, so adding
    cutoffs leaves existing draws untouched.  ``exponent = (formula, param)`` attaches
    ``theoretical_exponent(formula, alpha, 0, param)``.
    """
    n_list = list(n_list)
    if any(b2 <= a for a, b2 in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if paths < 32:
        raise ValueError("rate experiments need at least 32 paths")
    top = max(n_list) * (2 if window == "band" else 1)
    if top > grid.k_max:
        raise ValueError(f"largest noise radius {top} exceeds the dealias cutoff {grid.k_max}")
    if fit_against not in ("n", "epsilon"):
        raise ValueError("fit_against must be 'n' or 'epsilon'")
    b = b if b is not None else DriftSpec("zero")
    jobs = [(kind, alpha, n, window, paths, grid, T, dt, s, seed, init, b, stride) for n in n_list]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_one_n, jobs))
    else:
        results = [_one_n(j) for j in jobs]
    rows, samples = [], {}
    for n, cp in results:
        key = cp.meta["key"]
        if cp.abort_count > max_abort_fraction * paths:
            raise ExperimentError(f"{cp.abort_count} of {paths} paths aborted at n = {n}")
        sup = cp.sup_error(key)
        ok = np.isfinite(sup)
        final = cp.errors[key][-1][ok]
        rows.append(RateRow(n, cp.epsilon, float(sup[ok].mean()), float(sup[ok].std(ddof=1) / np.sqrt(ok.sum())),
                            int(ok.sum()), cp.abort_count, float(final.mean())))
        samples[n] = sup
        if on_run is not None:
            on_run(n, cp)
        log.info("%s n=%d mean=%.4e se=%.2e aborted=%d", kind, n, rows[-1].mean, rows[-1].stderr, cp.abort_count)
    means = [r.mean for r in rows]
    ses = [r.stderr for r in rows]
    eps = [r.epsilon for r in rows]
    fit_n = fit_slope(n_list, means, ses)
    fit_e = fit_slope(eps, means, ses)
    fit = fit_n if fit_against == "n" else fit_e
    exp_val, formula = None, None
    if exponent is not None:
        formula, param = exponent
        exp_val = theoretical_exponent(formula, alpha, 0.0, param)
    meta = {"kind": kind, "alpha": alpha, "s": s, "T": T, "dt": dt, "N": grid.N, "seed": seed, "window": window,
            "wall_time": sum(cp.meta["wall_time"] for _, cp in results)}
    return RateEstimate(kind, rows, fit.slope, fit.ci, fit.ci_mc, fit_e.slope, fit_against, exp_val, formula,
                        meta, samples)


@dataclass
class GaussianityReport:
    samples: int
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    qq_max_deviation: float
    degenerate: bool
    passed: bool


def gaussianity_report(samples, skew_tol: float = 0.12, kurt_tol: float = 0.15) -> GaussianityReport:
    """Moment and Q-Q diagnostics against the fitted normal."""
    x = np.asarray(samples, float).ravel()
    if x.size < 500:
        raise ValueError(f"gaussianity diagnostics need at least 500 samples, got {x.size}")
    mu, sd = float(x.mean()), float(x.std(ddof=1))
    if sd <= 1e-14 * max(abs(mu), 1.0):
        return GaussianityReport(x.size, mu, sd, np.nan, np.nan, np.nan, True, False)
    sk = float(stats.skew(x))
    ku = float(stats.kurtosis(x))
    z = np.sort((x - mu) / sd)
    q = stats.norm.ppf((np.arange(1, x.size + 1) - 0.5) / x.size)
    qq = float(np.abs(z - q).max())
    return GaussianityReport(x.size, mu, sd, sk, ku, qq, False, abs(sk) < skew_tol and abs(ku) < kurt_tol)


def wasserstein_coupling_bound(errors) -> float:
    """``sqrt(E ||Xi^n_T - Xi_T||^2)`` from T-final squared errors (a coupling bound on ``d_2``).

    Accepts an array of per-path squared errors or a ``(CoupledPath, key)`` pair.
    """
    if isinstance(errors, tuple):
        cp, key = errors
        errors = cp.errors[key][-1]
    e = np.asarray(errors, float)
    e = e[np.isfinite(e)]
    return float(np.sqrt(e.mean()))
