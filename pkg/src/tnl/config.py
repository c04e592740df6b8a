"""Experiment configuration: JSON schema, defaults and cross-field validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

KINDS = ("lln_transport", "clt_transport", "lln_euler", "clt_euler", "ldp_minimize", "ldp_tail",
         "dual_checks", "noise_checks")
DRIFTS = ("zero", "uniform", "shear", "taylor_green")
INITS = ("taylor_green", "random_band", "file")
RATE_KINDS = ("lln_transport", "clt_transport", "lln_euler", "clt_euler")


@dataclass(frozen=True)
class Violation:
    field: str
    constraint: str
    protects: str

    def __str__(self) -> str:
        return f"{self.field}: {self.constraint} ({self.protects})"


class ConfigError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in violations))


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    N: int = 64
    dt: float = 1e-3
    T: float = 0.2
    alpha: float = 0.5
    n_list: tuple[int, ...] = (4, 8, 16)
    paths: int = 64
    seed: int = 0
    drift: str = "shear"
    drift_amplitude: float = 1.0
    init: str = "random_band"
    init_k_lo: int = 1
    init_k_hi: int = 4
    init_seed: int = 0
    init_file: str | None = None
    s: float | None = None
    delta: float | None = None
    beta: float | None = None
    gamma: float = 0.0
    window: str = "lowpass"
    stride: int | None = None
    lam: float = 1e5
    R: float | None = None
    control_scale: float = 1.0
    pieces: int = 4
    max_iter: int = 500
    output: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["n_list"] = list(self.n_list)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> ExperimentConfig:
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return parse_config(json.dumps(d))


def _defaults(kind: str) -> dict[str, Any]:
    """Per-kind defaults for the norm exponents."""
    return {
        "lln_transport": {"delta": 1.0},
        "clt_transport": {"delta": 0.35, "s": 1.4},
        "lln_euler": {"delta": 1.0},
        "clt_euler": {"s": 1.0},
        "ldp_minimize": {"delta": 1.0, "N": 16, "T": 0.02, "dt": 1e-3},
        "ldp_tail": {"delta": 1.5, "N": 32, "n_list": [2, 4, 8], "paths": 2000, "T": 0.1},
        "dual_checks": {},
        "noise_checks": {},
    }.get(kind, {})


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON document, fill defaults and check every constraint.

    Raises ``ConfigError`` listing all violations at once.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([Violation("<document>", f"not valid JSON ({exc.msg} at line {exc.lineno})",
                                     "configuration schema")]) from None
    if not isinstance(raw, dict):
        raise ConfigError([Violation("<document>", "top level must be a JSON object", "configuration schema")])
    v: list[Violation] = []
    known = {f.name for f in fields(ExperimentConfig)}
    for k in raw:
        if k not in known:
            v.append(Violation(k, "unknown field", "configuration schema"))
    kind = raw.get("kind")
    if kind not in KINDS:
        v.append(Violation("kind", f"must be one of {', '.join(KINDS)}", "configuration schema"))
        raise ConfigError(v)
    if kind == "clt_euler":
        raw.setdefault("beta", raw.get("alpha", 0.5) / 2)
    merged = {**_defaults(kind), **{k: val for k, val in raw.items() if k in known}}
    if "n_list" in merged:
        nl = merged["n_list"]
        merged["n_list"] = tuple(nl) if isinstance(nl, (list, tuple)) else nl
    try:
        cfg = ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(v + [Violation("<document>", str(exc), "configuration schema")]) from None
    v.extend(_validate(cfg))
    if v:
        raise ConfigError(v)
    return cfg


def _is_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _validate(c: ExperimentConfig) -> list[Violation]:
    v: list[Violation] = []
    grid_ok = _is_int(c.N) and c.N >= 8 and c.N % 2 == 0
    if not grid_ok:
        v.append(Violation("N", "must be an even integer >= 8", "torus grid"))
    if not (_num(c.dt) and c.dt > 0):
        v.append(Violation("dt", "must be a positive number", "time stepping"))
    if not (_num(c.T) and c.T > 0):
        v.append(Violation("T", "must be a positive number", "time stepping"))
    elif _num(c.dt) and c.dt > 0 and abs(c.T / c.dt - round(c.T / c.dt)) > 1e-9 * (c.T / c.dt):
        v.append(Violation("T", "must be an integer multiple of dt", "time stepping"))
    if not (_num(c.alpha) and 0 < c.alpha < 1):
        v.append(Violation("alpha", "must satisfy 0 < alpha < 1 = d/2", "noise covariance trace class"))
    if c.drift not in DRIFTS:
        v.append(Violation("drift", f"must be one of {', '.join(DRIFTS)}", "drift presets"))
    if c.init not in INITS:
        v.append(Violation("init", f"must be one of {', '.join(INITS)}", "initial condition presets"))
    if c.init == "file" and not c.init_file:
        v.append(Violation("init_file", "required when init = file", "initial condition presets"))
    if c.init == "random_band" and not (_is_int(c.init_k_lo) and _is_int(c.init_k_hi) and 1 <= c.init_k_lo <= c.init_k_hi):
        v.append(Violation("init_k_lo/init_k_hi", "must be integers with 1 <= k_lo <= k_hi", "initial condition presets"))
    if c.window not in ("lowpass", "band"):
        v.append(Violation("window", "must be lowpass or band", "noise window"))
    if not (_num(c.gamma) and 0 <= c.gamma < 1):
        v.append(Violation("gamma", "must satisfy 0 <= gamma < 1", "drift integrability class"))
    if not _is_int(c.seed) or c.seed < 0:
        v.append(Violation("seed", "must be a nonnegative integer", "reproducibility"))
    if c.stride is not None and not (_is_int(c.stride) and c.stride >= 1):
        v.append(Violation("stride", "must be a positive integer", "snapshot schedule"))

    if c.kind in RATE_KINDS or c.kind == "ldp_tail":
        nl = c.n_list
        if not (isinstance(nl, tuple) and nl and all(_is_int(n) and n >= 1 for n in nl)):
            v.append(Violation("n_list", "must be a nonempty list of positive integers", "noise cutoffs"))
        else:
            if any(b <= a for a, b in zip(nl, nl[1:])):
                v.append(Violation("n_list", "must be strictly increasing", "rate fits"))
            if grid_ok:
                cap = c.N // 3
                scale = 2 if c.window == "band" else 1
                if max(nl) * scale > cap:
                    what = "2n <= floor(N/3)" if scale == 2 else "n <= floor(N/3)"
                    v.append(Violation("n_list", f"{what} = {cap} for every cutoff (got max {max(nl)})",
                                       "dealiased resolution of the noise"))
            if c.kind in RATE_KINDS and len(nl) < 2:
                v.append(Violation("n_list", "needs at least two cutoffs", "rate fits"))
        min_paths = 100 if c.kind == "ldp_tail" else 32
        if not (_is_int(c.paths) and c.paths >= min_paths):
            v.append(Violation("paths", f"must be an integer >= {min_paths}", "Monte Carlo estimates"))

    if c.kind == "lln_transport":
        if not (_num(c.delta) and 0 < c.delta <= 1):
            v.append(Violation("delta", "must satisfy 0 < delta <= d/2 = 1", "transport LLN rate"))
    if c.kind == "lln_euler":
        if not (_num(c.delta) and c.delta > 0):
            v.append(Violation("delta", "must be positive", "Euler LLN convergence"))
    if c.kind == "clt_transport":
        cap = min(c.alpha, 1 - c.gamma) if _num(c.alpha) and _num(c.gamma) else None
        if not (_num(c.delta) and cap is not None and 0 < c.delta < cap):
            v.append(Violation("delta", "must satisfy 0 < delta < min(alpha, 1 - gamma)", "transport CLT rate"))
        if not (_num(c.s) and _num(c.delta) and c.s > 1 + c.delta):
            v.append(Violation("s", "must satisfy s > d/2 + delta = 1 + delta", "transport CLT rate"))
    if c.kind == "clt_euler":
        if not (_num(c.beta) and _num(c.alpha) and 0 < c.beta < c.alpha):
            v.append(Violation("beta", "must lie in the open interval (0, alpha)",
                               "stochastic convolution regularity"))
        if not (_num(c.s) and c.s >= 1):
            v.append(Violation("s", "must satisfy s >= 1", "Euler CLT rate"))
    if c.kind == "ldp_minimize":
        if not (_num(c.lam) and c.lam > 0):
            v.append(Violation("lam", "must be positive", "penalized rate problem"))
        if not (_num(c.delta) and c.delta >= 0):
            v.append(Violation("delta", "must be nonnegative", "penalized rate problem"))
        if not (_is_int(c.max_iter) and c.max_iter > 0):
            v.append(Violation("max_iter", "must be a positive integer", "optimizer budget"))
        if not (_is_int(c.pieces) and c.pieces >= 1):
            v.append(Violation("pieces", "must be a positive integer", "control discretization"))
        if not (_num(c.control_scale) and c.control_scale >= 0):
            v.append(Violation("control_scale", "must be nonnegative", "planted control"))
    if c.kind == "ldp_tail":
        if not (_num(c.delta) and c.delta > 1):
            v.append(Violation("delta", "must satisfy delta > d/2 = 1", "tail bound"))
        if c.R is not None and not (_num(c.R) and c.R >= 0):
            v.append(Violation("R", "must be nonnegative", "tail bound"))
    return v


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
