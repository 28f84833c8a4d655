"""Time-dependent coefficient data (A, B, f) and standing-hypothesis checks.

A coefficient system holds the drift matrix A(t), the diffusion factor B(t)
and the forcing vector f(t) of a linear diffusion

    dX = (A(t) X + f(t)) dt + B(t) dW.

Coefficients come in three structured forms (constant, trigonometric-periodic,
tabulated) so that downstream quadratures get smooth, bounded right-hand
sides.  Systems are immutable after construction and safe for concurrent
reads.

Tabulated coefficients only cover their grid hull; every query outside it
raises.  The hypothesis checks (uniform ellipticity of B, negative growth
bound of the evolution family) are sampled on a grid, not certified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

MAX_DIM = 16

__all__ = [
    "CoefficientError",
    "Coefficient",
    "CoefficientSystem",
    "HypothesisReport",
    "parse_system",
    "eval_coeffs",
    "check_hypotheses",
    "autonomous_benchmark",
    "periodic_benchmark",
]


class CoefficientError(ValueError):
    """Raised on malformed configs, dimension mismatches or out-of-hull queries."""


def _as_array(value, shape, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise CoefficientError(f"field {name!r}: not numeric: {exc}") from exc
    if arr.shape != shape:
        raise CoefficientError(
            f"field {name!r}: expected shape {shape}, got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise CoefficientError(f"field {name!r}: non-finite entries")
    return arr


@dataclass(frozen=True)
class Coefficient:
    """One coefficient map t -> matrix/vector with a declared structure.

    kind is one of "constant", "periodic", "tabulated".  Periodic form is
    base + sin_amp*sin(2*pi*t/period) + cos_amp*cos(2*pi*t/period).
    Tabulated values are interpolated with order 1 (linear) or 3 (cubic,
    default; the ODE integrator wants continuous right-hand sides).
    """

    kind: str
    shape: tuple
    value: np.ndarray | None = None
    base: np.ndarray | None = None
    sin_amp: np.ndarray | None = None
    cos_amp: np.ndarray | None = None
    period: float | None = None
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    order: int = 3
    _spline: object = field(default=None, repr=False, compare=False)

    def __call__(self, t):
        """Evaluate at scalar or array t; returns shape t.shape + self.shape."""
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.broadcast_to(self.value, t.shape + self.shape)
            return out.copy()
        if self.kind == "periodic":
            w = 2.0 * math.pi / self.period
            s = np.sin(w * t)[..., None] if self.shape else np.sin(w * t)
            c = np.cos(w * t)[..., None] if self.shape else np.cos(w * t)
            if len(self.shape) == 2:
                s = s[..., None]
                c = c[..., None]
            return self.base + s * self.sin_amp + c * self.cos_amp
        # tabulated
        lo, hi = self.times[0], self.times[-1]
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise CoefficientError(
                f"tabulated coefficient queried at t outside hull [{lo}, {hi}]"
            )
        tc = np.clip(t, lo, hi)
        if self.order == 1:
            flat = self.values.reshape(len(self.times), -1)
            cols = [np.interp(tc, self.times, flat[:, j]) for j in range(flat.shape[1])]
            out = np.stack(cols, axis=-1)
            return out.reshape(t.shape + self.shape)
        return np.asarray(self._spline(tc))

    def sup_norm(self, window: tuple[float, float], samples: int = 257) -> float:
        """Sampled sup of the spectral norm (abs for vectors) over the window."""
        ts = np.linspace(window[0], window[1], samples)
        vals = self(ts)
        if len(self.shape) == 2:
            return float(np.linalg.norm(vals, ord=2, axis=(-2, -1)).max())
        return float(np.linalg.norm(vals, axis=-1).max())


def _make_coefficient(spec: dict, shape: tuple, name: str) -> Coefficient:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise CoefficientError(f"field {name!r}: expected a record with a 'kind' key")
    kind = spec["kind"]
    if kind == "constant":
        return Coefficient(kind, shape, value=_as_array(spec.get("value"), shape, f"{name}.value"))
    if kind == "periodic":
        period = spec.get("period")
        if not isinstance(period, (int, float)) or period <= 0:
            raise CoefficientError(f"field {name}.period: positive number required")
        zeros = np.zeros(shape)
        base = _as_array(spec.get("base", zeros), shape, f"{name}.base")
        sin_amp = _as_array(spec.get("sin_amp", zeros), shape, f"{name}.sin_amp")
        cos_amp = _as_array(spec.get("cos_amp", zeros), shape, f"{name}.cos_amp")
        return Coefficient(kind, shape, base=base, sin_amp=sin_amp, cos_amp=cos_amp,
                           period=float(period))
    if kind == "tabulated":
        times = np.asarray(spec.get("times", ()), dtype=float)
        if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
            raise CoefficientError(f"field {name}.times: strictly increasing grid of length >= 2 required")
        values = np.asarray(spec.get("values"), dtype=float)
        if values.shape != (len(times),) + shape:
            raise CoefficientError(
                f"field {name}.values: expected shape {(len(times),) + shape}, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise CoefficientError(f"field {name}.values: non-finite entries")
        order = int(spec.get("order", 3))
        if order not in (1, 3):
            raise CoefficientError(f"field {name}.order: interpolation order must be 1 or 3")
        spline = None
        if order == 3:
            spline = CubicSpline(times, values, axis=0)
        return Coefficient(kind, shape, times=times, values=values, order=order,
                           _spline=spline)
    raise CoefficientError(f"field {name}.kind: unknown kind {kind!r}")


@dataclass(frozen=True)
class CoefficientSystem:
    """Immutable bundle of (A, B, f) with dimension and optional shared period."""

    dim: int
    A: Coefficient
    B: Coefficient
    f: Coefficient
    period: float | None = None

    def eval(self, t):
        """(A(t), B(t), f(t)) at scalar or array t."""
        return self.A(t), self.B(t), self.f(t)

    def max_drift_norm(self, window: tuple[float, float]) -> float:
        return self.A.sup_norm(window)


def parse_system(config_text: str) -> CoefficientSystem:
    """Parse a JSON config into a CoefficientSystem.

    Top-level keys: dim, A, B, f, optional period (and an ignored optional
    'suite' section consumed by the CLI).  Matrices are row-major nested
    arrays; each coefficient is a record with a 'kind'.
    """
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise CoefficientError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CoefficientError("config must be a JSON object")
    return system_from_dict(cfg)


def system_from_dict(cfg: dict) -> CoefficientSystem:
    if "dim" not in cfg:
        raise CoefficientError("field 'dim': missing")
    dim = cfg["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise CoefficientError("field 'dim': positive integer required")
    if dim > MAX_DIM:
        raise CoefficientError(f"field 'dim': at most {MAX_DIM} supported (dense desk-scale storage)")
    for key in ("A", "B", "f"):
        if key not in cfg:
            raise CoefficientError(f"field {key!r}: missing")
    A = _make_coefficient(cfg["A"], (dim, dim), "A")
    B = _make_coefficient(cfg["B"], (dim, dim), "B")
    f = _make_coefficient(cfg["f"], (dim,), "f")
    period = cfg.get("period")
    if period is not None:
        if not isinstance(period, (int, float)) or period <= 0:
            raise CoefficientError("field 'period': positive number required")
        period = float(period)
    return CoefficientSystem(dim=dim, A=A, B=B, f=f, period=period)


def eval_coeffs(sys: CoefficientSystem, t: float):
    """(A(t), B(t), f(t)); out-of-hull t on tabulated coefficients raises."""
    if not np.isfinite(t):
        raise CoefficientError("t must be finite")
    return sys.eval(float(t))


@dataclass(frozen=True)
class HypothesisReport:
    """Sampled check of uniform ellipticity and of the negative growth bound.

    mu0 is the grid-minimum of the smallest singular value of B(t); the
    (M, omega) pair is the fitted envelope of ||U(t,s)||.  mu0 > 0 iff the
    ellipticity hypothesis holds on the sampled grid; the stability flag
    requires omega < 0.
    """

    mu0: float
    omega0_estimate: float
    M_estimate: float
    window: tuple[float, float]
    grid_step: float
    ellipticity_ok: bool
    stability_ok: bool

    @property
    def all_ok(self) -> bool:
        return self.ellipticity_ok and self.stability_ok


def check_hypotheses(sys: CoefficientSystem, window: tuple[float, float],
                     grid_step: float | None = None,
                     cache=None) -> HypothesisReport:
    """Sample mu0 over the window and fit (M, omega) from the evolution family.

    grid_step defaults to 1e-2 of the window length.  An existing cache can
    be passed to reuse its one-step factors for the growth fit.
    """
    t1, t2 = float(window[0]), float(window[1])
    if not t2 > t1:
        raise CoefficientError("window must be nonempty")
    if grid_step is None:
        grid_step = 1e-2 * (t2 - t1)
    ts = np.arange(t1, t2 + 0.5 * grid_step, grid_step)
    bvals = sys.B(ts)
    svals = np.linalg.svd(bvals, compute_uv=False)
    mu0 = float(svals[..., -1].min())

    from . import evolution_family

    if cache is None:
        cache = evolution_family.build_cache(sys, (t1, t2))
    try:
        M, omega = evolution_family.estimate_growth_bound(cache)
    except evolution_family.InsufficientDataError:
        # window too short for a trustworthy fit; flag, don't raise
        M, omega = math.nan, math.nan
    return HypothesisReport(
        mu0=mu0,
        omega0_estimate=float(omega),
        M_estimate=float(M),
        window=(t1, t2),
        grid_step=float(grid_step),
        ellipticity_ok=mu0 > 0.0,
        stability_ok=omega < 0.0,
    )


def autonomous_benchmark() -> CoefficientSystem:
    """Scalar A=-1, B=sqrt(2), f=0; the stationary desk benchmark."""
    return system_from_dict({
        "dim": 1,
        "A": {"kind": "constant", "value": [[-1.0]]},
        "B": {"kind": "constant", "value": [[math.sqrt(2.0)]]},
        "f": {"kind": "constant", "value": [0.0]},
    })


def periodic_benchmark() -> CoefficientSystem:
    """Scalar A(t) = -(1 + 0.5 sin t), B = 1, f(t) = 0.3 cos t, period 2*pi."""
    two_pi = 2.0 * math.pi
    return system_from_dict({
        "dim": 1,
        "A": {"kind": "periodic", "base": [[-1.0]], "sin_amp": [[-0.5]],
              "cos_amp": [[0.0]], "period": two_pi},
        "B": {"kind": "constant", "value": [[1.0]]},
        "f": {"kind": "periodic", "base": [0.0], "sin_amp": [0.0],
              "cos_amp": [0.3], "period": two_pi},
        "period": two_pi,
    })
