"""Evolution systems of measures and their verification identities.

The canonical family is nu_t = N(g(t,-inf), Q(t,-inf)).  Every other family
is a convolution of the canonical one with a base measure pushed along the
adjoint transition: nu_t = N(g(t,-inf), Q(t,-inf)) * mu_t, where the Fourier
transform of mu_t is mu_hat(U(t,t0)^T h).  Invariance is verified in Fourier
form,

    e^{i<g(t,s),h>} e^{-<Q(t,s)h,h>/2} nu_hat_s(U(t,s)^T h) = nu_hat_t(h),

which is exact on all supported families and avoids nested quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import evolution_family, moments, propagator
from .evolution_family import EvolutionCache
from .gaussian import GaussianMeasure

__all__ = [
    "CanonicalMeasures",
    "canonical_measure",
    "PointMass",
    "GaussianBase",
    "FiniteMixture",
    "MeasureFamily",
    "family_fourier",
    "invariance_residual",
    "invop_residual",
    "convergence_experiment",
]


class CanonicalMeasures:
    """Memoized accessor t -> N(g(t,-inf), Q(t,-inf)) over one cache."""

    def __init__(self, cache: EvolutionCache, tol: float = 1e-10):
        self.cache = cache
        self.tol = tol
        self._memo: dict = {}

    def moments(self, t: float) -> moments.MomentPair:
        key = float(t)
        if key not in self._memo:
            self._memo[key] = moments.limit_moments(self.cache, key, self.tol)
        return self._memo[key]

    def __call__(self, t: float) -> GaussianMeasure:
        mp = self.moments(t)
        return GaussianMeasure(mp.g, mp.Q)


def canonical_measure(cache: EvolutionCache, t: float, tol: float = 1e-10) -> GaussianMeasure:
    mp = moments.limit_moments(cache, t, tol)
    return GaussianMeasure(mp.g, mp.Q)


# ---------------------------------------------------------------------------
# base measures with closed-form Fourier transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointMass:
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    def fourier(self, h):
        return np.exp(1j * (np.asarray(h) @ self.x0))

    def second_moment(self) -> float:
        return float(self.x0 @ self.x0)

    def expectation(self, g, level=None):
        fn = g.value if hasattr(g, "value") else g
        return np.asarray(fn(self.x0[None, :]))[0]


@dataclass(frozen=True)
class GaussianBase:
    measure: GaussianMeasure

    def fourier(self, h):
        return self.measure.fourier(h)

    def second_moment(self) -> float:
        return self.measure.second_moment()

    def expectation(self, g, level=None):
        return self.measure.expectation(g, level=level)


@dataclass(frozen=True)
class FiniteMixture:
    weights: tuple
    components: tuple  # of GaussianMeasure

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def fourier(self, h):
        return sum(w * c.fourier(h) for w, c in zip(self.weights, self.components))

    def second_moment(self) -> float:
        return float(sum(w * c.second_moment() for w, c in zip(self.weights, self.components)))

    def expectation(self, g, level=None):
        return sum(w * c.expectation(g, level=level)
                   for w, c in zip(self.weights, self.components))


# ---------------------------------------------------------------------------
# measure families
# ---------------------------------------------------------------------------

@dataclass
class MeasureFamily:
    """Canonical family, or a Prop-2.2 family built over a base at time t0.

    cov_scale deliberately mis-scales the canonical covariance; it exists so
    that the invariance detector can be shown to fire on a perturbed family.
    """

    canonical: CanonicalMeasures
    kind: str = "canonical"
    t0: float = 0.0
    base: object | None = None
    cov_scale: float = 1.0

    @property
    def cache(self) -> EvolutionCache:
        return self.canonical.cache

    def _gauss_part(self, t: float):
        mp = self.canonical.moments(t)
        return mp.g, self.cov_scale * mp.Q

    def fourier(self, t: float, h) -> complex:
        h = np.atleast_1d(np.asarray(h, dtype=float))
        g, Q = self._gauss_part(t)
        val = np.exp(1j * float(g @ h) - 0.5 * float(h @ Q @ h))
        if self.kind == "from_base":
            U = evolution_family.transition_any(self.cache, self.t0, t)
            val = val * self.base.fourier(U.T @ h)
        return complex(val)

    def measure(self, t: float):
        """Gaussian (or mixture) representation of nu_t where it is closed."""
        g, Q = self._gauss_part(t)
        core = GaussianMeasure(g, Q)
        if self.kind == "canonical":
            return core
        U = evolution_family.transition_any(self.cache, self.t0, t)
        if isinstance(self.base, PointMass):
            return GaussianMeasure(g + U @ self.base.x0, Q)
        if isinstance(self.base, GaussianBase):
            bm = self.base.measure
            return GaussianMeasure(g + U @ bm.m, Q + U @ bm.Q @ U.T)
        if isinstance(self.base, FiniteMixture):
            comps = tuple(GaussianMeasure(g + U @ c.m, Q + U @ c.Q @ U.T)
                          for c in self.base.components)
            return FiniteMixture(self.base.weights, comps)
        raise TypeError(f"no closed representation for base {type(self.base)!r}")

    def second_moment(self, t: float) -> float:
        return float(self.measure(t).second_moment())


def canonical_family(canonical: CanonicalMeasures) -> MeasureFamily:
    return MeasureFamily(canonical, kind="canonical")


def from_base_family(canonical: CanonicalMeasures, t0: float, base) -> MeasureFamily:
    return MeasureFamily(canonical, kind="from_base", t0=float(t0), base=base)


def family_fourier(fam: MeasureFamily, t: float, h) -> complex:
    return fam.fourier(t, h)


def invariance_residual(fam: MeasureFamily, s: float, t: float, hs) -> float:
    """max_h | e^{i<g(t,s),h>} e^{-<Q(t,s)h,h>/2} nu_hat_s(U^T h) - nu_hat_t(h) |."""
    if t < s:
        raise evolution_family.ArgumentOrderError(f"requires s <= t, got {s}, {t}")
    U, g, Q = fam.cache.segment(s, t)
    worst = 0.0
    for h in np.atleast_2d(np.asarray(hs, dtype=float)):
        lhs = (np.exp(1j * float(g @ h) - 0.5 * float(h @ Q @ h))
               * fam.fourier(s, U.T @ h))
        rhs = fam.fourier(t, h)
        worst = max(worst, abs(lhs - rhs))
    return worst


def invop_residual(sys, cache: EvolutionCache, canonical: CanonicalMeasures,
                   s: float, phi, level: int = 40, dt: float = 1e-4) -> float:
    """| int L(s) phi d nu_s  -  int phi d/ds rho(s,.) dx |.

    The density derivative is a symmetric difference of the limit measures at
    s +/- dt, so the right side is (E_{nu_{s+dt}}[phi] - E_{nu_{s-dt}}[phi])
    / (2 dt).
    """
    if dt < 1e-8:
        warnings.warn("dt below 1e-8: density finite difference is ill-conditioned")
    lphi = propagator.generator_apply(sys, s, phi)
    lhs = canonical(s).expectation(lphi, level=level)
    ep = canonical(s + dt).expectation(phi, level=level)
    em = canonical(s - dt).expectation(phi, level=level)
    rhs = (ep - em) / (2.0 * dt)
    return abs(complex(lhs) - complex(rhs))


def convergence_experiment(cache: EvolutionCache, canonical: CanonicalMeasures,
                           base, t: float, s_list, phi, level: int = 24):
    """gap(s) = | int P_{s,t} phi d mu  -  int phi d nu_t |, plus a fitted rate.

    `base` is a fixed probe measure (PointMass / GaussianBase / FiniteMixture)
    plugged in at every s, or a callable s -> measure.  For probes with
    bounded moments the gap decays like e^{omega (t-s)} as s -> -inf.
    Returns (rows, rate) with rows of (s, gap) and ln-gap ~ a + rate*(t-s).
    """
    rows = []
    for s in s_list:
        fld = propagator.apply(cache, float(s), float(t), phi)
        mu = base(float(s)) if callable(base) else base
        lhs = mu.expectation(fld, level=level)
        rhs = canonical(t).expectation(phi, level=level)
        rows.append((float(s), abs(complex(lhs) - complex(rhs))))
    gaps = np.array([r[1] for r in rows])
    taus = np.array([t - r[0] for r in rows])
    ok = gaps > 1e-15
    if ok.sum() >= 2:
        X = np.stack([np.ones(ok.sum()), taus[ok]], axis=1)
        coef, *_ = np.linalg.lstsq(X, np.log(gaps[ok]), rcond=None)
        rate = float(coef[1])
    else:
        rate = -math.inf
    return rows, rate
