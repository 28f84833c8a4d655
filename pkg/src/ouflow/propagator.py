"""Backward evolution operator P_{s,t}, derivative fields and operator norms.

P_{s,t} phi (x) = int phi(y + g(t,s)) N(U(t,s)x, Q(t,s))(dy) acts exactly on
two closed classes (complex exponentials and polynomials of degree <= 4) and
by Gauss-Hermite quadrature on black boxes.  Spatial derivatives use the
commutation identity D_x P_{s,t} phi = U(t,s)^T P_{s,t}(D phi) recursively.

Operator norms between the weighted spaces L^2(nu_t) -> L^2(nu_s) are
estimated by a Hermite-Galerkin truncation: both spaces are pulled back to
the standard Gaussian, the operator matrix is assembled on the orthonormal
tensor Hermite basis up to a total degree, and the largest singular value is
returned (a lower bound that is nondecreasing in the degree).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product as _iproduct

import numpy as np

from . import evolution_family
from .coeffs import CoefficientSystem
from .evolution_family import ArgumentOrderError, EvolutionCache
from .gaussian import BudgetError, GaussianMeasure, gauss_hermite_rule

MAX_POLY_PROPAGATION_DEGREE = 4
MAX_MULTIINDEX_ORDER = 4

__all__ = [
    "SpatialTrig",
    "TrigSum",
    "TrigExp",
    "Poly",
    "BlackBox",
    "LinearTimesTrig",
    "FieldEvaluator",
    "PolyDegreeError",
    "check_multi_index",
    "apply",
    "apply_exact_trigexp",
    "propagate_poly",
    "derivative_field",
    "generator_apply",
    "semigroup_apply",
    "operator_norm_estimate",
]


class PolyDegreeError(ValueError):
    """Polynomial degree above the exact-propagation cap (Isserlis tables)."""


def check_multi_index(alpha, dim: int) -> tuple:
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != dim or any(a < 0 for a in alpha):
        raise ValueError(f"bad multi-index {alpha} for dimension {dim}")
    if sum(alpha) > MAX_MULTIINDEX_ORDER:
        raise ValueError(f"|alpha| = {sum(alpha)} above supported order {MAX_MULTIINDEX_ORDER}")
    return alpha


def _pts(x, dim):
    """Normalize points to an (N, dim) array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and dim == 1:
        return x[:, None]
    if x.ndim == 1:
        return x[None, :]
    return x


# ---------------------------------------------------------------------------
# spatial test-function classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialTrig:
    """x -> c * exp(i <h, x>); bounded by |c|."""

    c: complex
    h: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.h)

    @property
    def freq(self) -> np.ndarray:
        return self.h

    @property
    def bound(self) -> float:
        return abs(self.c)

    def value(self, x):
        x = _pts(x, self.dim)
        return self.c * np.exp(1j * (x @ self.h))

    def grad(self, x):
        v = self.value(x)
        return 1j * v[:, None] * self.h

    def hess(self, x):
        v = self.value(x)
        return -np.outer(self.h, self.h) * v[:, None, None]

    def affine(self, M, b):
        """Substitute x -> Mx + b."""
        M = np.asarray(M, dtype=float)
        b = np.asarray(b, dtype=float)
        return SpatialTrig(self.c * np.exp(1j * (self.h @ b)), M.T @ self.h)

    def conj(self):
        return SpatialTrig(np.conj(self.c), -self.h)


class TrigSum:
    """Finite combination sum_j c_j exp(i <h_j, x>), vectorized over terms."""

    def __init__(self, amps, freqs):
        self.amps = np.asarray(amps, dtype=complex)
        self.freqs = np.atleast_2d(np.asarray(freqs, dtype=float))
        if self.freqs.shape[0] != self.amps.shape[0]:
            raise ValueError("amps and freqs length mismatch")

    @classmethod
    def from_terms(cls, terms):
        return cls([t.c for t in terms], [t.h for t in terms])

    @property
    def dim(self) -> int:
        return self.freqs.shape[1]

    def _phases(self, x):
        x = _pts(x, self.dim)
        return np.exp(1j * (x @ self.freqs.T))  # (N, m)

    def value(self, x):
        return self._phases(x) @ self.amps

    def grad(self, x):
        ph = self._phases(x) * self.amps  # (N, m)
        return 1j * ph @ self.freqs

    def hess(self, x):
        ph = self._phases(x) * self.amps
        return -np.einsum("nm,mi,mj->nij", ph, self.freqs, self.freqs)

    def affine(self, M, b):
        M = np.asarray(M, dtype=float)
        b = np.asarray(b, dtype=float)
        return TrigSum(self.amps * np.exp(1j * (self.freqs @ b)), self.freqs @ M)


@dataclass(frozen=True)
class LinearTimesTrig:
    """x -> (a + <b, x>) * exp(i <h, x>); arises from generators and d/ds fields."""

    a: complex
    b: np.ndarray
    h: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.h)

    def value(self, x):
        x = _pts(x, self.dim)
        return (self.a + x @ self.b) * np.exp(1j * (x @ self.h))


class SumEvaluator:
    """Plain sum of pointwise evaluators."""

    def __init__(self, parts):
        self.parts = list(parts)

    def value(self, x):
        out = None
        for p in self.parts:
            v = p.value(x) if hasattr(p, "value") else p(x)
            out = v if out is None else out + v
        return out


class TrigSumLinearField:
    """sum_j a_j e^{i<x,h_j>} (c0_j + <c1_j, x>), vectorized over terms.

    The form taken by L(t) and d/ds acting on a TrigSum.
    """

    def __init__(self, amps, freqs, c0, c1):
        self.amps = np.asarray(amps, dtype=complex)
        self.freqs = np.atleast_2d(np.asarray(freqs, dtype=float))
        self.c0 = np.asarray(c0, dtype=complex)
        self.c1 = np.atleast_2d(np.asarray(c1, dtype=complex))

    def value(self, x):
        x = _pts(x, self.freqs.shape[1])
        ph = np.exp(1j * (x @ self.freqs.T)) * self.amps  # (N, m)
        return ph @ self.c0 + np.sum((x @ self.c1.T) * ph, axis=1)


@dataclass
class TrigExp:
    """Space-time core Phi(t) exp(i <h(t), x>) with analytic time derivatives."""

    Phi: callable
    dPhi: callable
    h: callable
    dh: callable
    dim: int = 1

    def at(self, t: float) -> SpatialTrig:
        return SpatialTrig(complex(self.Phi(t)), np.atleast_1d(np.asarray(self.h(t), dtype=float)))

    def dt_field(self, t: float) -> LinearTimesTrig:
        """d/dt of the core: (Phi' + i Phi <h'(t), x>) e^{i<h(t),x>}."""
        phi = complex(self.Phi(t))
        dphi = complex(self.dPhi(t))
        hv = np.atleast_1d(np.asarray(self.h(t), dtype=float))
        dhv = np.atleast_1d(np.asarray(self.dh(t), dtype=float))
        return LinearTimesTrig(dphi, 1j * phi * dhv, hv)

    def value(self, t: float, x):
        return self.at(t).value(x)


class PropagatedFamily:
    """Time family t -> P_{t, t+tau} u(t+tau, .) for a time-callable u.

    Lets semigroup outputs be fed back into semigroup_apply (the semigroup
    law composes exactly through the underlying evolution cache).
    """

    def __init__(self, cache, tau: float, inner):
        self.cache = cache
        self.tau = float(tau)
        self.inner = inner
        self.dim = getattr(inner, "dim", cache.sys.dim)

    def at(self, t: float) -> SpatialTrig:
        return apply_exact_trigexp(self.cache, float(t), float(t) + self.tau,
                                   self.inner.at(float(t) + self.tau))


def harmonic_trigexp(amp=1.0, omega=0.0, h0=1.0, h1=0.0, hfreq=1.0, dim=1, axis=0):
    """Convenience TrigExp: Phi(t) = amp*e^{i omega t}, h(t) = h0 + h1 sin(hfreq t) on one axis."""
    e = np.zeros(dim)
    e[axis] = 1.0

    def Phi(t):
        return amp * np.exp(1j * omega * t)

    def dPhi(t):
        return amp * 1j * omega * np.exp(1j * omega * t)

    def h(t):
        return (h0 + h1 * math.sin(hfreq * t)) * e

    def dh(t):
        return (h1 * hfreq * math.cos(hfreq * t)) * e

    return TrigExp(Phi, dPhi, h, dh, dim=dim)


class Poly:
    """Multivariate polynomial with exact algebra, for the closed Mehler path.

    Coefficients are a dict multi-index -> complex.  Total degree is capped
    only where the Isserlis propagation requires it (degree 4); the algebra
    itself (products appearing inside identities) may exceed the cap.
    """

    def __init__(self, dim: int, coeffs: dict | None = None):
        self.dim = dim
        self.coeffs = {}
        for k, v in (coeffs or {}).items():
            k = tuple(int(a) for a in k)
            if len(k) != dim or any(a < 0 for a in k):
                raise ValueError(f"bad monomial index {k}")
            if v != 0:
                self.coeffs[k] = self.coeffs.get(k, 0) + v

    @classmethod
    def constant(cls, dim, c):
        return cls(dim, {(0,) * dim: c})

    @classmethod
    def coordinate(cls, dim, i):
        k = [0] * dim
        k[i] = 1
        return cls(dim, {tuple(k): 1.0})

    @classmethod
    def from_univariate(cls, cs, dim: int = 1, axis: int = 0):
        """Polynomial sum_d cs[d] * x_axis^d."""
        coeffs = {}
        for d, c in enumerate(cs):
            if c != 0:
                k = [0] * dim
                k[axis] = d
                coeffs[tuple(k)] = c
        return cls(dim, coeffs)

    @property
    def degree(self) -> int:
        return max((sum(k) for k in self.coeffs), default=0)

    def value(self, x):
        x = _pts(x, self.dim)
        out = np.zeros(x.shape[0], dtype=complex)
        for k, c in self.coeffs.items():
            term = np.ones(x.shape[0])
            for i, p in enumerate(k):
                if p:
                    term = term * x[:, i] ** p
            out = out + c * term
        if np.all(np.abs(out.imag) == 0.0):
            return out.real
        return out

    def deriv(self, axis: int) -> "Poly":
        coeffs = {}
        for k, c in self.coeffs.items():
            if k[axis] == 0:
                continue
            k2 = list(k)
            k2[axis] -= 1
            coeffs[tuple(k2)] = coeffs.get(tuple(k2), 0) + c * k[axis]
        return Poly(self.dim, coeffs)

    def grad(self, x):
        x = _pts(x, self.dim)
        return np.stack([self.deriv(i).value(x) for i in range(self.dim)], axis=-1)

    def hess(self, x):
        x = _pts(x, self.dim)
        rows = []
        for i in range(self.dim):
            di = self.deriv(i)
            rows.append(np.stack([di.deriv(j).value(x) for j in range(self.dim)], axis=-1))
        return np.stack(rows, axis=-2)

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.dim, other)
        coeffs = dict(self.coeffs)
        for k, c in other.coeffs.items():
            coeffs[k] = coeffs.get(k, 0) + c
        return Poly(self.dim, coeffs)

    def __mul__(self, other):
        if isinstance(other, Poly):
            coeffs = {}
            for k1, c1 in self.coeffs.items():
                for k2, c2 in other.coeffs.items():
                    k = tuple(a + b for a, b in zip(k1, k2))
                    coeffs[k] = coeffs.get(k, 0) + c1 * c2
            return Poly(self.dim, coeffs)
        return Poly(self.dim, {k: c * other for k, c in self.coeffs.items()})

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (other * -1.0 if isinstance(other, Poly) else Poly.constant(self.dim, -other))

    def affine(self, M, b) -> "Poly":
        """Substitute x -> Mx + b."""
        M = np.asarray(M, dtype=float)
        b = np.asarray(b, dtype=float)
        lins = []
        for i in range(self.dim):
            co = {tuple(int(j == a) for a in range(self.dim)): M[i, j] for j in range(self.dim)}
            co[(0,) * self.dim] = b[i]
            lins.append(Poly(self.dim, co))
        out = Poly(self.dim)
        for k, c in self.coeffs.items():
            term = Poly.constant(self.dim, c)
            for i, p in enumerate(k):
                for _ in range(p):
                    term = term * lins[i]
            out = out + term
        return out


@dataclass
class BlackBox:
    """Opaque integrand with an optional gradient evaluator."""

    f: callable
    grad: callable | None = None
    bound: float | None = None

    def value(self, x):
        return self.f(x)


@dataclass
class FieldEvaluator:
    """Callable field with a truthful provenance tag and error estimate."""

    fn: callable
    provenance: str
    error_estimate: float | None = None
    spatial: object | None = None

    def __call__(self, x):
        return self.fn(x)

    def value(self, x):
        return self.fn(x)


# ---------------------------------------------------------------------------
# generator application (classwise exact)
# ---------------------------------------------------------------------------

def generator_apply(sys: CoefficientSystem, t: float, phi):
    """L(t) phi, exact per class.

    L(t) phi = 0.5 Tr(B B^T D^2 phi) + <A(t) x + f(t), D phi>.
    Returns a Poly for Poly input, LinearTimesTrig for SpatialTrig,
    a SumEvaluator for TrigSum.
    """
    A, B, f = sys.eval(t)
    BBt = B @ B.T
    if isinstance(phi, Poly):
        out = Poly(phi.dim)
        for i in range(phi.dim):
            di = phi.deriv(i)
            for j in range(phi.dim):
                out = out + 0.5 * BBt[i, j] * di.deriv(j)
        for i in range(phi.dim):
            di = phi.deriv(i)
            lin = Poly.constant(phi.dim, f[i])
            for j in range(phi.dim):
                lin = lin + A[i, j] * Poly.coordinate(phi.dim, j)
            out = out + lin * di
        return out
    if isinstance(phi, SpatialTrig):
        h = phi.h
        a = phi.c * (-0.5 * float(h @ BBt @ h) + 1j * float(f @ h))
        b = phi.c * 1j * (A.T @ h)
        return LinearTimesTrig(a, b, h)
    if isinstance(phi, TrigSum):
        # termwise L(t), assembled vectorized:
        # c0_j = -|B^T h_j|^2/2 + i<f,h_j>, c1_j = i A^T h_j
        c0 = -0.5 * np.sum((phi.freqs @ B) ** 2, axis=1) + 1j * (phi.freqs @ f)
        c1 = 1j * (phi.freqs @ A)
        return TrigSumLinearField(phi.amps, phi.freqs, c0, c1)
    raise TypeError(f"generator_apply: unsupported class {type(phi)!r}")


# ---------------------------------------------------------------------------
# P_{s,t} on the closed classes
# ---------------------------------------------------------------------------

def apply_exact_trigexp(cache: EvolutionCache, s: float, t: float,
                        phi: SpatialTrig) -> SpatialTrig:
    """Exact Mehler action on a complex exponential.

    P_{s,t} (c e^{i<h,x>}) = c e^{i<g(t,s),h>} e^{-<Q(t,s)h,h>/2}
                             e^{i<x, U(t,s)^T h>}.
    """
    if t < s:
        raise ArgumentOrderError(f"apply requires s <= t, got s={s}, t={t}")
    U, g, Q = cache.segment(s, t)
    h = phi.h
    amp = phi.c * np.exp(1j * float(g @ h) - 0.5 * float(h @ Q @ h))
    return SpatialTrig(amp, U.T @ h)


def _central_moment(Q: np.ndarray, beta: tuple) -> float:
    k = sum(beta)
    if k % 2 == 1:
        return 0.0
    if k == 0:
        return 1.0
    idx = [i for i, b in enumerate(beta) for _ in range(b)]
    if k == 2:
        return float(Q[idx[0], idx[1]])
    if k == 4:
        i, j, kk, l = idx
        return float(Q[i, j] * Q[kk, l] + Q[i, kk] * Q[j, l] + Q[i, l] * Q[j, kk])
    raise PolyDegreeError(f"central moments hard-coded to order 4, got {k}")


def propagate_poly(cache: EvolutionCache, s: float, t: float, phi: Poly) -> Poly:
    """Exact Gaussian-moment propagation of a polynomial of degree <= 4."""
    if t < s:
        raise ArgumentOrderError(f"apply requires s <= t, got s={s}, t={t}")
    if phi.degree > MAX_POLY_PROPAGATION_DEGREE:
        raise PolyDegreeError(
            f"polynomial degree {phi.degree} rejected: exact Isserlis tables stop at "
            f"{MAX_POLY_PROPAGATION_DEGREE}"
        )
    U, g, Q = cache.segment(s, t)
    n = phi.dim
    lins = []
    for i in range(n):
        co = {tuple(int(j == a) for a in range(n)): U[i, j] for j in range(n)}
        co[(0,) * n] = g[i]
        lins.append(Poly(n, co))

    pow_cache: dict = {}

    def lin_power(gamma):
        if gamma in pow_cache:
            return pow_cache[gamma]
        p = Poly.constant(n, 1.0)
        for i, e in enumerate(gamma):
            for _ in range(e):
                p = p * lins[i]
        pow_cache[gamma] = p
        return p

    out = Poly(n)
    for beta, c in phi.coeffs.items():
        ranges = [range(b + 1) for b in beta]
        for gamma in _iproduct(*ranges):
            delta = tuple(b - gmm for b, gmm in zip(beta, gamma))
            mom = _central_moment(Q, delta)
            if mom == 0.0:
                continue
            binom = 1.0
            for b, gmm in zip(beta, gamma):
                binom *= math.comb(b, gmm)
            out = out + (c * binom * mom) * lin_power(gamma)
    return out


def apply(cache: EvolutionCache, s: float, t: float, phi,
          level: int | None = None) -> FieldEvaluator:
    """P_{s,t} phi as a field evaluator; exact where the class allows."""
    if t < s:
        raise ArgumentOrderError(f"apply requires s <= t, got s={s}, t={t}")
    if isinstance(phi, TrigExp):
        phi = phi.at(t)
    if isinstance(phi, SpatialTrig):
        out = apply_exact_trigexp(cache, s, t, phi)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, TrigSum):
        terms = [apply_exact_trigexp(cache, s, t, SpatialTrig(c, hv))
                 for c, hv in zip(phi.amps, phi.freqs)]
        out = TrigSum.from_terms(terms)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, Poly):
        out = propagate_poly(cache, s, t, phi)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, (BlackBox,)) or callable(phi):
        fn = phi.value if isinstance(phi, BlackBox) else phi
        U, g, Q = cache.segment(s, t)
        kernel = GaussianMeasure(g, Q)
        if level is None:
            level = kernel.default_level(None)
        rule = gauss_hermite_rule(level, kernel.rank) if kernel.rank else None
        rule_lo = gauss_hermite_rule(max(level // 2, 2), kernel.rank) if kernel.rank else None
        state = {"err": 0.0}

        def field(x, _U=U, _g=g):
            x = _pts(x, cache.sys.dim)
            mean = x @ _U.T + _g
            if rule is None:
                return np.asarray(fn(mean))
            pts = mean[:, None, :] + (rule.nodes @ kernel.L.T)[None, :, :]
            vals = np.asarray(fn(pts.reshape(-1, cache.sys.dim)))
            vals = vals.reshape(x.shape[0], -1)
            hi = vals @ rule.weights
            pts2 = mean[:, None, :] + (rule_lo.nodes @ kernel.L.T)[None, :, :]
            vals2 = np.asarray(fn(pts2.reshape(-1, cache.sys.dim))).reshape(x.shape[0], -1)
            lo = vals2 @ rule_lo.weights
            state["err"] = max(state["err"], float(np.max(np.abs(hi - lo), initial=0.0)))
            return hi

        ev = FieldEvaluator(field, f"quadrature(level={level})", 0.0)

        def fn_with_err(x, _ev=ev):
            out = field(x)
            _ev.error_estimate = state["err"]
            return out

        ev.fn = fn_with_err
        return ev
    raise TypeError(f"apply: unsupported test function class {type(phi)!r}")


def _alpha_directions(alpha: tuple) -> list:
    return [i for i, a in enumerate(alpha) for _ in range(a)]


def derivative_field(cache: EvolutionCache, s: float, t: float, phi, alpha,
                     level: int | None = None, fd_step: float = 1e-5) -> FieldEvaluator:
    """D_x^alpha P_{s,t} phi via the commutation identity, classwise.

    D_x P phi = U(t,s)^T P(D phi); higher orders recurse.  Black boxes use
    the gradient evaluator for first order and central differences beyond.
    """
    alpha = check_multi_index(alpha, cache.sys.dim)
    k = sum(alpha)
    if k == 0:
        return apply(cache, s, t, phi, level=level)
    U = evolution_matrix_cached(cache, s, t)
    n = cache.sys.dim

    if isinstance(phi, TrigExp):
        phi = phi.at(t)
    if isinstance(phi, SpatialTrig):
        base = apply_exact_trigexp(cache, s, t, phi)
        fac = np.prod([(1j * base.h[d]) ** a for d, a in enumerate(alpha)])
        out = SpatialTrig(base.c * fac, base.h)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, TrigSum):
        parts = []
        for c, hv in zip(phi.amps, phi.freqs):
            base = apply_exact_trigexp(cache, s, t, SpatialTrig(c, hv))
            fac = np.prod([(1j * base.h[d]) ** a for d, a in enumerate(alpha)])
            parts.append(SpatialTrig(base.c * fac, base.h))
        out = TrigSum.from_terms(parts)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, Poly):
        out = Poly(n)
        dirs = _alpha_directions(alpha)
        for ms in _iproduct(range(n), repeat=k):
            w = 1.0
            for m, d in zip(ms, dirs):
                w *= U[m, d]
            if w == 0.0:
                continue
            dphi = phi
            for m in ms:
                dphi = dphi.deriv(m)
            if not dphi.coeffs:
                continue
            out = out + w * propagate_poly(cache, s, t, dphi)
        return FieldEvaluator(out.value, "exact", None, out)
    if isinstance(phi, BlackBox):
        if k == 1 and phi.grad is not None:
            d = _alpha_directions(alpha)[0]
            comps = [apply(cache, s, t,
                           BlackBox(lambda x, i=i: np.asarray(phi.grad(x))[:, i]),
                           level=level)
                     for i in range(n)]

            def field(x):
                return sum(U[m, d] * comps[m](x) for m in range(n))

            return FieldEvaluator(field, comps[0].provenance, None)
        base = apply(cache, s, t, phi, level=level)
        dirs = _alpha_directions(alpha)

        def fd(x, order_dirs=tuple(dirs)):
            x = _pts(x, n)
            if not order_dirs:
                return base(x)
            d = order_dirs[0]
            step = fd_step * (1.0 + np.abs(x[:, d]))
            xp = x.copy()
            xm = x.copy()
            xp[:, d] += step
            xm[:, d] -= step
            fplus = fd(xp, order_dirs[1:])
            fminus = fd(xm, order_dirs[1:])
            return (fplus - fminus) / (2.0 * step)

        return FieldEvaluator(fd, base.provenance + "+fd", None)
    raise TypeError(f"derivative_field: unsupported class {type(phi)!r}")


def evolution_matrix_cached(cache: EvolutionCache, s: float, t: float):
    return evolution_family.evolution_matrix(cache, s, t)


def semigroup_apply(cache: EvolutionCache, tau: float, u, periodic: bool = False):
    """Evolution semigroup (P_tau u)(t, .) = P_{t, t+tau} u(t+tau, .) nodewise.

    u is a SpaceTimeFunction backed by a TrigExp time family (so u(t+tau, .)
    is evaluable anywhere).  With the periodic flag the underlying family is
    assumed T-periodic and wrapping happens through the family itself.
    """
    from . import spaces

    if tau < 0:
        raise ValueError("tau must be >= 0")
    if u.timefun is None:
        raise TypeError("semigroup_apply needs a time-callable (TrigExp) space-time function")
    tol = 1e-9
    for ti in u.tgrid:
        target = ti + tau
        if periodic and u.periodic:
            pass  # family is periodic; the cache still must cover [ti, ti+tau]
        if target > cache.t1 + tol or ti < cache.t0 - tol:
            raise evolution_family.WindowError(
                f"semigroup_apply needs the cache to cover [{ti}, {target}]"
            )
    nodes = [apply_exact_trigexp(cache, float(ti), float(ti) + tau, u.timefun.at(float(ti) + tau))
             for ti in u.tgrid]
    fam = PropagatedFamily(cache, tau, u.timefun)
    return spaces.SpaceTimeFunction(u.tgrid.copy(), nodes, periodic=u.periodic,
                                    timefun=fam)


# ---------------------------------------------------------------------------
# Hermite-Galerkin operator norms
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _hermite_tables(N: int):
    """Power-basis coefficients (ascending) of normalized probabilists' Hermites."""
    polys = [np.array([1.0]), np.array([0.0, 1.0])]
    while len(polys) < N + 1:
        k = len(polys) - 1
        xhk = np.concatenate([[0.0], polys[k]])
        prev = np.zeros_like(xhk)
        prev[: len(polys[k - 1])] = polys[k - 1]
        polys.append(xhk - k * prev)
    return [p / math.sqrt(math.factorial(d)) for d, p in enumerate(polys[: N + 1])]


def _basis_indices(n: int, N: int) -> list:
    idx = [k for k in _iproduct(range(N + 1), repeat=n) if sum(k) <= N]
    idx.sort(key=lambda k: (sum(k), k))
    return idx


def _sym_inv_sqrt(Q: np.ndarray):
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.min() <= 0:
        raise np.linalg.LinAlgError("matrix not positive definite")
    return (V / np.sqrt(w)) @ V.T


def _axis_hermite_values(w: np.ndarray, N: int):
    """Values H[d] of normalized Hermites for d <= N at w (any shape), stacked."""
    tables = _hermite_tables(N)
    return np.stack([np.polynomial.polynomial.polyval(w, t) for t in tables], axis=0)


def operator_norm_estimate(cache: EvolutionCache, canonical, s: float, t: float,
                           alpha, degree: int = 12, level: int | None = None) -> float:
    """Largest singular value of D^alpha P_{s,t} : L^2(nu_t) -> L^2(nu_s),
    on the tensor Hermite basis up to the given total degree.

    `canonical` maps a time to its canonical GaussianMeasure.  The estimate
    is a lower bound on the operator norm, nondecreasing in `degree`.
    """
    alpha = check_multi_index(alpha, cache.sys.dim)
    if degree < 4:
        raise ValueError("degree must be >= 4")
    n = cache.sys.dim
    if level is None:
        level = degree + 3
    if level ** n > 2_000_000:
        raise BudgetError(f"outer node count {level}**{n} too large")

    nu_s: GaussianMeasure = canonical(s)
    nu_t: GaussianMeasure = canonical(t)
    U, g, Q = cache.segment(s, t)
    kernel = GaussianMeasure(g, Q)
    R_t = _sym_inv_sqrt(nu_t.Q)
    R_s = _sym_inv_sqrt(nu_s.Q)

    rule_out = gauss_hermite_rule(level, n)
    x_out = nu_s.m + rule_out.nodes @ nu_s.L.T          # (Mo, n)
    w_out = rule_out.weights

    # basis of L^2(nu_s) evaluated at the outer nodes
    idx = _basis_indices(n, degree)
    ws = (x_out - nu_s.m) @ R_s.T                        # (Mo, n)
    axis_s = _axis_hermite_values(ws.T, degree)          # (deg+1, n, Mo)
    E_s = np.stack([np.prod([axis_s[k[i], i] for i in range(n)], axis=0) for k in idx])

    # inner evaluation points of P e_j at the outer nodes
    mean = x_out @ U.T + g                               # (Mo, n)
    if kernel.rank:
        rule_in = gauss_hermite_rule(level, kernel.rank)
        y = mean[:, None, :] + (rule_in.nodes @ kernel.L.T)[None, :, :]
        w_in = rule_in.weights
    else:
        y = mean[:, None, :]
        w_in = np.ones(1)
    wt = (y - nu_t.m) @ R_t.T                            # (Mo, Mi, n)
    axis_t = _axis_hermite_values(np.moveaxis(wt, -1, 0), degree)  # (deg+1, n, Mo, Mi)

    pe_cache: dict = {}

    def p_basis(k):
        if k in pe_cache:
            return pe_cache[k]
        vals = np.prod([axis_t[k[i], i] for i in range(n)], axis=0)  # (Mo, Mi)
        out = vals @ w_in
        pe_cache[k] = out
        return out

    # ambient-derivative expansion: D_d P e_k = sum_m U[m,d] P(d_m e_k),
    # d_m e_k = sum_i R_t[i,m] sqrt(k_i) e_{k-e_i}; fold G = R_t U per direction.
    G = R_t @ U
    dirs = _alpha_directions(alpha)
    pos = {k: j for j, k in enumerate(idx)}
    M = np.zeros((len(idx), len(idx)))
    for col, k in enumerate(idx):
        combo = {k: 1.0}
        for d in dirs:
            new: dict = {}
            for ki, c in combo.items():
                for i in range(n):
                    if ki[i] == 0:
                        continue
                    k2 = list(ki)
                    k2[i] -= 1
                    k2 = tuple(k2)
                    new[k2] = new.get(k2, 0.0) + c * G[i, d] * math.sqrt(ki[i])
            combo = new
            if not combo:
                break
        if not combo:
            continue
        fld = np.zeros(x_out.shape[0])
        for ki, c in combo.items():
            fld = fld + c * p_basis(ki)
        M[:, col] = E_s @ (w_out * fld)
    return float(np.linalg.norm(M, ord=2))
