"""Evolution family U(t,s) of x' = A(t)x, with joint moment flow segments.

The cache integrates the matrix ODE dU/dt = A(t)U one grid cell at a time
with a fixed-step classical RK4 scheme (fixed step so grid compositions are
deterministic and reproducible), and stores alongside each cell the one-step
mean/covariance increments

    dg/dt = A(t) g + f(t),         g(s) = 0,
    dQ/dt = A(t) Q + Q A(t)^T + B(t) B(t)^T,   Q(s) = 0,

i.e. the affine flow of the full linear diffusion.  Cells are composed
through a binary segment table, so any in-window interval query costs
O(log #steps) small-matrix products; off-grid endpoints are handled by
fractional RK4 steps.

Norms are spectral throughout.  Composition across arbitrary split points
agrees to a few ulps (floating matmul is not associative, so bitwise
equality across splits is not achievable by any scheme).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coeffs import CoefficientSystem

DIVERGENCE_LIMIT = 1e12

__all__ = [
    "EvolutionCache",
    "ArgumentOrderError",
    "WindowError",
    "DivergenceError",
    "InsufficientDataError",
    "build_cache",
    "evolution_matrix",
    "affine_flow",
    "transition_any",
    "estimate_growth_bound",
    "flow_s_derivatives",
]


class ArgumentOrderError(ValueError):
    """s > t requested where only forward products are defined."""


class WindowError(ValueError):
    """Query outside the cached window."""


class DivergenceError(RuntimeError):
    """Integrator blow-up (norm above DIVERGENCE_LIMIT)."""


class InsufficientDataError(ValueError):
    """Too little data for a growth-bound fit."""


def _rhs(A, BBt, f, U, g, Q):
    """Stage derivative of the joint (U, g, Q) flow; all arguments batched."""
    dU = A @ U
    dg = np.einsum("...ij,...j->...i", A, g) + f
    dQ = A @ Q + Q @ np.swapaxes(A, -1, -2) + BBt
    return dU, dg, dQ


def _rk4_segments(sys: CoefficientSystem, starts: np.ndarray, h) -> tuple:
    """One RK4 step of the joint flow over [starts, starts+h], batched.

    h is scalar or an array broadcastable against starts.  Returns (U, g, Q)
    stacks with leading shape starts.shape.
    """
    n = sys.dim
    starts = np.asarray(starts, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), starts.shape)
    hM = h[..., None, None]
    hv = h[..., None]

    A0, B0, f0 = sys.eval(starts)
    Am, Bm, fm = sys.eval(starts + 0.5 * h)
    A1, B1, f1 = sys.eval(starts + h)
    BBt0 = B0 @ np.swapaxes(B0, -1, -2)
    BBtm = Bm @ np.swapaxes(Bm, -1, -2)
    BBt1 = B1 @ np.swapaxes(B1, -1, -2)

    eye = np.broadcast_to(np.eye(n), starts.shape + (n, n)).copy()
    zv = np.zeros(starts.shape + (n,))
    zM = np.zeros(starts.shape + (n, n))

    k1 = _rhs(A0, BBt0, f0, eye, zv, zM)
    k2 = _rhs(Am, BBtm, fm, eye + 0.5 * hM * k1[0], zv + 0.5 * hv * k1[1], zM + 0.5 * hM * k1[2])
    k3 = _rhs(Am, BBtm, fm, eye + 0.5 * hM * k2[0], zv + 0.5 * hv * k2[1], zM + 0.5 * hM * k2[2])
    k4 = _rhs(A1, BBt1, f1, eye + hM * k3[0], zv + hv * k3[1], zM + hM * k3[2])

    U = eye + (hM / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    g = zv + (hv / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    Q = zM + (hM / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    return U, g, Q


def _compose(left, right):
    """Compose segment over [a,b] (left) with segment over [b,c] (right)."""
    U1, g1, Q1 = left
    U2, g2, Q2 = right
    U = U2 @ U1
    g = U2 @ g1 + g2
    Q = U2 @ Q1 @ U2.T + Q2
    return U, g, Q


@dataclass
class EvolutionCache:
    """Grid-sampled evolution family with composition tables and growth metadata."""

    sys: CoefficientSystem
    t0: float
    t1: float
    h: float
    nsteps: int
    levels: list = field(repr=False)
    growth: tuple | None = None
    order: int = 4

    @property
    def window(self) -> tuple[float, float]:
        return (self.t0, self.t1)

    def grid(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.nsteps + 1)

    def identity(self):
        n = self.sys.dim
        return np.eye(n), np.zeros(n), np.zeros((n, n))

    def _check_window(self, t: float):
        tol = 1e-9 * max(1.0, abs(self.t0), abs(self.t1))
        if t < self.t0 - tol or t > self.t1 + tol:
            raise WindowError(
                f"time {t} outside cached window [{self.t0}, {self.t1}]"
            )

    def _grid_span(self, ks: int, kt: int):
        """Canonical composition of grid cells [ks, kt) from the segment table."""
        seg = self.identity()
        pos = ks
        while pos < kt:
            j = 0
            while (pos % (2 << j) == 0) and pos + (2 << j) <= kt and (j + 1) < len(self.levels):
                j += 1
            while pos + (1 << j) > kt:
                j -= 1
            U, g, Q = self.levels[j]
            i = pos >> j
            seg = _compose(seg, (U[i], g[i], Q[i]))
            pos += 1 << j
        return seg

    def segment(self, s: float, t: float):
        """(U(t,s), g(t,s), Q(t,s)) for s <= t inside the window."""
        if t < s:
            raise ArgumentOrderError(
                f"segment requires s <= t, got s={s}, t={t} (backward products are undefined here)"
            )
        self._check_window(s)
        self._check_window(t)
        if t == s:
            return self.identity()
        u = (s - self.t0) / self.h
        v = (t - self.t0) / self.h
        ks = min(int(math.ceil(u - 1e-9)), self.nsteps)
        kt = max(int(math.floor(v + 1e-9)), 0)
        eps = 1e-9 * self.h
        if kt < ks:
            return _frac_segment(self.sys, s, t)
        seg = self.identity()
        left_edge = self.t0 + ks * self.h
        if left_edge - s > eps:
            seg = _frac_segment(self.sys, s, left_edge)
        seg = _compose(seg, self._grid_span(ks, kt))
        right_edge = self.t0 + kt * self.h
        if t - right_edge > eps:
            seg = _compose(seg, _frac_segment(self.sys, right_edge, t))
        return seg


def _frac_segment(sys: CoefficientSystem, a: float, b: float):
    """Direct RK4 over a sub-cell interval [a, b]."""
    if b - a <= 0:
        n = sys.dim
        return np.eye(n), np.zeros(n), np.zeros((n, n))
    U, g, Q = _rk4_segments(sys, np.asarray(a), b - a)
    return U, g, Q


def default_step(sys: CoefficientSystem, window: tuple[float, float]) -> float:
    """1e-3 * min(1, 1/max_t ||A(t)||); keeps truncation below quadrature tolerances."""
    amax = sys.max_drift_norm(window)
    return 1e-3 * min(1.0, 1.0 / max(amax, 1e-12))


def build_cache(sys: CoefficientSystem, window: tuple[float, float],
                h_U: float | None = None) -> EvolutionCache:
    """Integrate one-step factors over the window and build composition tables."""
    t0, t1 = float(window[0]), float(window[1])
    if not t1 > t0:
        raise WindowError("window must be nonempty")
    if h_U is None:
        h_U = default_step(sys, (t0, t1))
    if h_U <= 0:
        raise ValueError("h_U must be positive")
    nsteps = max(1, int(round((t1 - t0) / h_U)))
    h = (t1 - t0) / nsteps

    starts = t0 + h * np.arange(nsteps)
    U, g, Q = _rk4_segments(sys, starts, h)
    norms = np.linalg.norm(U, ord=2, axis=(-2, -1))
    if not np.all(np.isfinite(norms)) or norms.max() > DIVERGENCE_LIMIT:
        k = int(np.argmax(np.where(np.isfinite(norms), norms, np.inf)))
        raise DivergenceError(
            f"one-step integration diverged on [{starts[k]}, {starts[k] + h}]; reduce h_U"
        )

    levels = [(U, g, Q)]
    with np.errstate(over="ignore", invalid="ignore"):
        while levels[-1][0].shape[0] >= 2:
            Uj, gj, Qj = levels[-1]
            m = Uj.shape[0] // 2
            L = (Uj[0:2 * m:2], gj[0:2 * m:2], Qj[0:2 * m:2])
            R = (Uj[1:2 * m:2], gj[1:2 * m:2], Qj[1:2 * m:2])
            U2 = R[0] @ L[0]
            g2 = np.einsum("kij,kj->ki", R[0], L[1]) + R[1]
            Q2 = R[0] @ L[2] @ np.swapaxes(R[0], -1, -2) + R[2]
            amax = np.abs(U2).max()
            if not np.isfinite(amax) or amax > DIVERGENCE_LIMIT:
                j = len(levels)
                bad = np.abs(U2).max(axis=(-2, -1))
                i = int(np.argmax(np.where(np.isfinite(bad), bad, np.inf)))
                a = t0 + i * (h * (1 << j))
                raise DivergenceError(
                    f"composed evolution diverged on [{a}, {a + h * (1 << j)}]; reduce h_U"
                )
            levels.append((U2, g2, Q2))

    return EvolutionCache(sys=sys, t0=t0, t1=t1, h=h, nsteps=nsteps, levels=levels)


def evolution_matrix(cache: EvolutionCache, s: float, t: float) -> np.ndarray:
    """U(t,s) for s <= t; the adjoint is a transpose at call sites."""
    return cache.segment(s, t)[0]


def affine_flow(cache: EvolutionCache, s: float, t: float):
    """(U(t,s), g(t,s), Q(t,s)) for s <= t."""
    return cache.segment(s, t)


def transition_any(cache: EvolutionCache, s: float, t: float) -> np.ndarray:
    """U(t,s) for either time order; the backward direction inverts U(s,t).

    The forward evolution matrix is invertible (positive determinant by
    Liouville), which is what makes the two-sided transition well defined.
    """
    if t >= s:
        return evolution_matrix(cache, s, t)
    return np.linalg.inv(evolution_matrix(cache, t, s))


def flow_s_derivatives(cache: EvolutionCache, s: float, t: float):
    """d/ds of (U(t,s), g(t,s), Q(t,s)).

    dU/ds = -U A(s), dg/ds = -U f(s), dQ/ds = -U B(s)B(s)^T U^T.
    """
    U = evolution_matrix(cache, s, t)
    A, B, f = cache.sys.eval(s)
    dU = -U @ A
    dg = -U @ f
    dQ = -U @ (B @ B.T) @ U.T
    return dU, dg, dQ


def estimate_growth_bound(cache: EvolutionCache, sample_pairs: int = 64):
    """Fit log||U(t,s)|| <= log M + omega (t-s) over sampled pairs.

    Least squares gives the slope omega; the intercept is then raised to the
    envelope over the samples, so violations are zero on the sample set (the
    fit is an envelope, not a bound certificate).  Caches the result.
    """
    if cache.growth is not None:
        return cache.growth
    L = cache.t1 - cache.t0
    amax = cache.sys.max_drift_norm(cache.window)
    if L * max(amax, 1e-12) < 5.0:
        raise InsufficientDataError(
            "window shorter than 5 characteristic times; growth fit unreliable"
        )
    m = int(sample_pairs)
    taus, ss = [], []
    phi = 0.6180339887498949
    for j in range(m):
        tau = L * (j + 1) / m
        s = cache.t0 + ((j * phi) % 1.0) * (L - tau)
        taus.append(tau)
        ss.append(s)
    pairs = [(s, s + tau) for s, tau in zip(ss, taus)]
    logs, gaps = [], []
    for s, t in pairs:
        nrm = np.linalg.norm(evolution_matrix(cache, s, t), ord=2)
        if nrm > 0 and np.isfinite(nrm):
            logs.append(math.log(nrm))
            gaps.append(t - s)
    if len(logs) < 8:
        raise InsufficientDataError(f"only {len(logs)} usable pairs (need >= 8)")
    gaps = np.asarray(gaps)
    logs = np.asarray(logs)
    X = np.stack([np.ones_like(gaps), gaps], axis=1)
    coef, *_ = np.linalg.lstsq(X, logs, rcond=None)
    omega = float(coef[1])
    logM = float(np.max(logs - omega * gaps))
    M = math.exp(max(logM, 0.0))
    cache.growth = (M, omega)
    return cache.growth
