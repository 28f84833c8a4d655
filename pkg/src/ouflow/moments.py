"""Mean and covariance flows g(t,s), Q(t,s) and their infinite-horizon limits.

The pair solves, in the Lyapunov-ODE form shared with the evolution cache,

    dg/dt = A(t) g + f(t),  g(s) = 0,
    dQ/dt = A(t) Q + Q A(t)^T + B(t) B(t)^T,  Q(s) = 0,

and the s = -infinity limits are computed by truncation: the horizon doubles
until the exponential tail bounds (from the growth envelope of U) fall below
the requested tolerance, capped at 200 characteristic times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import evolution_family
from .evolution_family import EvolutionCache, ArgumentOrderError, WindowError

__all__ = [
    "MomentPair",
    "SingularityError",
    "NoLimitError",
    "moment_pair",
    "limit_moments",
    "qinv_sqrt_norm",
]


class SingularityError(RuntimeError):
    """Q numerically singular where an inverse square root was requested."""


class NoLimitError(RuntimeError):
    """No infinite-horizon limit (growth bound nonnegative or tail unreachable)."""


@dataclass(frozen=True)
class MomentPair:
    """g, Q over [s, t]; s = -inf entries carry the truncation horizon used."""

    g: np.ndarray
    Q: np.ndarray
    s: float
    t: float
    horizon: float | None = None
    tail_bound: float | None = None


def _psd_repair(Q: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp integration noise; error on genuine indefiniteness."""
    Q = 0.5 * (Q + Q.T)
    w = np.linalg.eigvalsh(Q)
    scale = max(float(np.max(np.abs(w), initial=0.0)), 0.0)
    if w.min(initial=0.0) < -1e-12 * max(scale, 1.0):
        raise SingularityError(
            f"covariance flow produced an indefinite matrix (min eig {w.min()})"
        )
    if w.min(initial=0.0) < 0.0:
        w2, V = np.linalg.eigh(Q)
        Q = (V * np.clip(w2, 0.0, None)) @ V.T
        Q = 0.5 * (Q + Q.T)
    return Q


def moment_pair(cache: EvolutionCache, s: float, t: float) -> MomentPair:
    """g(t,s), Q(t,s) on the cache's RK4 grid; s <= t required."""
    if t < s:
        raise ArgumentOrderError(f"moment_pair requires s <= t, got s={s}, t={t}")
    _, g, Q = cache.segment(s, t)
    return MomentPair(g=g, Q=_psd_repair(Q), s=float(s), t=float(t))


def _tails(cache: EvolutionCache, tau: float):
    """Exponential tail bounds of the truncated Q and g integrals."""
    M, omega = cache.growth
    supB = cache.sys.B.sup_norm(cache.window)
    supf = cache.sys.f.sup_norm(cache.window)
    q_tail = M * M * math.exp(2.0 * omega * tau) * supB * supB / (2.0 * abs(omega))
    g_tail = M * math.exp(omega * tau) * supf / abs(omega)
    return q_tail, g_tail


def limit_moments(cache: EvolutionCache, t: float, tol: float = 1e-10) -> MomentPair:
    """g(t,-inf), Q(t,-inf) by truncation at a horizon meeting the tail bound.

    The recorded bound is the covariance tail M^2 e^{2 omega tau} sup||BB^T||
    / (2|omega|); the mean tail (which decays only like e^{omega tau}) is
    also driven below tol so that forced systems resolve their means to the
    same accuracy.
    """
    if cache.growth is None:
        evolution_family.estimate_growth_bound(cache)
    M, omega = cache.growth
    if omega >= -1e-9:
        # below the fit's resolution the family is not certifiably stable
        raise NoLimitError(
            f"growth bound omega={omega:.4g} is not negative: no limit measure"
        )
    char = 1.0 / abs(omega)
    tau = char
    while max(_tails(cache, tau)) > tol:
        tau *= 2.0
        if tau > 200.0 * char:
            raise NoLimitError(
                f"tail bound {max(_tails(cache, tau)):.3g} cannot reach tol={tol} "
                f"within 200 characteristic times"
            )
    s = t - tau
    if s < cache.t0 - 1e-9:
        raise WindowError(
            f"limit moments at t={t} need horizon {tau:.3g}; extend the cache "
            f"window to start at or before {s:.6g}"
        )
    mp = moment_pair(cache, s, t)
    q_tail, _ = _tails(cache, tau)
    return MomentPair(g=mp.g, Q=mp.Q, s=-math.inf, t=float(t),
                      horizon=float(tau), tail_bound=float(q_tail))


def qinv_sqrt_norm(cache: EvolutionCache, s: float, t: float) -> float:
    """||Q^{-1/2}(t,s)|| = (smallest eigenvalue of Q(t,s))^{-1/2}."""
    if not t > s:
        raise ArgumentOrderError(f"qinv_sqrt_norm requires t > s, got s={s}, t={t}")
    Q = moment_pair(cache, s, t).Q
    w = np.linalg.eigvalsh(Q)
    lam_min, lam_max = float(w[0]), float(w[-1])
    if lam_min <= 1e-13 * max(lam_max, 1e-300):
        raise SingularityError(
            f"Q(t,s) numerically singular: smallest eigenvalue {lam_min:.3g}"
        )
    return lam_min ** -0.5
