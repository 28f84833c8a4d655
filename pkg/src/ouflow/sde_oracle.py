"""Independent Monte Carlo oracle for the linear SDE
dX = (A(t) X + f(t)) dt + B(t) dW, via Euler-Maruyama.

The noise is additive (B does not depend on x), so Euler-Maruyama already has
strong order 1 and Milstein would coincide with it.  Randomness comes from
counter-based Philox streams indexed by (seed, path-block): paths are
processed in fixed blocks of 16384, each block owning a disjoint counter
range, so ensembles are bit-reproducible and blocks could fan out in
parallel without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffs import CoefficientSystem
from .evolution_family import EvolutionCache
from .gaussian import GaussianMeasure

BLOCK = 1 << 14
DIVERGENCE_LIMIT = 1e12

__all__ = ["PathEnsemble", "PathDivergenceError", "simulate_paths",
           "mc_expectation", "exact_terminal_sample"]


class PathDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathEnsemble:
    terminal: np.ndarray  # (k, n)
    k: int
    dt: float
    seed: int
    s: float
    t: float
    x: np.ndarray


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=block << 128))


def simulate_paths(sys: CoefficientSystem, s: float, t: float, x, k: int,
                   dt: float, seed: int) -> PathEnsemble:
    """Euler-Maruyama ensemble; the final partial step lands exactly on t."""
    if t < s:
        raise ValueError(f"requires s <= t, got s={s}, t={t}")
    if k < 1:
        raise ValueError("path count must be >= 1")
    if dt <= 0 or (t > s and dt > (t - s) * (1 + 1e-12)):
        raise ValueError("need 0 < dt <= t - s")
    n = sys.dim
    x = np.atleast_1d(np.asarray(x, dtype=float))

    span = t - s
    nfull = int(np.floor(span / dt + 1e-12))
    rem = span - nfull * dt
    steps = [(s + j * dt, dt) for j in range(nfull)]
    if rem > 1e-12 * max(dt, 1.0):
        steps.append((s + nfull * dt, rem))

    # coefficients are shared across paths; evaluate once per step
    coeff = []
    for (tj, hj) in steps:
        A, B, f = sys.eval(tj)
        coeff.append((A, B, f, hj))
    nsteps = len(coeff)
    chunk = 128  # draws are generated per chunk of steps to amortize rng calls

    def _guard(X, lo):
        amax = np.abs(X).max()
        if not np.isfinite(amax) or amax > DIVERGENCE_LIMIT:
            bad = int(np.argmax(np.abs(X).max(axis=1)))
            raise PathDivergenceError(
                f"path {lo + bad} diverged (|X| > {DIVERGENCE_LIMIT:g})"
            )

    terminal = np.empty((k, n))
    for block_index, lo in enumerate(range(0, k, BLOCK)):
        hi = min(lo + BLOCK, k)
        m = hi - lo
        X = np.broadcast_to(x, (m, n)).copy()
        rng = _block_rng(seed, block_index)
        for js in range(0, nsteps, chunk):
            je = min(js + chunk, nsteps)
            xi = rng.standard_normal((je - js, m, n))
            if n == 1:
                for j in range(js, je):
                    A, B, f, hj = coeff[j]
                    X = X * (1.0 + hj * A[0, 0]) + hj * f[0] \
                        + (np.sqrt(hj) * B[0, 0]) * xi[j - js]
            else:
                for j in range(js, je):
                    A, B, f, hj = coeff[j]
                    X = X + hj * (X @ A.T + f) + np.sqrt(hj) * (xi[j - js] @ B.T)
            _guard(X, lo)
        terminal[lo:hi] = X
    if not steps:
        terminal[:] = x
    return PathEnsemble(terminal=terminal, k=k, dt=dt, seed=seed, s=float(s),
                        t=float(t), x=x)


def mc_expectation(sys: CoefficientSystem, s: float, t: float, x, phi, k: int,
                   dt: float, seed: int):
    """(sample mean of phi at the terminal points, standard error)."""
    ens = simulate_paths(sys, s, t, x, k, dt, seed)
    fn = phi.value if hasattr(phi, "value") else phi
    vals = np.asarray(fn(ens.terminal))
    mean = vals.mean()
    stderr = float(np.std(vals, ddof=1) / np.sqrt(k)) if k > 1 else 0.0
    return mean, stderr


def exact_terminal_sample(cache: EvolutionCache, s: float, t: float, x, k: int,
                          seed: int) -> PathEnsemble:
    """Samples the exact terminal law N(U(t,s)x + g(t,s), Q(t,s)) directly.

    No time stepping: used to isolate the Euler-Maruyama discretization error
    from the statistical error.
    """
    U, g, Q = cache.segment(s, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    law = GaussianMeasure(U @ x + g, Q)
    rng = _block_rng(seed, 0)
    terminal = law.sample(rng, k)
    return PathEnsemble(terminal=terminal, k=k, dt=0.0, seed=seed, s=float(s),
                        t=float(t), x=x)
