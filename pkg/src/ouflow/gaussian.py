"""Gaussian measure algebra: densities, Fourier transforms, convolution,
sampling, and tensor Gauss-Hermite quadrature.

Covariances may be semidefinite: the factor is rank-revealing (eigenvalue
based, descending order), degenerate directions behave as point masses, and
quadrature/sampling run in the latent rank-r space.  Complex integrands are
supported natively since the verification core is e^{i<h,x>}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "GaussianError",
    "NoDensityError",
    "BudgetError",
    "QuadratureRule",
    "gauss_hermite_rule",
    "GaussianMeasure",
]

NODE_BUDGET = 10_000_000
SMOOTH_LEVEL = 20
OSCILLATORY_LEVEL = 40


class GaussianError(ValueError):
    pass


class NoDensityError(GaussianError):
    """The measure exists but has no Lebesgue density (singular covariance)."""


class BudgetError(RuntimeError):
    """Tensor quadrature node budget exceeded."""


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Hermite rule for the standard normal in `dim` variables."""

    nodes: np.ndarray   # (level**dim, dim)
    weights: np.ndarray  # (level**dim,), positive, sums to 1
    level: int


@lru_cache(maxsize=64)
def _herme_1d(level: int):
    z, w = np.polynomial.hermite_e.hermegauss(level)
    w = w / w.sum()  # exact unit mass
    return z, w


@lru_cache(maxsize=64)
def gauss_hermite_rule(level: int, dim: int) -> QuadratureRule:
    if level < 2:
        raise ValueError("quadrature level must be >= 2")
    if level ** dim > NODE_BUDGET:
        raise BudgetError(f"node count {level}**{dim} exceeds budget {NODE_BUDGET}")
    z, w = _herme_1d(level)
    if dim == 1:
        return QuadratureRule(z[:, None].copy(), w.copy(), level)
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return QuadratureRule(nodes, weights, level)


def _evaluator(g):
    if callable(g):
        return g
    if hasattr(g, "value"):
        return g.value
    raise TypeError(f"cannot evaluate integrand of type {type(g)!r}")


class GaussianMeasure:
    """N(m, Q) with a cached rank-revealing factor L, Q = L L^T."""

    def __init__(self, m, Q):
        m = np.atleast_1d(np.asarray(m, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n = m.shape[0]
        if Q.shape != (n, n):
            raise GaussianError(f"covariance shape {Q.shape} does not match mean dim {n}")
        Q = 0.5 * (Q + Q.T)
        w, V = np.linalg.eigh(Q)
        scale = max(float(w.max(initial=0.0)), 0.0)
        if w.min(initial=0.0) < -1e-12 * max(scale, 1.0):
            raise GaussianError(
                f"covariance not PSD: min eigenvalue {w.min()} below tolerance"
            )
        w = np.clip(w, 0.0, None)
        order = np.argsort(w)[::-1]
        w = w[order]
        V = V[:, order]
        keep = w > 1e-14 * max(scale, 1e-300)
        self.m = m
        self.Q = Q
        self._eigvals = w
        self._eigvecs = V
        self.L = V[:, keep] * np.sqrt(w[keep])
        self.rank = int(keep.sum())

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return self.rank < self.dim

    def density(self, y) -> float | np.ndarray:
        """Lebesgue density at y; raises NoDensityError for singular Q."""
        if self.rank < self.dim:
            raise NoDensityError("singular covariance: the measure has no density")
        y = np.asarray(y, dtype=float)
        d = y - self.m
        w, V = self._eigvals, self._eigvecs
        z = d @ V
        quad = np.sum(z * z / w, axis=-1)
        logdet = float(np.sum(np.log(w)))
        lognorm = -0.5 * (self.dim * math.log(2.0 * math.pi) + logdet)
        return np.exp(lognorm - 0.5 * quad)

    def fourier(self, h) -> complex | np.ndarray:
        """exp(i<m,h> - 0.5 <Qh,h>); h may be a single vector or a stack."""
        h = np.asarray(h, dtype=float)
        qh = h @ self.Q
        quad = np.sum(qh * h, axis=-1)
        phase = h @ self.m
        out = np.exp(1j * phase - 0.5 * quad)
        return complex(out) if out.ndim == 0 else out

    def convolve(self, other: "GaussianMeasure") -> "GaussianMeasure":
        if other.dim != self.dim:
            raise GaussianError(
                f"dimension mismatch in convolution: {self.dim} vs {other.dim}"
            )
        return GaussianMeasure(self.m + other.m, self.Q + other.Q)

    def sample(self, seed, count: int) -> np.ndarray:
        """count iid draws, x = m + Lz; deterministic for a given seed."""
        if count < 1:
            raise GaussianError("count must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        z = rng.standard_normal((count, self.rank))
        return self.m + z @ self.L.T

    def default_level(self, freq=None) -> int:
        """20 for smooth integrands, 40 for oscillatory ones (|h|*||L|| > 3)."""
        if freq is None:
            return SMOOTH_LEVEL
        fnorm = float(np.linalg.norm(np.asarray(freq, dtype=float)))
        lnorm = float(np.linalg.norm(self.L, ord=2)) if self.rank else 0.0
        return OSCILLATORY_LEVEL if fnorm * lnorm > 3.0 else SMOOTH_LEVEL

    def expectation(self, g, level: int | None = None):
        """Tensor Gauss-Hermite integral of g against the measure.

        g is evaluated vectorized on an (N, dim) array of points; exact for
        polynomials of degree <= 2*level - 1 per latent axis.
        """
        fn = _evaluator(g)
        if self.rank == 0:
            return np.asarray(fn(self.m[None, :]))[0]
        if level is None:
            level = self.default_level(getattr(g, "freq", None))
        rule = gauss_hermite_rule(level, self.rank)
        pts = self.m + rule.nodes @ self.L.T
        vals = np.asarray(fn(pts))
        return rule.weights @ vals

    def second_moment(self) -> float:
        """E|x|^2 = tr Q + |m|^2."""
        return float(np.trace(self.Q) + self.m @ self.m)

    def __repr__(self):
        return f"GaussianMeasure(m={self.m!r}, diagQ={np.diag(self.Q)!r})"
