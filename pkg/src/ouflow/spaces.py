"""Weighted space-time norms, pullback isomorphisms, and trace norms.

A SpaceTimeFunction is a time grid carrying one spatial test function per
node.  Norms integrate Gauss-Hermite spatial integrals against the canonical
measures with a composite Simpson rule in time; periodic windows divide by
the period so the space-time measure is a probability measure.

The pullback to-standard substitutes x -> Q^{1/2}(t,-inf) x + g(t,-inf)
nodewise (an L^2 isometry onto dt x N(0,I)); to-slice additionally recenters
on the canonical measure of a fixed slice.  Matrix square roots are
symmetric (eigendecomposition), matching the covariance square root
convention of the isomorphism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianMeasure

__all__ = [
    "SpaceTimeFunction",
    "NormSpec",
    "simpson_weights",
    "norm",
    "pullback",
    "trace_norm",
    "sym_sqrt",
    "sym_inv_sqrt",
]


def sym_sqrt(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def sym_inv_sqrt(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.min() <= 0:
        raise np.linalg.LinAlgError("rank-deficient covariance: no inverse square root")
    return (V / np.sqrt(w)) @ V.T


def simpson_weights(tgrid: np.ndarray) -> np.ndarray:
    """Composite Simpson weights on a uniform grid (3/8 tail when the
    interval count is odd); trapezoid for fewer than 3 nodes."""
    tgrid = np.asarray(tgrid, dtype=float)
    m = len(tgrid)
    if m < 2:
        raise ValueError("need at least two time nodes")
    h = np.diff(tgrid)
    if np.max(np.abs(h - h[0])) > 1e-9 * max(abs(h[0]), 1e-12):
        raise ValueError("composite Simpson weights require a uniform grid")
    h = float(h[0])
    w = np.zeros(m)
    if m == 2:
        w[:] = h / 2.0
        return w
    nint = m - 1
    end = m - 1
    if nint % 2 == 1:
        # 3/8 rule on the last three intervals
        w[m - 4:m] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
        end = m - 4
    if end >= 2:
        idx = np.arange(0, end + 1)
        ws = np.ones(end + 1)
        ws[1:-1:2] = 4.0
        ws[2:-1:2] = 2.0
        w[idx] += ws * h / 3.0
    return w


@dataclass(frozen=True)
class NormSpec:
    """Which norm: 'l2', 'h0k' (spatial order k), or 'h12'; quadrature level."""

    kind: str = "l2"
    k: int = 0
    level: int = 24

    def __post_init__(self):
        if self.kind not in ("l2", "h0k", "h12"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.level < 2:
            raise ValueError("quadrature level must be >= 2")
        if self.kind == "h0k" and self.k not in (1, 2):
            raise ValueError("h0k supports spatial orders 1 and 2")


class SpaceTimeFunction:
    """Time grid + per-node spatial functions, optional analytic d/dt."""

    def __init__(self, tgrid, nodes, periodic: bool = False, dt_eval=None,
                 timefun=None):
        self.tgrid = np.asarray(tgrid, dtype=float)
        if np.any(np.diff(self.tgrid) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if len(nodes) != len(self.tgrid):
            raise ValueError("one spatial function per time node required")
        self.nodes = list(nodes)
        self.periodic = bool(periodic)
        self.dt_eval = dt_eval
        self.timefun = timefun
        if self.periodic:
            x0 = np.zeros((1, self.dim))
            v0 = self.value(0, x0)
            v1 = self.value(len(self.tgrid) - 1, x0)
            if np.max(np.abs(v0 - v1)) > 1e-10 * max(1.0, np.max(np.abs(v0))):
                raise ValueError("periodic flag requires matching values at the window ends")

    @property
    def dim(self) -> int:
        return self.nodes[0].dim if hasattr(self.nodes[0], "dim") else 1

    @classmethod
    def from_trigexp(cls, tf, tgrid, periodic: bool = False):
        tgrid = np.asarray(tgrid, dtype=float)
        nodes = [tf.at(float(t)) for t in tgrid]

        def dt_eval(i, x, _tf=tf, _tg=tgrid):
            return _tf.dt_field(float(_tg[i])).value(x)

        return cls(tgrid, nodes, periodic=periodic, dt_eval=dt_eval, timefun=tf)

    def value(self, i: int, x):
        return self.nodes[i].value(x)

    def grad(self, i: int, x):
        return self.nodes[i].grad(x)

    def hess(self, i: int, x):
        return self.nodes[i].hess(x)

    def dt(self, i: int, x):
        """d/dt at node i: analytic when attached, else grid differences."""
        if self.dt_eval is not None:
            return self.dt_eval(i, x)
        return self.dt_grid(i, x)

    def dt_grid(self, i: int, x):
        """d/dt by second-order grid differences (periodic wrap when flagged)."""
        m = len(self.tgrid)
        h = self.tgrid[1] - self.tgrid[0]
        if self.periodic:
            ip = 1 if i == m - 1 else i + 1
            im = m - 2 if i == 0 else i - 1
            return (self.value(ip, x) - self.value(im, x)) / (2.0 * h)
        if 0 < i < m - 1:
            return (self.value(i + 1, x) - self.value(i - 1, x)) / (2.0 * h)
        if i == 0:
            return (-3.0 * self.value(0, x) + 4.0 * self.value(1, x)
                    - self.value(2, x)) / (2.0 * h)
        return (3.0 * self.value(m - 1, x) - 4.0 * self.value(m - 2, x)
                + self.value(m - 3, x)) / (2.0 * h)

    def at_time(self, t: float):
        if self.timefun is not None:
            return self.timefun.at(float(t))
        raise TypeError("no time-callable family attached to this function")


def _abs2(v):
    return (v * np.conj(v)).real


def norm(u: SpaceTimeFunction, spec: NormSpec, measures) -> float:
    """Weighted norm over the window; `measures` maps t -> GaussianMeasure.

    h12 = (||u||^2 + ||du/dt||^2 + || |D_x u| ||^2 + || D_x^2 u ||_F^2)^{1/2};
    h0k drops the time derivative; periodic windows divide by the period.
    """
    w = simpson_weights(u.tgrid)
    total = 0.0
    want_du = spec.kind == "h12" or (spec.kind == "h0k" and spec.k >= 1)
    want_d2 = spec.kind == "h12" or (spec.kind == "h0k" and spec.k >= 2)
    want_dt = spec.kind == "h12"
    for i, ti in enumerate(u.tgrid):
        mu: GaussianMeasure = measures(float(ti)) if callable(measures) else measures

        def integrand(x, _i=i):
            out = _abs2(u.value(_i, x))
            if want_du:
                gr = u.grad(_i, x)
                out = out + np.sum(_abs2(gr), axis=-1)
            if want_d2:
                hs = u.hess(_i, x)
                out = out + np.sum(_abs2(hs), axis=(-2, -1))
            if want_dt:
                out = out + _abs2(u.dt(_i, x))
            return out

        total += w[i] * float(mu.expectation(integrand, level=spec.level).real)
    if u.periodic:
        total /= (u.tgrid[-1] - u.tgrid[0])
    return math.sqrt(max(total, 0.0))


def pullback(u: SpaceTimeFunction, canonical, mode: str = "standard",
             t0: float | None = None) -> SpaceTimeFunction:
    """The affine change of variables behind the isomorphism to the standard
    (or fixed-slice) Gaussian space-time space, applied nodewise.

    to-standard: (Tu)(t,x) = u(t, Q^{1/2}(t,-inf) x + g(t,-inf));
    to-slice(t0): x is first recentred through the slice measure at t0.
    """
    mats, offs = [], []
    if mode == "slice":
        if t0 is None:
            raise ValueError("slice mode requires t0")
        mu0 = canonical(float(t0))
        R0 = sym_inv_sqrt(mu0.Q)
        g0 = mu0.m
    for ti in u.tgrid:
        mu = canonical(float(ti))
        S = sym_sqrt(mu.Q)
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise np.linalg.LinAlgError(f"rank-deficient Q(t,-inf) at t={ti}")
        if mode == "standard":
            mats.append(S)
            offs.append(mu.m)
        elif mode == "slice":
            M = S @ R0
            mats.append(M)
            offs.append(mu.m - M @ g0)
        else:
            raise ValueError(f"unknown pullback mode {mode!r}")
    nodes = [nd.affine(M, b) for nd, M, b in zip(u.nodes, mats, offs)]
    return SpaceTimeFunction(u.tgrid.copy(), nodes, periodic=u.periodic)


def trace_norm(phi, t0: float, measures, level: int = 24) -> float:
    """H^1 norm at a time slice: (||phi||^2 + || |D phi| ||^2)^{1/2} in L^2(nu_t0)."""
    mu: GaussianMeasure = measures(float(t0)) if callable(measures) else measures

    def integrand(x):
        out = _abs2(phi.value(x))
        gr = phi.grad(x)
        return out + np.sum(_abs2(gr), axis=-1)

    val = float(mu.expectation(integrand, level=level).real)
    return math.sqrt(max(val, 0.0))
