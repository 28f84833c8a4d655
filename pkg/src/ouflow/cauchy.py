"""Backward Cauchy problems u_s + L(s)u = h, u(T2) = phi, by variation of
constants, with the maximal-regularity ratio and the integral identities the
solver machinery is checked against.

The solution is assembled nodewise as

    u(s) = P_{s,T2} phi - int_s^{T2} P_{s,r} h(r,.) dr,

with the Duhamel integral discretized by composite Simpson on the solver
grid.  For class-closed data every node is a finite trig sum whose time
derivative has a closed form (termwise d/ds of the Mehler factors), so the
PDE residual can be evaluated either with that analytic derivative (a
consistency check of the term calculus) or with grid central differences
(the honest O(step^2) discretization residual).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import propagator, spaces
from .evolution_family import EvolutionCache, _compose
from .gaussian import GaussianMeasure
from .propagator import SpatialTrig, TrigExp, TrigSum, Poly, generator_apply
from .spaces import NormSpec, SpaceTimeFunction, simpson_weights, trace_norm

NODES_PER_UNIT = 200

__all__ = [
    "BackwardProblem",
    "UndefinedRatioError",
    "solve_backward",
    "residual",
    "regularity_ratio",
    "dissipativity_residual",
    "product_rule_pointwise",
    "product_rule_integrated",
    "commutator_residual",
    "gradient_energy_residual",
    "gradient_time_identity_residual",
]


class UndefinedRatioError(ZeroDivisionError):
    """Degenerate denominator in the regularity ratio."""


@dataclass
class BackwardProblem:
    """Window, terminal datum, forcing, and solver grid size.

    phi is a spatial test function (once differentiable); h is a space-time
    TrigExp or None.  nodes defaults to 200 per unit window.
    """

    t1: float
    t2: float
    phi: object
    h: TrigExp | None = None
    nodes: int | None = None

    def __post_init__(self):
        if not self.t2 > self.t1:
            raise ValueError("need T1 < T2")
        if self.nodes is None:
            self.nodes = max(int(round(NODES_PER_UNIT * (self.t2 - self.t1))) + 1, 9)
        if self.nodes < 3:
            raise ValueError("need at least 3 solver nodes")

    def grid(self) -> np.ndarray:
        return np.linspace(self.t1, self.t2, self.nodes)


class _TrigSolutionNode(TrigSum):
    """Trig sum with the closed-form d/ds of each Mehler term attached.

    Each term a e^{i<x, hhat>} solves d/ds T = -L(s) T, i.e.
    d/ds T = a e^{i<x,hhat>} (c0 + <c1, x>) with
    c0 = -i<f(s), hhat> + |B(s)^T hhat|^2 / 2 and c1 = -i A(s)^T hhat.
    The forcing h(s,.) enters the solution's derivative as a boundary term.
    """

    def __init__(self, amps, freqs, s, sys, forcing_field=None):
        super().__init__(amps, freqs)
        self.s = float(s)
        self.sys = sys
        self.forcing_field = forcing_field

    def ds_value(self, x):
        A, B, f = self.sys.eval(self.s)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ph = self._phases(x) * self.amps  # (N, m)
        c0 = -1j * (self.freqs @ f) + 0.5 * np.sum((self.freqs @ B) ** 2, axis=1)
        c1 = -1j * self.freqs @ A  # (m, n); <c1_j, x> = x @ c1_j
        out = ph @ c0 + np.sum((x @ c1.T) * ph, axis=1)
        if self.forcing_field is not None:
            out = out + self.forcing_field.value(x)
        return out


def solve_backward(cache: EvolutionCache, prob: BackwardProblem) -> SpaceTimeFunction:
    """Nodewise Duhamel solution; u(T2) = phi holds exactly by construction."""
    grid = prob.grid()
    m = len(grid)
    sys = cache.sys
    if isinstance(prob.phi, TrigExp):
        phi = prob.phi.at(prob.t2)
    else:
        phi = prob.phi
    if not isinstance(phi, SpatialTrig):
        raise TypeError("solve_backward handles trig-exponential data; "
                        "polynomial/black-box data go through propagator.apply")
    n = sys.dim
    h_nodes = None
    if prob.h is not None:
        h_nodes = [prob.h.at(float(r)) for r in grid]
        h_amps = np.array([hn.c for hn in h_nodes], dtype=complex)
        h_freqs = np.stack([hn.h for hn in h_nodes])

    # one-step factors once, then batched downward row recursion:
    # row i holds (U, g, Q)(r_j, s_i) for j = i..m-1.
    steps = [cache.segment(float(grid[j]), float(grid[j + 1])) for j in range(m - 1)]

    rowU = np.eye(n)[None, :, :]
    rowg = np.zeros((1, n))
    rowQ = np.zeros((1, n, n))
    rows = [None] * m

    def node_from_row(i, U, g, Q):
        amps, freqs = [], []
        if h_nodes is not None and m - i >= 2:
            w = simpson_weights(grid[i:])
            hs = h_freqs[i:]                     # (k, n)
            gh = np.einsum("kj,kj->k", g, hs)
            qh = np.einsum("kj,kjl,kl->k", hs, Q, hs)
            amps.append(-w * h_amps[i:] * np.exp(1j * gh - 0.5 * qh))
            freqs.append(np.einsum("kji,kj->ki", U, hs))
        Ue, ge, Qe = U[-1], g[-1], Q[-1]
        amp = phi.c * np.exp(1j * float(ge @ phi.h) - 0.5 * float(phi.h @ Qe @ phi.h))
        amps.append(np.array([amp]))
        freqs.append((Ue.T @ phi.h)[None, :])
        forcing = h_nodes[i] if h_nodes is not None else None
        return _TrigSolutionNode(np.concatenate(amps), np.concatenate(freqs),
                                 grid[i], sys, forcing_field=forcing)

    rows[m - 1] = node_from_row(m - 1, rowU, rowg, rowQ)
    for i in range(m - 2, -1, -1):
        Us, gs, Qs = steps[i]
        rowg = np.einsum("kij,j->ki", rowU, gs) + rowg
        rowQ = np.einsum("kij,jl,kml->kim", rowU, Qs, rowU) + rowQ
        rowU = rowU @ Us
        rowU = np.concatenate([np.eye(n)[None, :, :], rowU])
        rowg = np.concatenate([np.zeros((1, n)), rowg])
        rowQ = np.concatenate([np.zeros((1, n, n)), rowQ])
        rows[i] = node_from_row(i, rowU, rowg, rowQ)

    def dt_eval(i, x, _nodes=rows):
        return _nodes[i].ds_value(x)

    return SpaceTimeFunction(grid, rows, periodic=False, dt_eval=dt_eval)


def residual(u: SpaceTimeFunction, prob: BackwardProblem, sys, measures,
             level: int = 24, use_analytic: bool = True) -> float:
    """L^2(nu)-norm over the window of du/ds + L(s)u - h.

    use_analytic=False replaces the attached time derivative by grid central
    differences, exposing the O(step^2) discretization residual.
    """
    w = simpson_weights(u.tgrid)
    total = 0.0
    for i, si in enumerate(u.tgrid):
        mu: GaussianMeasure = measures(float(si)) if callable(measures) else measures
        lu = generator_apply(sys, float(si), u.nodes[i])
        hterm = prob.h.at(float(si)) if prob.h is not None else None

        def integrand(x, _i=i, _lu=lu, _h=hterm):
            if use_analytic and u.dt_eval is not None:
                dt = u.dt_eval(_i, x)
            else:
                dt = u.dt_grid(_i, x)
            r = dt + (_lu.value(x) if hasattr(_lu, "value") else _lu(x))
            if _h is not None:
                r = r - _h.value(x)
            return (r * np.conj(r)).real

        total += w[i] * float(mu.expectation(integrand, level=level).real)
    return math.sqrt(max(total, 0.0))


def regularity_ratio(u: SpaceTimeFunction, prob: BackwardProblem, measures,
                     level: int = 24) -> float:
    """||u||_{H^{1,2}(nu)} / (||h||_{L^2(nu)} + ||phi||_{H^1(nu_T2)})."""
    num = spaces.norm(u, NormSpec("h12", level=level), measures)
    den = 0.0
    if prob.h is not None:
        hfun = SpaceTimeFunction.from_trigexp(prob.h, u.tgrid)
        den += spaces.norm(hfun, NormSpec("l2", level=level), measures)
    phi = prob.phi.at(prob.t2) if isinstance(prob.phi, TrigExp) else prob.phi
    den += trace_norm(phi, prob.t2, measures, level=level)
    if den < 1e-14:
        raise UndefinedRatioError("regularity ratio undefined: zero data")
    return num / den


# ---------------------------------------------------------------------------
# identity suite
# ---------------------------------------------------------------------------

def _g_field(sys, u: TrigExp, t: float):
    """G u(t,.) = du/dt + L(t)u as a pointwise complex evaluator."""
    dt_part = u.dt_field(t)
    l_part = generator_apply(sys, t, u.at(t))

    def value(x):
        return dt_part.value(x) + l_part.value(x)

    return value


def dissipativity_residual(sys, canonical, u: TrigExp, t1: float, t2: float,
                           nt: int = 801, level: int = 30,
                           periodic: bool = False) -> float:
    """| int u Gu dnu + (1/2) int |B^T D_x u|^2 dnu | for real u = Re(core).

    Needs vanishing time boundary terms: a T-periodic core over one period,
    or a core whose amplitude vanishes at the window ends.
    """
    grid = np.linspace(t1, t2, nt)
    w = simpson_weights(grid)
    I1 = 0.0
    I2 = 0.0
    for wi, ti in zip(w, grid):
        mu = canonical(float(ti))
        gu = _g_field(sys, u, float(ti))
        trig = u.at(float(ti))
        _, B, _ = sys.eval(float(ti))

        def f1(x):
            return np.real(trig.value(x)) * np.real(gu(x))

        def f2(x):
            du = np.real(trig.grad(x))      # (N, n)
            bdu = du @ B                    # rows (B^T du)^T
            return np.sum(bdu * bdu, axis=1)

        I1 += wi * float(mu.expectation(f1, level=level).real)
        I2 += wi * float(mu.expectation(f2, level=level).real)
    scale = (t2 - t1) if periodic else 1.0
    return abs(I1 + 0.5 * I2) / scale


def product_rule_pointwise(sys, g: TrigExp, h: TrigExp, t: float, x) -> float:
    """max | G(gh) - g Gh - h Gg - <B^T Dg, B^T Dh> | at the sample points.

    Complex cores with the bilinear pairing; the identity is algebraic, so
    the residual is floating-point noise.
    """
    gh = TrigExp(
        Phi=lambda s: g.Phi(s) * h.Phi(s),
        dPhi=lambda s: g.dPhi(s) * h.Phi(s) + g.Phi(s) * h.dPhi(s),
        h=lambda s: np.asarray(g.h(s), dtype=float) + np.asarray(h.h(s), dtype=float),
        dh=lambda s: np.asarray(g.dh(s), dtype=float) + np.asarray(h.dh(s), dtype=float),
        dim=g.dim,
    )
    _, B, _ = sys.eval(t)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lhs = _g_field(sys, gh, t)(x)
    gv = g.at(t).value(x)
    hv = h.at(t).value(x)
    ggv = _g_field(sys, g, t)(x)
    ghv = _g_field(sys, h, t)(x)
    dg = g.at(t).grad(x) @ B
    dh_ = h.at(t).grad(x) @ B
    cross = np.sum(dg * dh_, axis=1)
    res = lhs - gv * ghv - hv * ggv - cross
    return float(np.max(np.abs(res)))


def product_rule_integrated(sys, canonical, g: TrigExp, h: TrigExp, t1: float,
                            t2: float, nt: int = 801, level: int = 30,
                            periodic: bool = False) -> float:
    """| int g Gh dnu + int h Gg dnu + int <B^T Dg, B^T Dh> dnu | on real parts."""
    grid = np.linspace(t1, t2, nt)
    w = simpson_weights(grid)
    total = 0.0
    for wi, ti in zip(w, grid):
        mu = canonical(float(ti))
        gugh = _g_field(sys, h, float(ti))
        gugg = _g_field(sys, g, float(ti))
        gtrig = g.at(float(ti))
        htrig = h.at(float(ti))
        _, B, _ = sys.eval(float(ti))

        def f(x):
            gv = np.real(gtrig.value(x))
            hv = np.real(htrig.value(x))
            term = gv * np.real(gugh(x)) + hv * np.real(gugg(x))
            cross = np.sum((np.real(gtrig.grad(x)) @ B) * (np.real(htrig.grad(x)) @ B), axis=1)
            return term + cross

        total += wi * float(mu.expectation(f, level=level).real)
    scale = (t2 - t1) if periodic else 1.0
    return abs(total) / scale


def commutator_residual(cache: EvolutionCache, t2: float, phi: Poly, ss, xs) -> float:
    """Fieldwise check of [L(s), D] P_{s,t2} phi = -A(s)^T U(t2,s)^T P_{s,t2} D phi.

    The left side is computed operationally (L of the derivative minus the
    derivative of L) on the exact polynomial field; the right side through
    the gradient identity.  Polynomial phi only.
    """
    sys = cache.sys
    n = sys.dim
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    worst = 0.0
    for s in ss:
        s = float(s)
        A, _, _ = sys.eval(s)
        p = propagator.propagate_poly(cache, s, t2, phi)
        lp = generator_apply(sys, s, p)
        pg = [propagator.propagate_poly(cache, s, t2, phi.deriv(m))
              for m in range(n)]
        U = cache.segment(s, t2)[0]
        for j in range(n):
            lhs = generator_apply(sys, s, p.deriv(j)) - lp.deriv(j)
            # (-A^T U^T P grad phi)_j = -sum_d A[d,j] sum_m U[m,d] P(d_m phi)
            rhs = Poly(n)
            for d in range(n):
                for mm in range(n):
                    rhs = rhs + (-A[d, j] * U[mm, d]) * pg[mm]
            worst = max(worst, float(np.max(np.abs(lhs.value(xs) - rhs.value(xs)))))
    return worst


def gradient_energy_residual(cache: EvolutionCache, canonical, t1: float,
                             t2: float, phi: Poly, nt: int = 201,
                             level: int = 12):
    """Two-sided quadrature of the gradient energy identity.

    ||D phi||^2_{nu_t2} - ||D P_{t1,t2} phi||^2_{nu_t1}
      = int_{t1}^{t2} int ( |B^T D^2 P_{s,t2} phi|_F^2
                            - 2 <A(s) D P phi, D P phi> ) dnu_s ds.

    Returns (lhs, rhs, |lhs - rhs|).
    """
    sys = cache.sys
    n = sys.dim

    def grad_sq(poly_, mu):
        def f(x):
            gr = poly_.grad(x)
            return np.sum((gr * np.conj(gr)).real, axis=-1)
        return float(mu.expectation(f, level=level).real)

    mu2 = canonical(float(t2))
    mu1 = canonical(float(t1))
    u1 = propagator.propagate_poly(cache, float(t1), float(t2), phi)
    lhs = grad_sq(phi, mu2) - grad_sq(u1, mu1)

    grid = np.linspace(t1, t2, nt)
    w = simpson_weights(grid)
    rhs = 0.0
    for wi, si in zip(w, grid):
        si = float(si)
        A, B, _ = sys.eval(si)
        us = propagator.propagate_poly(cache, si, t2, phi)
        mu = canonical(si)

        def f(x):
            hs = us.hess(x).real        # (N, n, n)
            bh = np.einsum("ki,nkj->nij", B, hs)
            frob = np.sum(bh * bh, axis=(-2, -1))
            gr = us.grad(x).real        # (N, n)
            agg = gr @ A.T
            return frob - 2.0 * np.sum(agg * gr, axis=-1)

        rhs += wi * float(mu.expectation(f, level=level).real)
    return lhs, rhs, abs(lhs - rhs)


def gradient_time_identity_residual(cache: EvolutionCache, canonical, s: float,
                                    phi: Poly, dt: float = 1e-4,
                                    level: int = 12) -> float:
    """| int |D psi|^2 d/ds rho dx - 2 int <L(s) D psi, D psi> dnu_s
       - int |B^T D^2 psi|_F^2 dnu_s | for polynomial psi.

    The density derivative is a symmetric difference of the canonical
    measures, as in the generator-vs-density identity.
    """
    sys = cache.sys
    n = sys.dim
    _, B, _ = sys.eval(float(s))

    def dsq(x, _p=phi):
        gr = _p.grad(x).real
        return np.sum(gr * gr, axis=-1)

    lhs = (canonical(float(s) + dt).expectation(dsq, level=level)
           - canonical(float(s) - dt).expectation(dsq, level=level)) / (2.0 * dt)

    mu = canonical(float(s))
    grads = [phi.deriv(i) for i in range(n)]
    lgrads = [generator_apply(sys, float(s), gi) for gi in grads]

    def f(x):
        term = np.zeros(np.atleast_2d(x).shape[0])
        for gi, lgi in zip(grads, lgrads):
            term = term + (lgi.value(x) * np.conj(gi.value(x))).real
        hs = phi.hess(x).real
        bh = np.einsum("ki,nkj->nij", B, hs)
        return 2.0 * term + np.sum(bh * bh, axis=(-2, -1))

    rhs = float(mu.expectation(f, level=level).real)
    return abs(float(np.real(lhs)) - rhs)
