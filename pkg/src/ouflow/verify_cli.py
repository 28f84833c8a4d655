"""Verification suite and command-line entry point.

Checks are registered in a name -> callable table closing over a shared
context (system, evolution cache, canonical measures, per-check rng
streams).  A failing check never aborts the run; it is recorded and the
exit code reflects the aggregate.  All randomized checks draw their seeds
from the single config seed through a fixed splitting scheme, so a config
plus seed reproduces the report CSV byte for byte (timing lives only in the
plain-text report).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys as _sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cauchy, evolution_family, measures, moments, propagator, sde_oracle, spaces
from .coeffs import (CoefficientError, CoefficientSystem, autonomous_benchmark,
                     check_hypotheses, periodic_benchmark, system_from_dict)
from .gaussian import GaussianMeasure
from .propagator import BlackBox, Poly, SpatialTrig, TrigExp, harmonic_trigexp

__all__ = ["SuiteConfig", "CheckResult", "Report", "run_suite",
           "fit_smoothing_exponent", "main", "CHECKS"]


# ---------------------------------------------------------------------------
# suite plumbing
# ---------------------------------------------------------------------------

@dataclass
class SuiteConfig:
    system: dict
    checks: list | None = None
    tolerances: dict = field(default_factory=dict)
    seed: int = 20240
    outdir: Path = Path("out")
    window: tuple | None = None
    h_step: float | None = None
    workers: int = 1
    figures: bool = True
    raw_text: str = ""

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SuiteConfig":
        cfg = json.loads(text)
        suite = cfg.get("suite", {})
        kw = dict(
            system={k: v for k, v in cfg.items() if k != "suite"},
            checks=suite.get("checks"),
            tolerances=suite.get("tolerances", {}),
            seed=int(suite.get("seed", 20240)),
            window=tuple(suite.get("window")) if suite.get("window") else None,
            h_step=suite.get("h"),
            workers=int(suite.get("workers", 1)),
            raw_text=text,
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    runtime: float
    details: str = ""


@dataclass
class Report:
    results: list
    environment: str
    config_hash: str

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"environment: {self.environment}",
                 f"config_hash: {self.config_hash}", ""]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name}: value={r.value:.6g} tol={r.tolerance:.6g} "
                         f"{status} ({r.runtime:.2f}s){'  ' + r.details if r.details else ''}")
        lines.append("")
        lines.append(f"overall: {'PASS' if self.all_passed else 'FAIL'}")
        return "\n".join(lines)

    def csv_rows(self):
        yield "name,value,tolerance,passed"
        for r in self.results:
            yield f"{r.name},{float(r.value)!r},{float(r.tolerance)!r},{int(r.passed)}"


class _Context:
    """Lazily built shared state for the checks."""

    def __init__(self, cfg: SuiteConfig):
        self.cfg = cfg
        self.sys = system_from_dict(cfg.system)
        self._cache = None
        self._canonical = None
        self._growth = None
        names = sorted(CHECKS)
        ss = np.random.SeedSequence(cfg.seed)
        children = ss.spawn(len(names))
        self._seeds = {n: c for n, c in zip(names, children)}

    @property
    def window(self):
        return self.cfg.window or (-42.0, 14.0)

    @property
    def cache(self):
        if self._cache is None:
            self._cache = evolution_family.build_cache(self.sys, self.window,
                                                       self.cfg.h_step)
            evolution_family.estimate_growth_bound(self._cache)
        return self._cache

    @property
    def canonical(self):
        if self._canonical is None:
            self._canonical = measures.CanonicalMeasures(self.cache, tol=1e-10)
        return self._canonical

    @property
    def growth(self):
        return evolution_family.estimate_growth_bound(self.cache)

    def rng(self, check: str) -> np.random.Generator:
        return np.random.default_rng(self._seeds[check])

    def seed_int(self, check: str) -> int:
        return int(self._seeds[check].generate_state(1)[0])

    def tol(self, check: str, default: float) -> float:
        return float(self.cfg.tolerances.get(check, default))

    def probe_window(self):
        """Sub-window with limit-moment headroom on the left."""
        lo, hi = self.window
        return (lo + 34.0, hi - 1.0)


def _result(name, value, tol, passed, details=""):
    return dict(name=name, value=float(value), tolerance=float(tol),
                passed=bool(passed), details=details)


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def _check_hypotheses(ctx: _Context):
    rep = check_hypotheses(ctx.sys, ctx.window, cache=ctx.cache)
    tol = ctx.tol("hypotheses", 0.0)
    return _result("hypotheses", rep.omega0_estimate, tol,
                   rep.all_ok and rep.omega0_estimate < tol,
                   details=f"mu0={rep.mu0:.4g} M={rep.M_estimate:.4g}")


def _check_closed_form_benchmark(ctx: _Context):
    sysb = autonomous_benchmark()
    cache = evolution_family.build_cache(sysb, (-30.0, 6.0), 1e-3)
    evolution_family.estimate_growth_bound(cache)
    can = measures.CanonicalMeasures(cache, tol=1e-11)
    errs = []
    for tau in (0.5, 1.0, 3.0):
        U, g, Q = cache.segment(0.0, tau)
        errs.append(abs(U[0, 0] - math.exp(-tau)))
        errs.append(abs(g[0]))
        errs.append(abs(Q[0, 0] - (1.0 - math.exp(-2.0 * tau))))
    for t in (-1.0, 0.0, 2.5):
        mu = can(t)
        errs.append(abs(mu.m[0]))
        errs.append(abs(mu.Q[0, 0] - 1.0))
    x = Poly.from_univariate([0.0, 1.0])
    x2 = Poly.from_univariate([0.0, 0.0, 1.0])
    tau = 1.0
    p1 = propagator.propagate_poly(cache, 0.0, tau, x)
    p2 = propagator.propagate_poly(cache, 0.0, tau, x2)
    e = math.exp(-tau)
    errs.append(abs(p1.coeffs.get((1,), 0.0) - e))
    errs.append(abs(p1.coeffs.get((0,), 0.0)))
    errs.append(abs(p2.coeffs.get((2,), 0.0) - e * e))
    errs.append(abs(p2.coeffs.get((0,), 0.0) - (1.0 - e * e)))
    value = max(float(np.real(v)) for v in errs)
    tol = ctx.tol("closed-form-benchmark", 1e-8)
    return _result("closed-form-benchmark", value, tol, value <= tol)


def _check_evolution_law(ctx: _Context):
    rng = ctx.rng("evolution-law")
    lo, hi = ctx.probe_window()
    worst = 0.0
    n = ctx.sys.dim
    for _ in range(10):
        a, b, c = np.sort(rng.uniform(lo, hi, size=3))
        h = rng.normal(size=n)
        phi = SpatialTrig(1.0 + 0.0j, h)
        one = propagator.apply_exact_trigexp(ctx.cache, a, c, phi)
        mid = propagator.apply_exact_trigexp(ctx.cache, b, c, phi)
        two = propagator.apply_exact_trigexp(ctx.cache, a, b, mid)
        xs = rng.normal(size=(6, n))
        worst = max(worst, float(np.max(np.abs(one.value(xs) - two.value(xs)))))
    tol = ctx.tol("evolution-law", 1e-10)
    return _result("evolution-law", worst, tol, worst <= tol)


def _check_flow_decomposition(ctx: _Context):
    rng = ctx.rng("flow-decomposition")
    lo, hi = ctx.probe_window()
    worst = 0.0
    for _ in range(10):
        s, r, t = np.sort(rng.uniform(lo, hi, size=3))
        Uts, gts, Qts = ctx.cache.segment(s, t)
        Utr, gtr, Qtr = ctx.cache.segment(r, t)
        Urs, grs, Qrs = ctx.cache.segment(s, r)
        worst = max(worst, float(np.max(np.abs(Qts - (Utr @ Qrs @ Utr.T + Qtr)))))
        worst = max(worst, float(np.max(np.abs(gts - (Utr @ grs + gtr)))))
    tol = ctx.tol("flow-decomposition", 1e-9)
    return _result("flow-decomposition", worst, tol, worst <= tol)


def _invariance_worst(ctx, fam, rng, npairs, nfreq):
    lo, hi = ctx.probe_window()
    worst = 0.0
    for _ in range(npairs):
        s, t = np.sort(rng.uniform(lo, hi, size=2))
        hs = rng.uniform(-2.5, 2.5, size=(nfreq, ctx.sys.dim))
        worst = max(worst, measures.invariance_residual(fam, s, t, hs))
    return worst


def _check_fourier_identity(ctx: _Context):
    fam = measures.canonical_family(ctx.canonical)
    worst = _invariance_worst(ctx, fam, ctx.rng("fourier-identity"), 30, 30)
    tol = ctx.tol("fourier-identity", 1e-8)
    return _result("fourier-identity", worst, tol, worst <= tol)


def _check_from_base_invariance(ctx: _Context):
    lo, hi = ctx.probe_window()
    t0 = 0.5 * (lo + hi)
    base = measures.PointMass(np.full(ctx.sys.dim, 0.7))
    fam = measures.from_base_family(ctx.canonical, t0, base)
    rng = ctx.rng("from-base-invariance")
    worst = 0.0
    for _ in range(30):
        s, t = np.sort(rng.uniform(t0 - 4.0, t0 + 4.0, size=2))
        hs = rng.uniform(-2.5, 2.5, size=(30, ctx.sys.dim))
        worst = max(worst, measures.invariance_residual(fam, s, t, hs))
    tol = ctx.tol("from-base-invariance", 1e-8)
    return _result("from-base-invariance", worst, tol, worst <= tol)


def _check_perturbed_detector(ctx: _Context):
    fam = measures.MeasureFamily(ctx.canonical, kind="canonical", cov_scale=1.1)
    worst = _invariance_worst(ctx, fam, ctx.rng("perturbed-detector"), 10, 10)
    tol = ctx.tol("perturbed-detector", 1e-3)
    return _result("perturbed-detector", worst, tol, worst > tol,
                   details="detector must fire: residual above tolerance")


def _check_qinv_shape(ctx: _Context):
    lo, hi = ctx.probe_window()
    t = hi - 1.0
    gaps = np.geomspace(1e-4, 1e-2, 9)
    vals = np.array([moments.qinv_sqrt_norm(ctx.cache, t - g, t) for g in gaps])
    slope = np.polyfit(np.log(gaps), np.log(vals), 1)[0]
    big = np.linspace(1.0, 10.0, 10)
    bvals = np.array([moments.qinv_sqrt_norm(ctx.cache, t - g, t) for g in big])
    variation = float(bvals.max() / bvals.min() - 1.0)
    # the 10% plateau figure is calibrated to the autonomous benchmark;
    # general systems get a loose boundedness default, tighten via tolerances
    var_tol = float(ctx.cfg.tolerances.get("qinv-variation", 0.5))
    ok = abs(slope + 0.5) <= 0.05 and variation < var_tol
    return _result("qinv-shape", slope, -0.5,
                   ok, details=f"large-gap variation={variation:.3%} (tol {var_tol:.0%})")


def _check_semigroup_law(ctx: _Context):
    rng = ctx.rng("semigroup-law")
    lo, hi = ctx.probe_window()
    tf = harmonic_trigexp(amp=1.0, omega=0.7, h0=0.9, h1=0.3, dim=ctx.sys.dim)
    tgrid = np.linspace(lo, lo + 1.0, 9)
    u = spaces.SpaceTimeFunction.from_trigexp(tf, tgrid)
    tau1, tau2 = 0.4, 0.9
    one = propagator.semigroup_apply(ctx.cache, tau1 + tau2, u)
    part = propagator.semigroup_apply(ctx.cache, tau2, u)
    two = propagator.semigroup_apply(ctx.cache, tau1, part)
    xs = rng.normal(size=(8, ctx.sys.dim))
    worst = 0.0
    for i in range(len(tgrid)):
        worst = max(worst, float(np.max(np.abs(one.value(i, xs) - two.value(i, xs)))))
    tol = ctx.tol("semigroup-law", 1e-10)
    return _result("semigroup-law", worst, tol, worst <= tol)


def _check_periodic_contraction(ctx: _Context):
    if ctx.sys.period is None:
        return _result("periodic-contraction", 0.0, 1e-9, True,
                       details="skipped: system not periodic")
    T = ctx.sys.period
    lo, hi = ctx.probe_window()
    t1 = lo + 1.0
    tgrid = np.linspace(t1, t1 + T, 65)
    rng = ctx.rng("periodic-contraction")
    worst = -1.0
    for _ in range(4):
        om = rng.integers(1, 3) * 2.0 * math.pi / T
        tf = harmonic_trigexp(amp=1.0, omega=om, h0=float(rng.uniform(0.3, 1.0)),
                              h1=0.4, hfreq=2.0 * math.pi / T, dim=ctx.sys.dim)
        u = spaces.SpaceTimeFunction.from_trigexp(tf, tgrid, periodic=True)
        pu = propagator.semigroup_apply(ctx.cache, float(rng.uniform(0.2, 1.5)), u,
                                        periodic=True)
        n0 = spaces.norm(u, spaces.NormSpec("l2", level=32), ctx.canonical)
        n1 = spaces.norm(pu, spaces.NormSpec("l2", level=32), ctx.canonical)
        worst = max(worst, n1 / n0 - 1.0)
    tol = ctx.tol("periodic-contraction", 1e-9)
    return _result("periodic-contraction", worst, tol, worst <= tol,
                   details="norm growth of the periodic evolution semigroup")


def _bump_trigexp(t1, t2, omega, h0, h1, dim=1):
    """Core with amplitude vanishing at the window ends (sin^2 bump)."""
    w = math.pi / (t2 - t1)

    def Phi(t):
        return (math.sin(w * (t - t1)) ** 2) * np.exp(1j * omega * t)

    def dPhi(t):
        s, c = math.sin(w * (t - t1)), math.cos(w * (t - t1))
        return (2.0 * w * s * c + 1j * omega * s * s) * np.exp(1j * omega * t)

    def h(t):
        return np.full(dim, h0 + h1 * math.sin(t))

    def dh(t):
        return np.full(dim, h1 * math.cos(t))

    return TrigExp(Phi, dPhi, h, dh, dim=dim)


def _identity_cores(ctx):
    if ctx.sys.period is not None:
        T = ctx.sys.period
        lo, hi = ctx.probe_window()
        t1 = lo + 1.0
        om = 2.0 * math.pi / T
        g = harmonic_trigexp(amp=1.0, omega=om, h0=0.8, h1=0.3, hfreq=om, dim=ctx.sys.dim)
        h = harmonic_trigexp(amp=0.7, omega=2 * om, h0=-0.5, h1=0.2, hfreq=om, dim=ctx.sys.dim)
        return g, h, t1, t1 + T, True
    lo, hi = ctx.probe_window()
    t1, t2 = lo + 0.5, lo + 3.5
    g = _bump_trigexp(t1, t2, 0.8, 0.9, 0.2, ctx.sys.dim)
    h = _bump_trigexp(t1, t2, 1.3, -0.6, 0.3, ctx.sys.dim)
    return g, h, t1, t2, False


def _check_identity_dissipativity(ctx: _Context):
    g, _, t1, t2, per = _identity_cores(ctx)
    val = cauchy.dissipativity_residual(ctx.sys, ctx.canonical, g, t1, t2,
                                        nt=801, level=30, periodic=per)
    tol = ctx.tol("identity-dissipativity", 1e-7)
    return _result("identity-dissipativity", val, tol, val <= tol)


def _check_identity_formula1(ctx: _Context):
    g, h, t1, t2, _ = _identity_cores(ctx)
    rng = ctx.rng("identity-formula1")
    xs = rng.normal(size=(12, ctx.sys.dim))
    worst = 0.0
    for t in np.linspace(t1, t2, 7):
        worst = max(worst, cauchy.product_rule_pointwise(ctx.sys, g, h, float(t), xs))
    tol = ctx.tol("identity-formula1", 1e-9)
    return _result("identity-formula1", worst, tol, worst <= tol)


def _check_identity_formula2(ctx: _Context):
    g, h, t1, t2, per = _identity_cores(ctx)
    val = cauchy.product_rule_integrated(ctx.sys, ctx.canonical, g, h, t1, t2,
                                         nt=801, level=30, periodic=per)
    tol = ctx.tol("identity-formula2", 1e-7)
    return _result("identity-formula2", val, tol, val <= tol)


def _check_identity_commutator(ctx: _Context):
    rng = ctx.rng("identity-commutator")
    lo, hi = ctx.probe_window()
    t2 = hi - 1.5
    phi = _random_poly(rng, ctx.sys.dim, degree=4)
    ss = np.linspace(t2 - 2.0, t2 - 0.1, 5)
    xs = rng.normal(size=(10, ctx.sys.dim))
    val = cauchy.commutator_residual(ctx.cache, t2, phi, ss, xs)
    tol = ctx.tol("identity-commutator", 1e-8)
    return _result("identity-commutator", val, tol, val <= tol)


def _check_identity_invop(ctx: _Context):
    lo, hi = ctx.probe_window()
    s = 0.5 * (lo + hi)
    phi = Poly.from_univariate([0.0, 0.0, 1.0], dim=ctx.sys.dim)
    val = measures.invop_residual(ctx.sys, ctx.cache, ctx.canonical, s, phi,
                                  level=24, dt=1e-4)
    tol = ctx.tol("identity-invop", 5e-6)
    return _result("identity-invop", val, tol, val <= tol)


def _check_identity_gradient_energy(ctx: _Context):
    lo, hi = ctx.probe_window()
    t2 = hi - 1.5
    t1 = t2 - 1.5
    phi = Poly.from_univariate([0.0, 0.5, 1.0, 0.0, 0.25], dim=ctx.sys.dim)
    _, _, val = cauchy.gradient_energy_residual(ctx.cache, ctx.canonical, t1, t2,
                                                phi, nt=201, level=12)
    tol = ctx.tol("identity-gradient-energy", 1e-5)
    return _result("identity-gradient-energy", val, tol, val <= tol)


def _check_smoothing_small(ctx: _Context, order: int):
    name = f"smoothing-small-{order}"
    rng_lo, rng_hi = (0.06, 0.5) if order == 1 else (0.085, 0.25)
    lo, hi = ctx.probe_window()
    s0 = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
    alpha = (order,) + (0,) * (ctx.sys.dim - 1)
    slope, _, r2, _ = fit_smoothing_exponent(
        ctx.cache, ctx.canonical, alpha, (rng_lo, rng_hi), points=7,
        mode="small", degree=12, s0=s0)
    target, width = (-0.5, 0.1) if order == 1 else (-1.0, 0.15)
    ok = abs(slope - target) <= width
    return _result(name, slope, target, ok, details=f"r2={r2:.4f}")


def _check_smoothing_large(ctx: _Context):
    lo, hi = ctx.probe_window()
    alpha = (1,) + (0,) * (ctx.sys.dim - 1)
    rate, _, r2, _ = fit_smoothing_exponent(
        ctx.cache, ctx.canonical, alpha, (1.0, 8.0), points=8,
        mode="large", degree=12, s0=lo + 2.0)
    _, omega = ctx.growth
    tol = omega * 1 + 0.1
    return _result("smoothing-large", rate, tol, rate <= tol,
                   details=f"omega={omega:.4g} r2={r2:.4f}")


def _check_mehler_vs_mc(ctx: _Context):
    rng = ctx.rng("mehler-vs-mc")
    k = int(ctx.cfg.tolerances.get("mc-paths", 30000))
    dt = float(ctx.cfg.tolerances.get("mc-dt", 1e-3))
    npts = int(ctx.cfg.tolerances.get("mc-points", 3))
    lo, hi = ctx.probe_window()
    phi = BlackBox(lambda x: np.tanh(x[:, 0]))
    bias_c = _fit_euler_bias(ctx, phi, rng)
    worst = -math.inf
    details = []
    for _ in range(npts):
        s = rng.uniform(lo + 1.0, hi - 2.0)
        gap = rng.uniform(0.3, 0.8)
        x = np.full(ctx.sys.dim, rng.uniform(-1.0, 1.0))
        t = s + gap
        quad = float(np.real(propagator.apply(ctx.cache, s, t, phi, level=40)(x[None, :])[0]))
        mean, stderr = sde_oracle.mc_expectation(ctx.sys, s, t, x, phi, k, dt,
                                                 ctx.seed_int("mehler-vs-mc"))
        allowance = 3.0 * stderr + bias_c * dt
        excess = abs(float(np.real(mean)) - quad) - allowance
        worst = max(worst, excess)
        details.append(f"{excess:.2e}")
    return _result("mehler-vs-mc", worst, 0.0, worst <= 0.0,
                   details="excess over 3*stderr+bias: " + " ".join(details))


def _fit_euler_bias(ctx: _Context, phi, rng) -> float:
    """Slope of |MC - quadrature| against dt on coarse steps (weak order 1)."""
    lo, hi = ctx.probe_window()
    s = lo + 2.0
    t = s + 1.0
    x = np.full(ctx.sys.dim, 0.5)
    quad = float(np.real(propagator.apply(ctx.cache, s, t, phi, level=40)(x[None, :])[0]))
    dts = [1e-1, 5e-2, 2.5e-2]
    num = 0.0
    den = 0.0
    for j, d in enumerate(dts):
        mean, _ = sde_oracle.mc_expectation(ctx.sys, s, t, x, phi, 200000, d,
                                            ctx.seed_int("mehler-vs-mc") + 7 + j)
        b = abs(float(np.real(mean)) - quad)
        num += b * d
        den += d * d
    return num / den


def _check_maxreg(ctx: _Context):
    rng = ctx.rng("maxreg")
    lo, hi = ctx.probe_window()
    t2 = hi - 2.0
    t1 = t2 - 1.0
    nprob = int(ctx.cfg.tolerances.get("maxreg-problems", 8))
    res_tol = ctx.tol("maxreg", 1e-5)
    worst_res = 0.0
    ratios_fine, ratios_coarse = [], []
    for _ in range(nprob):
        phi, h = _random_problem_data(rng, ctx.sys.dim)
        for nodes, bag in ((201, ratios_fine), (101, ratios_coarse)):
            prob = cauchy.BackwardProblem(t1, t2, phi, h, nodes=nodes)
            u = cauchy.solve_backward(ctx.cache, prob)
            if nodes == 201:
                r = cauchy.residual(u, prob, ctx.sys, ctx.canonical, level=20,
                                    use_analytic=False)
                worst_res = max(worst_res, r)
            bag.append(cauchy.regularity_ratio(u, prob, ctx.canonical, level=16))
    change = abs(max(ratios_fine) - max(ratios_coarse)) / max(ratios_fine)
    ok = worst_res <= res_tol and change <= 0.10
    return _result("maxreg", worst_res, res_tol, ok,
                   details=f"max ratio={max(ratios_fine):.4g} grid change={change:.2%}")


def _check_convergence_rate(ctx: _Context):
    lo, hi = ctx.probe_window()
    t = 0.5 * (lo + hi)
    base = measures.PointMass(np.ones(ctx.sys.dim))
    phi = SpatialTrig(1.0 + 0.0j, np.ones(ctx.sys.dim))
    s_list = t - np.linspace(2.0, 8.0, 7)
    _, rate = measures.convergence_experiment(ctx.cache, ctx.canonical, base, t,
                                              s_list, phi, level=24)
    _, omega = ctx.growth
    tol = 0.9 * omega
    return _result("convergence-rate", rate, tol, rate <= tol,
                   details=f"omega={omega:.4g}")


def _check_moment_bound(ctx: _Context):
    lo, hi = ctx.probe_window()
    fam = measures.canonical_family(ctx.canonical)
    ts = np.linspace(lo, hi, 9)
    sup_can = max(fam.second_moment(float(t)) for t in ts)
    t0 = 0.5 * (lo + hi)
    fb = measures.from_base_family(ctx.canonical, t0, measures.PointMass(np.ones(ctx.sys.dim)))
    drift = [fb.second_moment(float(t)) for t in (t0, t0 - 2.0, t0 - 4.0)]
    return _result("moment-bound", sup_can, math.inf, np.isfinite(sup_can),
                   details=("windowed sup canonical second moment; from-base "
                            f"second moments drifting backward: {drift[0]:.3g} "
                            f"{drift[1]:.3g} {drift[2]:.3g} (recorded, not asserted)"))


def _check_pullback_isometry(ctx: _Context):
    lo, hi = ctx.probe_window()
    tgrid = np.linspace(lo + 1.0, lo + 3.0, 17)
    tf = harmonic_trigexp(amp=1.0, omega=0.9, h0=0.8, h1=0.25, dim=ctx.sys.dim)
    u = spaces.SpaceTimeFunction.from_trigexp(tf, tgrid)
    pu = spaces.pullback(u, ctx.canonical, mode="standard")
    std = GaussianMeasure(np.zeros(ctx.sys.dim), np.eye(ctx.sys.dim))
    n1 = spaces.norm(u, spaces.NormSpec("l2", level=40), ctx.canonical)
    n2 = spaces.norm(pu, spaces.NormSpec("l2", level=40), lambda t: std)
    val = abs(n1 - n2)
    tol = ctx.tol("pullback-isometry", 1e-8)
    return _result("pullback-isometry", val, tol, val <= tol)


def _random_poly(rng, dim, degree=4) -> Poly:
    coeffs = {}
    for k in propagator._basis_indices(dim, degree):
        coeffs[k] = rng.normal() * 0.5 ** sum(k)
    return Poly(dim, coeffs)


def _random_problem_data(rng, dim):
    phi = SpatialTrig(complex(rng.normal(), rng.normal()) * 0.5,
                      rng.uniform(-0.5, 0.5, size=dim))
    h = harmonic_trigexp(amp=float(rng.uniform(0.3, 1.0)),
                         omega=float(rng.uniform(-0.5, 0.5)),
                         h0=float(rng.uniform(-0.5, 0.5)),
                         h1=float(rng.uniform(0.0, 0.2)),
                         dim=dim)
    return phi, h


CHECKS = {
    "hypotheses": _check_hypotheses,
    "closed-form-benchmark": _check_closed_form_benchmark,
    "evolution-law": _check_evolution_law,
    "flow-decomposition": _check_flow_decomposition,
    "fourier-identity": _check_fourier_identity,
    "from-base-invariance": _check_from_base_invariance,
    "perturbed-detector": _check_perturbed_detector,
    "qinv-shape": _check_qinv_shape,
    "semigroup-law": _check_semigroup_law,
    "periodic-contraction": _check_periodic_contraction,
    "identity-dissipativity": _check_identity_dissipativity,
    "identity-formula1": _check_identity_formula1,
    "identity-formula2": _check_identity_formula2,
    "identity-commutator": _check_identity_commutator,
    "identity-invop": _check_identity_invop,
    "identity-gradient-energy": _check_identity_gradient_energy,
    "smoothing-small-1": lambda ctx: _check_smoothing_small(ctx, 1),
    "smoothing-small-2": lambda ctx: _check_smoothing_small(ctx, 2),
    "smoothing-large": _check_smoothing_large,
    "mehler-vs-mc": _check_mehler_vs_mc,
    "maxreg": _check_maxreg,
    "convergence-rate": _check_convergence_rate,
    "moment-bound": _check_moment_bound,
    "pullback-isometry": _check_pullback_isometry,
}


def run_suite(cfg: SuiteConfig) -> Report:
    """Run the named checks (all registered ones by default), never aborting."""
    names = cfg.checks if cfg.checks else sorted(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check name(s): {', '.join(unknown)}")
    ctx = _Context(cfg)

    def run_one(name):
        t0 = time.perf_counter()
        try:
            r = CHECKS[name](ctx)
        except Exception as exc:  # a failing check is recorded, not fatal
            r = _result(name, math.nan, 0.0, False, details=f"error: {exc!r}")
        r["runtime"] = time.perf_counter() - t0
        return CheckResult(**r)

    if cfg.workers > 1:
        _ = ctx.cache  # build shared state up front
        _ = ctx.canonical
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_one, names))
    else:
        results = [run_one(n) for n in names]
    results.sort(key=lambda r: r.name)
    env = (f"python {platform.python_version()} numpy {np.__version__} "
           f"{platform.system()}-{platform.machine()}")
    cfg_hash = hashlib.sha256(cfg.raw_text.encode() or
                              json.dumps(cfg.system, sort_keys=True).encode()).hexdigest()[:16]
    return Report(results=results, environment=env, config_hash=cfg_hash)


def fit_smoothing_exponent(cache, canonical, alpha, gap_range, points: int = 7,
                           mode: str = "small", degree: int = 12,
                           s0: float | None = None, level: int | None = None):
    """Fit the operator-norm decay of D^alpha P_{s,s+gap} against the gap.

    Small-gap mode fits log norm ~ slope * log gap (blow-up exponent);
    large-gap mode fits log norm ~ rate * gap (exponential decay rate).
    Returns (slope_or_rate, intercept, r2, rows) with rows of (gap, norm).
    """
    if points < 5:
        raise ValueError("need at least 5 gaps for a fit")
    lo, hi = float(gap_range[0]), float(gap_range[1])
    if not 0 < lo < hi:
        raise ValueError("bad gap range")
    gaps = np.geomspace(lo, hi, points) if mode == "small" else np.linspace(lo, hi, points)
    if s0 is None:
        s0 = 0.5 * (cache.t0 + cache.t1)
    norms = np.array([propagator.operator_norm_estimate(
        cache, canonical, float(s0), float(s0 + g), alpha, degree=degree,
        level=level) for g in gaps])
    x = np.log(gaps) if mode == "small" else gaps
    y = np.log(norms)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    yhat = A @ coef
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    rows = list(zip(gaps.tolist(), norms.tolist()))
    return float(coef[0]), float(coef[1]), r2, rows


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_system(path: str) -> tuple[CoefficientSystem, str]:
    text = Path(path).read_text()
    cfg = json.loads(text)
    return system_from_dict({k: v for k, v in cfg.items() if k != "suite"}), text


def _parse_phi(spec: str, dim: int):
    kind, _, rest = spec.partition(":")
    if kind == "trig":
        h = np.array([float(v) for v in rest.split(",")]) if rest else np.ones(dim)
        return SpatialTrig(1.0 + 0.0j, h)
    if kind == "poly":
        cs = [float(v) for v in rest.split(",")]
        return Poly.from_univariate(cs, dim=dim)
    if kind == "tanh" or spec == "tanh":
        return BlackBox(lambda x: np.tanh(x[:, 0]))
    if kind == "const":
        return Poly.constant(dim, float(rest or 1.0))
    raise ValueError(f"unknown test function spec {spec!r} "
                     "(use trig:h0[,h1..] | poly:c0,c1,.. | tanh | const:c)")


def _parse_trigexp(spec: str, dim: int) -> TrigExp:
    kind, _, rest = spec.partition(":")
    if kind != "trigexp":
        raise ValueError("space-time data spec must be trigexp:amp,omega,h0,h1")
    amp, om, h0, h1 = (list(map(float, rest.split(","))) + [0.0] * 4)[:4]
    return harmonic_trigexp(amp=amp, omega=om, h0=h0, h1=h1, dim=dim)


def _parse_grid(spec: str) -> np.ndarray:
    lo, hi, n = spec.split(":")
    return np.linspace(float(lo), float(hi), int(n))


def _write_csv(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


def _maybe_figure(fn, *args, enabled=True):
    if not enabled:
        return
    try:
        from . import figures
        fn(figures, *args)
    except Exception as exc:  # figures are derived views; never fatal
        print(f"figure rendering skipped: {exc}", file=_sys.stderr)


def _cmd_verify(args) -> int:
    text = Path(args.config).read_text()
    cfg = SuiteConfig.from_text(text, outdir=Path(args.out),
                                figures=not args.no_figures)
    if args.checks:
        cfg.checks = args.checks.split(",")
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_suite(cfg)
    outdir = Path(args.out)
    csvp = _write_csv(outdir / "report.csv", report.csv_rows())
    (outdir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    _maybe_figure(lambda figs, p: figs.render_report(p, outdir / "report.png"),
                  csvp, enabled=cfg.figures)
    return 0 if report.all_passed else 1


def _cmd_propagate(args) -> int:
    sysm, _ = _load_system(args.config)
    cache = evolution_family.build_cache(sysm, (min(args.s, args.t) - 0.5,
                                                max(args.s, args.t) + 0.5), args.h)
    phi = _parse_phi(args.phi, sysm.dim)
    fld = propagator.apply(cache, args.s, args.t, phi, level=args.level)
    xs = _parse_grid(args.x_grid)
    pts = np.stack([xs] + [np.zeros_like(xs)] * (sysm.dim - 1), axis=1)
    vals = np.asarray(fld(pts))
    err = fld.error_estimate if fld.error_estimate is not None else 0.0
    rows = ["x,value_re,value_im,error_estimate"]
    for x, v in zip(xs, vals):
        rows.append(f"{float(x)!r},{float(np.real(v))!r},{float(np.imag(v))!r},{float(err)!r}")
    csvp = _write_csv(Path(args.out) / "propagate.csv", rows)
    print(f"wrote {csvp} (provenance: {fld.provenance})")
    _maybe_figure(lambda figs, p: figs.render_xy(p, Path(args.out) / "propagate.png",
                                                 "x", "value_re", logy=False),
                  csvp, enabled=not args.no_figures)
    return 0


def _cmd_measures(args) -> int:
    sysm, _ = _load_system(args.config)
    ts = _parse_grid(args.t_grid)
    margin = 40.0
    cache = evolution_family.build_cache(sysm, (float(ts.min()) - margin,
                                                float(ts.max()) + 1.0), args.h)
    evolution_family.estimate_growth_bound(cache)
    can = measures.CanonicalMeasures(cache)
    if args.family == "canonical":
        fam = measures.canonical_family(can)
    elif args.family.startswith("point:"):
        x0 = np.array([float(v) for v in args.family[6:].split(",")])
        fam = measures.from_base_family(can, args.t0, measures.PointMass(x0))
    elif args.family.startswith("gauss:"):
        m, q = (float(v) for v in args.family[6:].split(","))
        base = measures.GaussianBase(GaussianMeasure(np.full(sysm.dim, m),
                                                     q * np.eye(sysm.dim)))
        fam = measures.from_base_family(can, args.t0, base)
    else:
        raise ValueError("family must be canonical | point:x0[,..] | gauss:m,q")
    n = sysm.dim
    head = (["t"] + [f"mean_{i}" for i in range(n)]
            + [f"cov_{i}{j}" for i in range(n) for j in range(n)])
    rows = [",".join(head)]
    for t in ts:
        mu = fam.measure(float(t))
        if isinstance(mu, measures.FiniteMixture):
            mwt = sum(w * c.m for w, c in zip(mu.weights, mu.components))
            cov = sum(w * c.Q for w, c in zip(mu.weights, mu.components))
        else:
            mwt, cov = mu.m, mu.Q
        cells = [repr(float(t))] + [repr(float(v)) for v in mwt]
        cells += [repr(float(cov[i, j])) for i in range(n) for j in range(n)]
        rows.append(",".join(cells))
    csvp = _write_csv(Path(args.out) / "measures.csv", rows)
    rng = np.random.default_rng(args.seed)
    rrows = ["s,t,residual"]
    for _ in range(args.residual_pairs):
        s, t = np.sort(rng.uniform(float(ts.min()), float(ts.max()), size=2))
        hs = rng.uniform(-2.0, 2.0, size=(10, n))
        r = measures.invariance_residual(fam, float(s), float(t), hs)
        rrows.append(f"{float(s)!r},{float(t)!r},{float(r)!r}")
    rcsv = _write_csv(Path(args.out) / "measures_residuals.csv", rrows)
    print(f"wrote {csvp} and {rcsv}")
    _maybe_figure(lambda figs, p: figs.render_xy(p, Path(args.out) / "measures.png",
                                                 "t", "mean_0", logy=False),
                  csvp, enabled=not args.no_figures)
    return 0


def _cmd_solve(args) -> int:
    sysm, _ = _load_system(args.config)
    cache = evolution_family.build_cache(sysm, (args.t1 - 40.0, args.t2 + 1.0), args.h)
    evolution_family.estimate_growth_bound(cache)
    can = measures.CanonicalMeasures(cache)
    phi = _parse_phi(args.phi, sysm.dim)
    h = _parse_trigexp(args.h_data, sysm.dim) if args.h_data else None
    prob = cauchy.BackwardProblem(args.t1, args.t2, phi, h, nodes=args.nodes)
    u = cauchy.solve_backward(cache, prob)
    x0 = np.zeros((1, sysm.dim))
    x1 = np.ones((1, sysm.dim))
    rows = ["s,u_at_0_re,u_at_0_im,u_at_1_re,u_at_1_im"]
    for i, s in enumerate(u.tgrid):
        v0 = complex(u.value(i, x0)[0])
        v1 = complex(u.value(i, x1)[0])
        rows.append(f"{float(s)!r},{v0.real!r},{v0.imag!r},{v1.real!r},{v1.imag!r}")
    csvp = _write_csv(Path(args.out) / "solve.csv", rows)
    res = cauchy.residual(u, prob, sysm, can, use_analytic=False)
    ratio = cauchy.regularity_ratio(u, prob, can)
    print(f"wrote {csvp}\nresidual={res:.6g} regularity_ratio={ratio:.6g}")
    _maybe_figure(lambda figs, p: figs.render_xy(p, Path(args.out) / "solve.png",
                                                 "s", "u_at_0_re", logy=False),
                  csvp, enabled=not args.no_figures)
    return 0


def _cmd_mc(args) -> int:
    sysm, _ = _load_system(args.config)
    phi = _parse_phi(args.phi, sysm.dim)
    x = np.full(sysm.dim, args.x)
    mean, stderr = sde_oracle.mc_expectation(sysm, args.s, args.t, x, phi,
                                             args.paths, args.dt, args.seed)
    rows = ["mean,stderr,dt,paths",
            f"{float(np.real(mean))!r},{float(stderr)!r},{float(args.dt)!r},{args.paths}"]
    csvp = _write_csv(Path(args.out) / "mc.csv", rows)
    print(f"wrote {csvp}\nmean={float(np.real(mean)):.8g} stderr={stderr:.3g}")
    return 0


def _cmd_dump_evolution(args) -> int:
    sysm, _ = _load_system(args.config)
    lo, hi = (float(v) for v in args.window.split(":"))
    cache = evolution_family.build_cache(sysm, (lo, hi), args.h)
    rng = np.random.default_rng(args.seed)
    rows = ["s,t,norm"]
    for _ in range(args.pairs):
        s, t = np.sort(rng.uniform(lo, hi, size=2))
        nrm = float(np.linalg.norm(evolution_family.evolution_matrix(cache, s, t), ord=2))
        rows.append(f"{float(s)!r},{float(t)!r},{nrm!r}")
    csvp = _write_csv(Path(args.out) / "evolution.csv", rows)
    print(f"wrote {csvp}")
    _maybe_figure(lambda figs, p: figs.render_gap_norm(p, Path(args.out) / "evolution.png"),
                  csvp, enabled=not args.no_figures)
    return 0


def _cmd_dump_moments(args) -> int:
    sysm, _ = _load_system(args.config)
    ts = _parse_grid(args.t_grid)
    cache = evolution_family.build_cache(sysm, (float(ts.min()) - 40.0,
                                                float(ts.max()) + 1.0), args.h)
    evolution_family.estimate_growth_bound(cache)
    n = sysm.dim
    head = (["t"] + [f"g_{i}" for i in range(n)]
            + [f"Q_{i}{j}" for i in range(n) for j in range(n)] + ["horizon"])
    rows = [",".join(head)]
    for t in ts:
        mp = moments.limit_moments(cache, float(t), tol=args.tol)
        cells = [repr(float(t))] + [repr(float(v)) for v in mp.g]
        cells += [repr(float(mp.Q[i, j])) for i in range(n) for j in range(n)]
        cells.append(repr(float(mp.horizon)))
        rows.append(",".join(cells))
    csvp = _write_csv(Path(args.out) / "moments.csv", rows)
    print(f"wrote {csvp}")
    _maybe_figure(lambda figs, p: figs.render_xy(p, Path(args.out) / "moments.png",
                                                 "t", "Q_00", logy=False),
                  csvp, enabled=not args.no_figures)
    return 0


def _cmd_estimate(args) -> int:
    sysm, _ = _load_system(args.config)
    lo, hi = (float(v) for v in args.range.split(":"))
    mode = args.mode or ("small" if hi <= 1.0 else "large")
    w0, w1 = -42.0, 14.0
    cache = evolution_family.build_cache(sysm, (w0, w1), args.h)
    evolution_family.estimate_growth_bound(cache)
    can = measures.CanonicalMeasures(cache)
    alpha = (args.alpha,) + (0,) * (sysm.dim - 1)
    slope, intercept, r2, rows_data = fit_smoothing_exponent(
        cache, can, alpha, (lo, hi), points=args.points, mode=mode,
        degree=args.degree, s0=0.0)
    rows = ["gap,norm"]
    rows += [f"{float(g)!r},{float(v)!r}" for g, v in rows_data]
    rows.append(f"# mode={mode} slope={slope!r} intercept={intercept!r} r2={r2!r} "
                f"degree={args.degree}")
    csvp = _write_csv(Path(args.out) / "estimate.csv", rows)
    print(f"wrote {csvp}\nmode={mode} slope={slope:.6g} r2={r2:.5f}")
    _maybe_figure(lambda figs, p: figs.render_fit(p, Path(args.out) / "estimate.png",
                                                  slope, intercept, mode),
                  csvp, enabled=not args.no_figures)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ouflow",
        description=("Nonautonomous Ornstein-Uhlenbeck verification toolkit. "
                     "CSV columns are documented per subcommand; a header row "
                     "is always emitted.  Figures (PNG) are rendered from the "
                     "CSVs unless --no-figures is given."))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON system config")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--h", type=float, default=None, help="cache step override")
        sp.add_argument("--no-figures", action="store_true")
        sp.add_argument("--seed", type=int, default=20240)

    sp = sub.add_parser("verify", help="run the verification suite (CSV: name,value,tolerance,passed)")
    common(sp)
    sp.add_argument("--checks", default=None, help="comma-separated check names")
    sp.set_defaults(fn=_cmd_verify)

    sp = sub.add_parser("propagate", help="evaluate P_{s,t} phi (CSV: x,value_re,value_im,error_estimate)")
    common(sp)
    sp.add_argument("--s", type=float, required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--x-grid", required=True, help="lo:hi:n")
    sp.add_argument("--level", type=int, default=None)
    sp.set_defaults(fn=_cmd_propagate)

    sp = sub.add_parser("measures", help="measure family trajectories (CSV: t,mean_*,cov_*)")
    common(sp)
    sp.add_argument("--t-grid", required=True, help="lo:hi:n")
    sp.add_argument("--family", default="canonical")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--residual-pairs", type=int, default=10)
    sp.set_defaults(fn=_cmd_measures)

    sp = sub.add_parser("solve", help="backward Cauchy solve (CSV: s,u at probe points)")
    common(sp)
    sp.add_argument("--t1", type=float, required=True)
    sp.add_argument("--t2", type=float, required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--h-data", default=None, help="trigexp:amp,omega,h0,h1")
    sp.add_argument("--nodes", type=int, default=None)
    sp.set_defaults(fn=_cmd_solve)

    sp = sub.add_parser("mc", help="Monte Carlo expectation (CSV: mean,stderr,dt,paths)")
    common(sp)
    sp.add_argument("--s", type=float, required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--x", type=float, required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--paths", type=int, default=100000)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.set_defaults(fn=_cmd_mc)

    sp = sub.add_parser("dump-evolution", help="sampled ||U(t,s)|| (CSV: s,t,norm)")
    common(sp)
    sp.add_argument("--window", required=True, help="lo:hi")
    sp.add_argument("--pairs", type=int, default=64)
    sp.set_defaults(fn=_cmd_dump_evolution)

    sp = sub.add_parser("dump-moments", help="limit moments (CSV: t,g_*,Q_*,horizon)")
    common(sp)
    sp.add_argument("--t-grid", required=True, help="lo:hi:n")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.set_defaults(fn=_cmd_dump_moments)

    sp = sub.add_parser("estimate", help="smoothing exponent fit (CSV: gap,norm + fit line)")
    common(sp)
    sp.add_argument("--alpha", type=int, required=True)
    sp.add_argument("--range", required=True, help="lo:hi gap range")
    sp.add_argument("--points", type=int, default=7)
    sp.add_argument("--degree", type=int, default=12)
    sp.add_argument("--mode", choices=("small", "large"), default=None)
    sp.set_defaults(fn=_cmd_estimate)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (CoefficientError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
