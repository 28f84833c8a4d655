"""Acceptance gate: every criterion runs at its stated tolerance and prints
one pass/fail line.  Session caches (built once in conftest) are shared; the
per-criterion budgets time the criterion body itself.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from ouflow import (cauchy, coeffs, evolution_family as ef, measures, moments,
                    propagator as pg, sde_oracle as so, spaces, verify_cli as vc)
from ouflow.propagator import BlackBox, Poly, SpatialTrig, harmonic_trigexp


class Criterion:
    def __init__(self, name, budget_s):
        self.name = name
        self.budget = budget_s
        self.t0 = time.perf_counter()

    def finish(self, ok, detail=""):
        dt = time.perf_counter() - self.t0
        status = "PASS" if ok and dt < self.budget else "FAIL"
        line = (f"ACCEPTANCE {self.name}: {status} "
                f"({dt:.1f}s / budget {self.budget:.0f}s){' ' + detail if detail else ''}")
        print(line)
        print(line, file=sys.__stdout__)
        assert ok, f"{self.name}: {detail}"
        assert dt < self.budget, f"{self.name}: runtime {dt:.1f}s over budget"


def test_criterion_1_closed_form_benchmark():
    c = Criterion("1-closed-form-benchmark", 5.0)
    sysb = coeffs.autonomous_benchmark()
    cache = ef.build_cache(sysb, (-26.0, 4.0), 1e-3)
    ef.estimate_growth_bound(cache)
    can = measures.CanonicalMeasures(cache, tol=1e-11)
    errs = []
    for s, t in ((0.0, 0.5), (0.0, 1.0), (-1.3, 1.7)):
        tau = t - s
        U, g, Q = cache.segment(s, t)
        errs.append(abs(U[0, 0] - math.exp(-tau)))
        errs.append(abs(g[0]))
        errs.append(abs(Q[0, 0] - (1.0 - math.exp(-2.0 * tau))))
    for t in (-1.0, 0.0, 2.0):
        mu = can(t)
        errs.append(abs(mu.m[0]))
        errs.append(abs(mu.Q[0, 0] - 1.0))
    tau = 1.0
    p1 = pg.propagate_poly(cache, 0.0, tau, Poly.from_univariate([0.0, 1.0]))
    p2 = pg.propagate_poly(cache, 0.0, tau, Poly.from_univariate([0.0, 0.0, 1.0]))
    e = math.exp(-tau)
    errs.append(abs(p1.coeffs.get((1,), 0.0) - e))
    errs.append(abs(complex(p1.coeffs.get((0,), 0.0))))
    errs.append(abs(p2.coeffs.get((2,), 0.0) - e * e))
    errs.append(abs(p2.coeffs.get((0,), 0.0) - (1.0 - e * e)))
    worst = max(float(np.real(v)) for v in errs)
    c.finish(worst <= 1e-8, f"max closed-form error {worst:.2e}")


def test_criterion_2_mehler_vs_monte_carlo(per_sys, per_cache):
    c = Criterion("2-mehler-vs-mc", 60.0)
    phi = BlackBox(lambda x: np.tanh(x[:, 0]))
    rng = np.random.default_rng(202)

    # fitted O(dt) weak-error bias from coarse steps
    s0, t0, x0 = 1.0, 2.0, np.array([0.5])
    quad0 = float(np.real(pg.apply(per_cache, s0, t0, phi, level=40)(x0[None, :])[0]))
    num = den = 0.0
    for j, d in enumerate((1e-1, 5e-2, 2.5e-2)):
        mean, _ = so.mc_expectation(per_sys, s0, t0, x0, phi, 200_000, d, 7_000 + j)
        num += abs(float(np.real(mean)) - quad0) * d
        den += d * d
    bias_c = num / den

    k, dt = 200_000, 1e-3
    worst = -math.inf
    for i in range(10):
        s = float(rng.uniform(0.0, 6.0))
        t = s + float(rng.uniform(0.3, 0.8))
        x = np.array([float(rng.uniform(-1.0, 1.0))])
        quad = float(np.real(pg.apply(per_cache, s, t, phi, level=40)(x[None, :])[0]))
        mean, se = so.mc_expectation(per_sys, s, t, x, phi, k, dt, 9_000 + i)
        excess = abs(float(np.real(mean)) - quad) - (3.0 * se + bias_c * dt)
        worst = max(worst, excess)
    c.finish(worst <= 0.0, f"max excess over 3*stderr+bias: {worst:.2e} (bias_c={bias_c:.3f})")


def test_criterion_3_invariance(per_can):
    c = Criterion("3-invariance", 10.0)
    rng = np.random.default_rng(303)
    fam = measures.canonical_family(per_can)
    worst_can = 0.0
    for _ in range(30):
        s, t = np.sort(rng.uniform(-6.0, 12.0, size=2))
        hs = rng.uniform(-2.5, 2.5, size=(30, 1))
        worst_can = max(worst_can, measures.invariance_residual(fam, s, t, hs))
    t0 = 3.0
    fam_pt = measures.from_base_family(per_can, t0, measures.PointMass(np.array([0.7])))
    worst_pt = 0.0
    for _ in range(30):
        s, t = np.sort(rng.uniform(t0 - 4.0, t0 + 4.0, size=2))
        hs = rng.uniform(-2.5, 2.5, size=(30, 1))
        worst_pt = max(worst_pt, measures.invariance_residual(fam_pt, s, t, hs))
    pert = measures.MeasureFamily(per_can, kind="canonical", cov_scale=1.1)
    det = 0.0
    for _ in range(10):
        s, t = np.sort(rng.uniform(-2.0, 6.0, size=2))
        hs = rng.uniform(-2.0, 2.0, size=(10, 1))
        det = max(det, measures.invariance_residual(pert, s, t, hs))
    ok = worst_can <= 1e-8 and worst_pt <= 1e-8 and det > 1e-3
    c.finish(ok, f"canonical {worst_can:.2e}, point-base {worst_pt:.2e}, detector {det:.2e}")


def test_criterion_4_smoothing_rates(auto_cache, auto_can, per_cache, per_can):
    c = Criterion("4-smoothing-rates", 120.0)
    ok = True
    details = []
    for name, cache, can in (("auto", auto_cache, auto_can),
                             ("periodic", per_cache, per_can)):
        s1, _, _, _ = vc.fit_smoothing_exponent(cache, can, (1,), (0.06, 0.5),
                                                points=7, mode="small", degree=12, s0=0.0)
        s2, _, _, _ = vc.fit_smoothing_exponent(cache, can, (2,), (0.085, 0.25),
                                                points=7, mode="small", degree=12, s0=0.0)
        _, omega = cache.growth
        r1, _, _, _ = vc.fit_smoothing_exponent(cache, can, (1,), (1.0, 8.0),
                                                points=8, mode="large", degree=12, s0=0.0)
        r2, _, _, _ = vc.fit_smoothing_exponent(cache, can, (2,), (1.0, 8.0),
                                                points=8, mode="large", degree=12, s0=0.0)
        ok = ok and abs(s1 + 0.5) <= 0.1 and abs(s2 + 1.0) <= 0.15
        ok = ok and r1 <= omega * 1 + 0.1 and r2 <= omega * 2 + 0.1
        details.append(f"{name}: a1={s1:.3f} a2={s2:.3f} large1={r1:.3f} "
                       f"large2={r2:.3f} omega={omega:.3f}")
    c.finish(ok, "; ".join(details))


def test_criterion_5_qinv_shape(auto_cache):
    c = Criterion("5-qinv-shape", 10.0)
    t = 2.0
    gaps = np.geomspace(1e-4, 1e-2, 9)
    vals = np.array([moments.qinv_sqrt_norm(auto_cache, t - g, t) for g in gaps])
    slope = float(np.polyfit(np.log(gaps), np.log(vals), 1)[0])
    big = np.linspace(1.0, 10.0, 10)
    bvals = np.array([moments.qinv_sqrt_norm(auto_cache, t - g, t) for g in big])
    variation = float(bvals.max() / bvals.min() - 1.0)
    ok = abs(slope + 0.5) <= 0.05 and variation < 0.10
    c.finish(ok, f"slope {slope:.4f}, large-gap variation {variation:.2%}")


def test_criterion_6_identity_suite(auto_sys, auto_cache, auto_can, per_sys,
                                    per_cache, per_can):
    c = Criterion("6-identity-suite", 30.0)
    T = 2 * math.pi
    rng = np.random.default_rng(606)
    results = {}

    u = harmonic_trigexp(amp=1.0, omega=1.0, h0=0.8, h1=0.3, hfreq=1.0)
    results["dissipativity"] = (cauchy.dissipativity_residual(
        per_sys, per_can, u, 0.0, T, nt=801, level=30, periodic=True), 1e-7)

    g = harmonic_trigexp(amp=1.0, omega=1.0, h0=0.8, h1=0.3, hfreq=1.0)
    h = harmonic_trigexp(amp=0.7, omega=2.0, h0=-0.5, h1=0.2, hfreq=1.0)
    xs = rng.normal(size=(12, 1))
    results["formula1"] = (max(cauchy.product_rule_pointwise(per_sys, g, h, float(t), xs)
                               for t in np.linspace(0.0, T, 7)), 1e-9)
    results["formula2"] = (cauchy.product_rule_integrated(
        per_sys, per_can, g, h, 0.0, T, nt=801, level=30, periodic=True), 1e-7)

    phi4 = Poly(1, {(1,): 0.5, (2,): -0.4, (3,): 0.2, (4,): 0.1})
    results["commutator"] = (cauchy.commutator_residual(
        per_cache, 4.0, phi4, np.linspace(1.0, 3.5, 5), rng.normal(size=(10, 1))), 1e-8)

    trig = SpatialTrig(1.0 + 0.0j, np.array([1.0]))
    results["invop-autonomous"] = (measures.invop_residual(
        auto_sys, auto_cache, auto_can, 0.3, trig, level=40), 1e-9)
    x2 = Poly.from_univariate([0.0, 0.0, 1.0])
    results["invop-periodic"] = (measures.invop_residual(
        per_sys, per_cache, per_can, 0.8, x2, level=24, dt=1e-4), 5e-6)

    phi = Poly(1, {(1,): 0.5, (2,): 1.0, (4,): 0.25})
    _, _, ge = cauchy.gradient_energy_residual(per_cache, per_can, 2.5, 4.0, phi,
                                               nt=201, level=12)
    results["gradient-energy"] = (ge, 1e-5)

    ok = all(v <= tol for v, tol in results.values())
    detail = " ".join(f"{k}={v:.1e}(<= {tol:g})" for k, (v, tol) in results.items())
    c.finish(ok, detail)


def test_criterion_7_semigroup_laws(per_cache, per_can):
    c = Criterion("7-semigroup-laws", 10.0)
    rng = np.random.default_rng(707)
    T = 2 * math.pi

    tf = harmonic_trigexp(amp=1.0, omega=0.7, h0=0.9, h1=0.3)
    tg = np.linspace(0.0, 2.0, 9)
    u = spaces.SpaceTimeFunction.from_trigexp(tf, tg)
    one = pg.semigroup_apply(per_cache, 1.3, u)
    two = pg.semigroup_apply(per_cache, 0.4, pg.semigroup_apply(per_cache, 0.9, u))
    xs = rng.normal(size=(8, 1))
    law = max(float(np.max(np.abs(one.value(i, xs) - two.value(i, xs))))
              for i in range(len(tg)))

    contraction = -1.0
    tgp = np.linspace(0.0, T, 65)
    for _ in range(4):
        tfp = harmonic_trigexp(amp=1.0, omega=float(rng.integers(1, 3)),
                               h0=float(rng.uniform(0.3, 1.0)), h1=0.4, hfreq=1.0)
        up = spaces.SpaceTimeFunction.from_trigexp(tfp, tgp, periodic=True)
        pu = pg.semigroup_apply(per_cache, float(rng.uniform(0.2, 1.5)), up, periodic=True)
        n0 = spaces.norm(up, spaces.NormSpec("l2", level=32), per_can)
        n1 = spaces.norm(pu, spaces.NormSpec("l2", level=32), per_can)
        contraction = max(contraction, n1 / n0 - 1.0)

    evlaw = 0.0
    for _ in range(10):
        a, b, d = np.sort(rng.uniform(-3.0, 8.0, size=3))
        phi = SpatialTrig(1.0 + 0j, rng.normal(size=1))
        lhs = pg.apply_exact_trigexp(per_cache, a, d, phi)
        rhs = pg.apply_exact_trigexp(per_cache, a, b,
                                     pg.apply_exact_trigexp(per_cache, b, d, phi))
        evlaw = max(evlaw, float(np.max(np.abs(lhs.value(xs) - rhs.value(xs)))))

    ok = law <= 1e-10 and contraction <= 1e-9 and evlaw <= 1e-10
    c.finish(ok, f"semigroup law {law:.1e}, contraction excess {contraction:.1e}, "
                 f"evolution law {evlaw:.1e}")


def test_criterion_8_maximal_regularity(per_sys, per_cache, per_can):
    c = Criterion("8-maximal-regularity", 120.0)
    rng = np.random.default_rng(808)
    t1, t2 = 3.0, 4.0
    worst_res = 0.0
    ratios_fine, ratios_coarse = [], []
    for _ in range(50):
        phi = SpatialTrig(complex(rng.normal(), rng.normal()) * 0.5,
                          rng.uniform(-0.5, 0.5, size=1))
        h = harmonic_trigexp(amp=float(rng.uniform(0.3, 1.0)),
                             omega=float(rng.uniform(-0.5, 0.5)),
                             h0=float(rng.uniform(-0.5, 0.5)),
                             h1=float(rng.uniform(0.0, 0.2)))
        prob = cauchy.BackwardProblem(t1, t2, phi, h, nodes=401)
        uf = cauchy.solve_backward(per_cache, prob)
        worst_res = max(worst_res, cauchy.residual(uf, prob, per_sys, per_can,
                                                   level=16, use_analytic=False))
        ratios_fine.append(cauchy.regularity_ratio(uf, prob, per_can, level=16))
        probc = cauchy.BackwardProblem(t1, t2, phi, h, nodes=201)
        uc = cauchy.solve_backward(per_cache, probc)
        ratios_coarse.append(cauchy.regularity_ratio(uc, probc, per_can, level=16))
    change = abs(max(ratios_fine) - max(ratios_coarse)) / max(ratios_fine)
    ok = worst_res <= 1e-5 and change <= 0.10
    c.finish(ok, f"max residual {worst_res:.2e}, max ratio {max(ratios_fine):.4g}, "
                 f"grid change {change:.2%}")


def test_criterion_9_convergence_rate(auto_cache, auto_can):
    c = Criterion("9-convergence-rate", 15.0)
    phi = SpatialTrig(1.0 + 0.0j, np.array([1.0]))
    base = measures.PointMass(np.array([1.0]))
    t = 2.0
    s_list = t - np.linspace(2.0, 8.0, 7)
    _, rate = measures.convergence_experiment(auto_cache, auto_can, base, t,
                                              s_list, phi, level=24)
    _, omega = auto_cache.growth
    ok = rate <= 0.9 * omega
    c.finish(ok, f"fitted rate {rate:.4f} vs 0.9*omega {0.9 * omega:.4f}")


def test_criterion_10_reproducibility():
    c = Criterion("10-reproducibility", 300.0)
    cfg_text = json.dumps({
        "dim": 1,
        "A": {"kind": "periodic", "base": [[-1.0]], "sin_amp": [[-0.5]],
              "cos_amp": [[0.0]], "period": 2 * math.pi},
        "B": {"kind": "constant", "value": [[1.0]]},
        "f": {"kind": "periodic", "base": [0.0], "sin_amp": [0.0],
              "cos_amp": [0.3], "period": 2 * math.pi},
        "period": 2 * math.pi,
        "suite": {"seed": 1010},
    })
    rep1 = vc.run_suite(vc.SuiteConfig.from_text(cfg_text))
    rep2 = vc.run_suite(vc.SuiteConfig.from_text(cfg_text))
    rows1 = "\n".join(rep1.csv_rows()).encode()
    rows2 = "\n".join(rep2.csv_rows()).encode()
    ok = rows1 == rows2 and rep1.all_passed and rep2.all_passed
    c.finish(ok, f"identical bytes: {rows1 == rows2}; all passed: {rep1.all_passed}")
