import json
import math

import numpy as np
import pytest

from ouflow import coeffs, evolution_family as ef, measures, propagator as pg
from ouflow.gaussian import GaussianMeasure
from ouflow.measures import (CanonicalMeasures, FiniteMixture, GaussianBase,
                             MeasureFamily, PointMass, canonical_family,
                             convergence_experiment, from_base_family,
                             invariance_residual, invop_residual)


def test_canonical_autonomous_is_standard(auto_can):
    for t in (-2.0, 0.0, 3.0):
        mu = auto_can(t)
        assert mu.m[0] == pytest.approx(0.0, abs=1e-10)
        assert mu.Q[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_canonical_forced_mean():
    sys = coeffs.parse_system(json.dumps({
        "dim": 1,
        "A": {"kind": "constant", "value": [[-1.0]]},
        "B": {"kind": "constant", "value": [[1.4142135623730951]]},
        "f": {"kind": "constant", "value": [3.0]},
    }))
    cache = ef.build_cache(sys, (-40.0, 4.0), 1e-3)
    ef.estimate_growth_bound(cache)
    mu = measures.canonical_measure(cache, 0.0, tol=1e-10)
    assert mu.m[0] == pytest.approx(3.0, abs=1e-8)
    assert mu.Q[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_canonical_periodicity(per_can):
    # nu_t = nu_{t+T}: limit moments computed independently at both times
    for t in (0.0, 1.3):
        a = per_can.moments(t)
        b = per_can.moments(t + 2 * math.pi)
        assert abs(a.g[0] - b.g[0]) <= 1e-9
        assert abs(a.Q[0, 0] - b.Q[0, 0]) <= 1e-9


def test_family_fourier_normalization(per_can):
    fam = canonical_family(per_can)
    for t in (-1.0, 0.0, 2.0):
        assert fam.fourier(t, np.zeros(1)) == pytest.approx(1.0)


def test_point_base_at_t0(per_can):
    x0 = np.array([0.7])
    fam = from_base_family(per_can, 1.5, PointMass(x0))
    h = np.array([1.1])
    lhs = fam.fourier(1.5, h)
    core = per_can(1.5)
    rhs = np.exp(1j * x0[0] * h[0]) * core.fourier(h)
    assert abs(lhs - rhs) <= 1e-12


def test_gaussian_base_equals_convolution(per_can, rng):
    t0 = 0.5
    base = GaussianBase(GaussianMeasure([0.4], [[0.3]]))
    fam = from_base_family(per_can, t0, base)
    for t in (0.5, 2.0, -1.0):
        U = ef.transition_any(per_can.cache, t0, t)
        push = GaussianMeasure(U @ base.measure.m, U @ base.measure.Q @ U.T)
        conv = per_can(t).convolve(push)
        for _ in range(20):
            h = rng.uniform(-2.0, 2.0, size=1)
            assert abs(fam.fourier(t, h) - conv.fourier(h)) <= 1e-12


def test_mixture_base_family(per_can, rng):
    comps = (GaussianMeasure([0.2], [[0.1]]), GaussianMeasure([-0.5], [[0.4]]))
    base = FiniteMixture((0.3, 0.7), comps)
    fam = from_base_family(per_can, 0.0, base)
    worst = 0.0
    for _ in range(10):
        s, t = np.sort(rng.uniform(-3.0, 3.0, size=2))
        hs = rng.uniform(-2.0, 2.0, size=(10, 1))
        worst = max(worst, invariance_residual(fam, s, t, hs))
    assert worst <= 1e-9


def test_mixture_weights_validated():
    with pytest.raises(ValueError, match="weights"):
        FiniteMixture((0.5, 0.2), (GaussianMeasure([0.0], [[1.0]]),) * 2)


def test_invariance_canonical_autonomous(auto_can, rng):
    fam = canonical_family(auto_can)
    worst = 0.0
    for _ in range(30):
        s, t = np.sort(rng.uniform(-5.0, 8.0, size=2))
        hs = rng.uniform(-3.0, 3.0, size=(30, 1))
        worst = max(worst, invariance_residual(fam, s, t, hs))
    assert worst <= 1e-9


def test_invariance_point_base(per_can, rng):
    fam = from_base_family(per_can, 2.0, PointMass(np.array([0.7])))
    worst = 0.0
    for _ in range(20):
        s, t = np.sort(rng.uniform(-2.0, 6.0, size=2))
        hs = rng.uniform(-3.0, 3.0, size=(20, 1))
        worst = max(worst, invariance_residual(fam, s, t, hs))
    assert worst <= 1e-9


def test_perturbed_family_detected(per_can, rng):
    fam = MeasureFamily(per_can, kind="canonical", cov_scale=1.1)
    worst = 0.0
    for _ in range(10):
        s, t = np.sort(rng.uniform(-2.0, 6.0, size=2))
        hs = rng.uniform(-2.0, 2.0, size=(10, 1))
        worst = max(worst, invariance_residual(fam, s, t, hs))
    assert worst > 1e-3


def test_invop_autonomous_stationary(auto_sys, auto_cache, auto_can):
    phi = pg.SpatialTrig(1.0 + 0.0j, np.array([1.0]))
    res = invop_residual(auto_sys, auto_cache, auto_can, 0.3, phi, level=40)
    assert res <= 1e-9


def test_invop_periodic_quadratic(per_sys, per_cache, per_can):
    phi = pg.Poly.from_univariate([0.0, 0.0, 1.0])
    res = invop_residual(per_sys, per_cache, per_can, 0.8, phi, level=24, dt=1e-4)
    assert res <= 5e-6


def test_invop_constant_function(per_sys, per_cache, per_can):
    phi = pg.Poly.constant(1, 1.0)
    res = invop_residual(per_sys, per_cache, per_can, 0.8, phi, level=8)
    assert res <= 1e-12


def test_invop_conditioning_warning(per_sys, per_cache, per_can):
    phi = pg.Poly.constant(1, 1.0)
    with pytest.warns(UserWarning, match="ill-conditioned"):
        invop_residual(per_sys, per_cache, per_can, 0.8, phi, level=8, dt=1e-9)


def test_convergence_canonical_base_gap_zero(auto_cache, auto_can):
    phi = pg.SpatialTrig(1.0 + 0.0j, np.array([1.0]))
    base = GaussianBase(auto_can(0.0))
    rows, _ = convergence_experiment(auto_cache, auto_can, base, 2.0,
                                     [1.0, 0.0, -2.0, -4.0], phi, level=40)
    assert max(g for _, g in rows) <= 1e-10


def test_convergence_point_base_rate(auto_cache, auto_can):
    phi = pg.SpatialTrig(1.0 + 0.0j, np.array([1.0]))
    base = PointMass(np.array([1.0]))
    t = 2.0
    s_list = t - np.linspace(2.0, 8.0, 7)
    rows, rate = convergence_experiment(auto_cache, auto_can, base, t, s_list, phi)
    assert rate == pytest.approx(-1.0, abs=0.1)
    gaps = [g for _, g in rows]
    assert all(a > b for a, b in zip(gaps, gaps[1:])) or all(
        a < b for a, b in zip(gaps, gaps[1:]))
    assert rate < 0.0


def test_second_moment_growth_of_drifting_base(per_can):
    t0 = 2.0
    fam = from_base_family(per_can, t0, PointMass(np.array([1.0])))
    vals = [fam.second_moment(t) for t in (t0, t0 - 2.0, t0 - 4.0, t0 - 6.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    can = canonical_family(per_can)
    sups = max(can.second_moment(t) for t in np.linspace(-6.0, 6.0, 13))
    assert np.isfinite(sups)
