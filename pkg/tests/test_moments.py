import json
import math

import numpy as np
import pytest
from scipy.integrate import quad

from ouflow import coeffs, evolution_family as ef, moments
from ouflow.moments import NoLimitError, SingularityError, limit_moments, moment_pair, qinv_sqrt_norm


def test_scalar_covariance_closed_form(auto_cache):
    mp = moment_pair(auto_cache, 0.0, 1.0)
    assert mp.Q[0, 0] == pytest.approx(1.0 - math.exp(-2.0), abs=1e-10)
    assert mp.Q[0, 0] == pytest.approx(0.86466472, abs=1e-8)


def test_forced_mean_closed_form():
    sys = coeffs.parse_system(json.dumps({
        "dim": 1,
        "A": {"kind": "constant", "value": [[-1.0]]},
        "B": {"kind": "constant", "value": [[1.4142135623730951]]},
        "f": {"kind": "constant", "value": [3.0]},
    }))
    cache = ef.build_cache(sys, (-40.0, 5.0), 1e-3)
    ef.estimate_growth_bound(cache)
    mp = moment_pair(cache, 0.0, 2.0)
    assert mp.g[0] == pytest.approx(3.0 * (1.0 - math.exp(-2.0)), abs=1e-10)
    lim = limit_moments(cache, 1.0, tol=1e-10)
    assert lim.g[0] == pytest.approx(3.0, abs=1e-8)
    assert lim.Q[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_zero_at_equal_times(auto_cache):
    mp = moment_pair(auto_cache, 0.5, 0.5)
    assert mp.g[0] == 0.0 and mp.Q[0, 0] == 0.0


def test_argument_order(auto_cache):
    with pytest.raises(ef.ArgumentOrderError):
        moment_pair(auto_cache, 1.0, 0.0)


def test_limit_moments_autonomous(auto_cache):
    lim = limit_moments(auto_cache, 0.7, tol=1e-10)
    assert lim.Q[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert lim.g[0] == pytest.approx(0.0, abs=1e-12)
    assert lim.horizon is not None and lim.tail_bound <= 1e-10
    assert lim.s == -math.inf


def test_limit_moments_periodic_against_quadrature(per_cache):
    # oracle: direct adaptive quadrature of the defining integral, horizon 40
    t = 0.0

    def u2(r):
        return math.exp(2.0 * (-(t - r) + 0.5 * (math.cos(t) - math.cos(r))))

    ref = quad(u2, t - 40.0, t, limit=500, epsabs=1e-13, epsrel=1e-13)[0]
    lim = limit_moments(per_cache, t, tol=1e-10)
    assert abs(lim.Q[0, 0] - ref) <= 1e-9


def test_no_limit_for_unstable_family():
    sys = coeffs.parse_system(json.dumps({
        "dim": 2,
        "A": {"kind": "constant", "value": [[0.0, 1.0], [-1.0, 0.0]]},
        "B": {"kind": "constant", "value": [[1.0, 0.0], [0.0, 1.0]]},
        "f": {"kind": "constant", "value": [0.0, 0.0]},
    }))
    cache = ef.build_cache(sys, (-10.0, 10.0), 1e-2)
    with pytest.raises(NoLimitError):
        limit_moments(cache, 0.0)


def test_flow_decomposition(per_cache, rng):
    for _ in range(8):
        s, r, t = np.sort(rng.uniform(-10.0, 12.0, size=3))
        mts = moment_pair(per_cache, s, t)
        mtr = moment_pair(per_cache, r, t)
        mrs = moment_pair(per_cache, s, r)
        U = ef.evolution_matrix(per_cache, r, t)
        assert np.max(np.abs(mts.Q - (U @ mrs.Q @ U.T + mtr.Q))) <= 1e-9
        assert np.max(np.abs(mts.g - (U @ mrs.g + mtr.g))) <= 1e-9


def test_covariance_monotone_in_window(per_cache):
    t = 2.0
    prev = None
    for s in (1.5, 1.0, 0.0, -2.0):
        Q = moment_pair(per_cache, s, t).Q
        if prev is not None:
            assert np.linalg.eigvalsh(Q - prev).min() >= -1e-12
        prev = Q


def test_qinv_sqrt_norm_closed_form(auto_cache):
    val = qinv_sqrt_norm(auto_cache, 0.0, 1.0)
    assert val == pytest.approx((1.0 - math.exp(-2.0)) ** -0.5, rel=1e-9)
    assert val == pytest.approx(0.86466472 ** -0.5, abs=1e-7)


def test_qinv_small_gap(auto_cache):
    # Q ~ B^2 (t-s) = 2e-4 for gaps 1e-4; with B=sqrt(2): (2e-4)^{-1/2}
    val = qinv_sqrt_norm(auto_cache, 0.0, 1e-4)
    assert val == pytest.approx((2e-4) ** -0.5, rel=0.01)


def test_qinv_slope(auto_cache):
    gaps = np.geomspace(1e-4, 1e-2, 9)
    vals = [qinv_sqrt_norm(auto_cache, 1.0 - g, 1.0) for g in gaps]
    slope = np.polyfit(np.log(gaps), np.log(vals), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_qinv_singularity_error(auto_cache):
    with pytest.raises(SingularityError):
        qinv_sqrt_norm(auto_cache, 0.0, 1e-15)


def test_stimaQ_envelope(per_cache, rng):
    # <Q(t,s)x, x> <= C M (1 - e^{omega(t-s)}) / (2|omega|) |x|^2: fit C on a
    # few pairs spanning small to large gaps, verify the envelope on fresh ones
    M, omega = per_cache.growth

    def shape(s, t):
        return M * (1.0 - math.exp(omega * (t - s))) / (2.0 * abs(omega))

    train = [(0.0, 0.001), (0.0, 0.2), (0.0, 1.0), (-2.0, 3.0), (1.0, 9.0)]
    C = max(moment_pair(per_cache, s, t).Q[0, 0] / shape(s, t) for s, t in train)
    for _ in range(20):
        s, t = np.sort(rng.uniform(-10.0, 12.0, size=2))
        q = moment_pair(per_cache, s, t).Q[0, 0]
        assert q <= 1.1 * C * shape(s, t)
