import json
import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from ouflow import coeffs, propagator as pg, sde_oracle as so


def test_noiseless_reduction_to_ode():
    sys = coeffs.parse_system(json.dumps({
        "dim": 1,
        "A": {"kind": "constant", "value": [[-1.0]]},
        "B": {"kind": "constant", "value": [[0.0]]},
        "f": {"kind": "constant", "value": [0.0]},
    }))
    dt = 1e-3
    ens = so.simulate_paths(sys, 0.0, 1.0, [1.0], 4, dt, 3)
    rel = abs(ens.terminal[0, 0] - math.exp(-1.0)) / math.exp(-1.0)
    assert rel < 2 * dt  # Euler is first order
    assert np.all(ens.terminal == ens.terminal[0, 0])


def test_no_elapsed_time_returns_start(auto_sys):
    ens = so.simulate_paths(auto_sys, 2.0, 2.0, [0.7], 5, 1e-3, 1)
    assert np.all(ens.terminal == 0.7)


def test_terminal_variance_band(auto_sys):
    # k = 1e6, dt = 1e-3, t - s = 3: variance within 1 +/- 0.02
    ens = so.simulate_paths(auto_sys, 0.0, 3.0, [0.0], 1_000_000, 1e-3, 42)
    assert 0.98 <= float(ens.terminal.var()) <= 1.02


def test_seed_determinism(auto_sys):
    a = so.simulate_paths(auto_sys, 0.0, 0.5, [0.2], 40_000, 1e-3, 7)
    b = so.simulate_paths(auto_sys, 0.0, 0.5, [0.2], 40_000, 1e-3, 7)
    assert np.array_equal(a.terminal, b.terminal)


def test_partial_final_step(auto_sys):
    ens = so.simulate_paths(auto_sys, 0.0, 0.0105, [1.0], 3, 1e-2, 1)
    assert ens.t == 0.0105


def test_mc_constant(per_sys):
    mean, se = so.mc_expectation(per_sys, 0.0, 1.0, [0.0],
                                 pg.Poly.constant(1, 2.5), 500, 1e-2, 9)
    assert mean == pytest.approx(2.5, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_mc_first_moment(auto_sys):
    x0, tau = 1.3, 0.8
    mean, se = so.mc_expectation(auto_sys, 0.0, tau, [x0],
                                 pg.Poly.from_univariate([0.0, 1.0]),
                                 200_000, 1e-3, 17)
    assert abs(mean - x0 * math.exp(-tau)) <= 4 * se + 2e-3 * tau


def test_weak_error_order_one(auto_sys):
    # |mc mean - exact mean| scales ~ linearly in dt for smooth phi
    x0, tau = 1.0, 1.0
    exact = x0 * math.exp(-tau)
    dts = [1e-1, 5e-2, 2.5e-2]
    biases = []
    for j, dt in enumerate(dts):
        mean, _ = so.mc_expectation(auto_sys, 0.0, tau, [x0],
                                    pg.Poly.from_univariate([0.0, 1.0]),
                                    2_000_000, dt, 100 + j)
        biases.append(abs(float(mean) - exact))
    ratio1 = biases[0] / biases[1]
    ratio2 = biases[1] / biases[2]
    assert 1.6 <= ratio1 <= 2.6
    assert 1.5 <= ratio2 <= 2.7


def test_mc_vs_quadrature_tanh(per_sys, per_cache):
    phi = pg.BlackBox(lambda x: np.tanh(x[:, 0]))
    quad = float(np.real(pg.apply(per_cache, 0.5, 1.3, phi, level=40)(np.array([[0.7]]))[0]))
    mean, se = so.mc_expectation(per_sys, 0.5, 1.3, [0.7], phi, 200_000, 1e-3, 23)
    assert abs(float(np.real(mean)) - quad) <= 3 * se + 1e-3


def test_exact_terminal_sample_point_mass(per_cache):
    sys_b0 = coeffs.parse_system(json.dumps({
        "dim": 1,
        "A": {"kind": "constant", "value": [[-1.0]]},
        "B": {"kind": "constant", "value": [[0.0]]},
        "f": {"kind": "constant", "value": [0.5]},
    }))
    from ouflow import evolution_family as ef
    cache = ef.build_cache(sys_b0, (0.0, 2.0), 1e-3)
    ens = so.exact_terminal_sample(cache, 0.0, 1.0, [1.0], 50, 3)
    U, g, _ = cache.segment(0.0, 1.0)
    assert np.max(np.abs(ens.terminal - (U[0, 0] * 1.0 + g[0]))) < 1e-14


def test_exact_terminal_mean_unbiased(auto_cache):
    k = 200_000
    ens = so.exact_terminal_sample(auto_cache, 0.0, 1.0, [1.0], k, 5)
    U, g, Q = auto_cache.segment(0.0, 1.0)
    target = U[0, 0] * 1.0 + g[0]
    sigma = math.sqrt(Q[0, 0])
    assert abs(ens.terminal.mean() - target) <= 4 * sigma / math.sqrt(k)


def test_euler_vs_exact_terminal_ks(auto_sys, auto_cache):
    # distributional identity check, 1% critical value at k = 1e5, dt = 1e-4
    k = 100_000
    em = so.simulate_paths(auto_sys, 0.0, 0.25, [0.3], k, 1e-4, 11)
    ex = so.exact_terminal_sample(auto_cache, 0.0, 0.25, [0.3], k, 12)
    stat = ks_2samp(em.terminal[:, 0], ex.terminal[:, 0]).statistic
    crit = 1.628 * math.sqrt(2.0 / k)
    assert stat < crit


def test_divergence_aborts_with_path_index():
    sys = coeffs.parse_system(json.dumps({
        "dim": 1,
        "A": {"kind": "constant", "value": [[30.0]]},
        "B": {"kind": "constant", "value": [[0.0]]},
        "f": {"kind": "constant", "value": [0.0]},
    }))
    with pytest.raises(so.PathDivergenceError, match="path"):
        so.simulate_paths(sys, 0.0, 3.0, [1.0], 4, 1e-3, 1)


def test_input_validation(auto_sys):
    with pytest.raises(ValueError):
        so.simulate_paths(auto_sys, 1.0, 0.0, [0.0], 10, 1e-3, 1)
    with pytest.raises(ValueError):
        so.simulate_paths(auto_sys, 0.0, 1.0, [0.0], 0, 1e-3, 1)
    with pytest.raises(ValueError):
        so.simulate_paths(auto_sys, 0.0, 1.0, [0.0], 10, 2.0, 1)
