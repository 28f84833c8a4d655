import numpy as np
import pytest

from ouflow import coeffs, evolution_family, measures


@pytest.fixture(scope="session")
def auto_sys():
    return coeffs.autonomous_benchmark()


@pytest.fixture(scope="session")
def per_sys():
    return coeffs.periodic_benchmark()


@pytest.fixture(scope="session")
def auto_cache(auto_sys):
    cache = evolution_family.build_cache(auto_sys, (-30.0, 10.0), 1e-3)
    evolution_family.estimate_growth_bound(cache)
    return cache


@pytest.fixture(scope="session")
def per_cache(per_sys):
    cache = evolution_family.build_cache(per_sys, (-45.0, 15.0), 1e-3)
    evolution_family.estimate_growth_bound(cache)
    return cache


@pytest.fixture(scope="session")
def auto_can(auto_cache):
    return measures.CanonicalMeasures(auto_cache, tol=1e-11)


@pytest.fixture(scope="session")
def per_can(per_cache):
    return measures.CanonicalMeasures(per_cache, tol=1e-10)


@pytest.fixture
def rng():
    return np.random.default_rng(20240)
