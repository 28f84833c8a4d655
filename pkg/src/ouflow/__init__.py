"""Nonautonomous Ornstein-Uhlenbeck machinery: evolution families, Gaussian
moment flows, evolution systems of measures, Mehler propagators, weighted
space-time norms, and a backward Cauchy solver, with a verification CLI.
"""

from .coeffs import (CoefficientSystem, autonomous_benchmark, parse_system,
                     periodic_benchmark)
from .evolution_family import build_cache, estimate_growth_bound, evolution_matrix
from .gaussian import GaussianMeasure
from .measures import CanonicalMeasures, canonical_measure
from .moments import limit_moments, moment_pair, qinv_sqrt_norm
from .propagator import (BlackBox, Poly, SpatialTrig, TrigExp, apply,
                         apply_exact_trigexp, derivative_field,
                         operator_norm_estimate, semigroup_apply)
from .sde_oracle import exact_terminal_sample, mc_expectation, simulate_paths
from .spaces import NormSpec, SpaceTimeFunction, norm, pullback, trace_norm
from .cauchy import BackwardProblem, regularity_ratio, residual, solve_backward
from .verify_cli import SuiteConfig, fit_smoothing_exponent, main, run_suite

__version__ = "0.1.0"
