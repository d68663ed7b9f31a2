"""Finite-difference gradient checks, one seed's worth.

The acceptance gate runs seeds 0-4 plus the full model; here a single
seed keeps the unit loop fast while still failing on any backward-pass
regression.
"""

import numpy as np
import pytest

from vfseg.checks import TOLERANCE, format_results, model_gradcheck, run_suite
from vfseg.nn.gradcheck import finite_difference_grad, max_rel_err


def test_layer_suite_seed_zero():
    results = run_suite(seeds=(0,), include_model=False)
    failed = [r for r in results if not r.passed]
    assert not failed, format_results(failed)


def test_model_gradcheck_seed_zero():
    assert model_gradcheck(0) <= TOLERANCE


def test_finite_difference_matches_known_quadratic():
    # f(x) = sum(3 x^2): exact gradient 6x, so fd error is pure truncation
    x = np.array([1.0, -2.0, 0.5])
    grad = finite_difference_grad(lambda v: float(np.sum(3.0 * v * v)), x, h=1e-6)
    assert max_rel_err(6.0 * x, grad) < 1e-9


def test_max_rel_err_has_unit_floor():
    # tiny absolute disagreement on tiny values must not explode
    a = np.array([1e-12])
    n = np.array([3e-12])
    assert max_rel_err(a, n) == pytest.approx(2e-12)
