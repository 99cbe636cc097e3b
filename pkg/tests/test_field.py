import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpfield.errors import InputError
from smpfield.field import (
    MartingaleField, SigmaFactor, bilinear_factor, condition_q_residual, constant_factor, gradient_mismatch,
    identity_factors, increment, linear_factor, local_characteristic, make_factors, polarization_constant,
    scalar_gbm_factor, scalar_quadratic_factor, trace_form_grad_u, trace_form_grad_x,
)


def random_bilinear_field(rng, d, k, m, offset=True):
    factors = [bilinear_factor(rng.normal(size=(d, d)), rng.normal(size=(d, k)), rng.normal(size=(d, d, k)),
                               rng.normal(size=d) if offset else None) for _ in range(m)]
    return MartingaleField(factors, d, k)


def test_identity_field_characteristic():
    fld = MartingaleField(identity_factors(2), 2, 1)
    q = local_characteristic(fld, 0.0, np.array([3.0, -1.0]), np.array([2.0]), np.zeros(2), np.zeros(1))
    np.testing.assert_array_equal(q, np.eye(2))


def test_diagonal_factor_example():
    # sigma_1 = (x_1, 0), sigma_2 = (0, x_2): q = diag(x_1 y_1, x_2 y_2)
    f1 = SigmaFactor(lambda t, x, u: x * np.array([1.0, 0.0]), lambda t, x, u: np.diag([1.0, 0.0]),
                     lambda t, x, u: np.zeros((2, 1)))
    f2 = SigmaFactor(lambda t, x, u: x * np.array([0.0, 1.0]), lambda t, x, u: np.diag([0.0, 1.0]),
                     lambda t, x, u: np.zeros((2, 1)))
    fld = MartingaleField([f1, f2], 2, 1)
    q = local_characteristic(fld, 0.0, np.array([1.0, 2.0]), np.zeros(1), np.array([3.0, 5.0]), np.zeros(1))
    np.testing.assert_array_equal(q, np.array([[3.0, 0.0], [0.0, 10.0]]))


def test_shape_validation():
    bad = SigmaFactor(lambda t, x, u: np.zeros(3), lambda t, x, u: np.zeros((3, 3)), lambda t, x, u: np.zeros((3, 1)))
    with pytest.raises(InputError, match="expected"):
        MartingaleField([bad], 2, 1)
    with pytest.raises(InputError):
        MartingaleField([], 1, 1)
    fld = MartingaleField([scalar_gbm_factor(1.0)], 1, 1)
    with pytest.raises(InputError):
        fld.sigma(0.0, np.zeros(2), np.zeros(1))
    with pytest.raises(InputError):
        increment(fld, 0.0, np.zeros(1), np.zeros(1), np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_transpose_symmetry_and_psd(d, k, m, seed):
    rng = np.random.default_rng(seed)
    fld = random_bilinear_field(rng, d, k, m)
    x, u = rng.normal(size=(40, d)), rng.normal(size=(40, k))
    y, v = rng.normal(size=(40, d)), rng.normal(size=(40, k))
    qxy = local_characteristic(fld, 0.3, x, u, y, v)
    qyx = local_characteristic(fld, 0.3, y, v, x, u)
    assert np.max(np.abs(qxy - np.swapaxes(qyx, -1, -2))) <= 1e-12 * max(1.0, np.max(np.abs(qxy)))
    qxx = local_characteristic(fld, 0.3, x, u, x, u)
    eig = np.linalg.eigvalsh(qxx)
    assert eig.min() >= -1e-10 * max(1.0, eig.max())


def test_condition_residual_zero_for_affine_factors():
    rng = np.random.default_rng(1)
    fld = MartingaleField([linear_factor(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), rng.normal(size=2))
                           for _ in range(3)], 2, 1)
    n = 1000
    res = condition_q_residual(fld, 0.0, rng.normal(size=(n, 2)), rng.normal(size=(n, 1)),
                               rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), rng.normal(size=(n, 2, 2)))
    assert np.max(np.abs(res)) <= 1e-12 * 50


def test_condition_residual_quadratic_factor():
    fld = MartingaleField([scalar_quadratic_factor()], 1, 1)
    r = condition_q_residual(fld, 0.0, np.array([1.0]), np.zeros(1), np.array([2.0]), np.zeros(1), np.eye(1))
    # sigma = x^2 at x = 1, y = 2: q* = x^2 y^2, so 4 - 1 - 2 * (2 - 1) = 1
    assert r == pytest.approx(1.0)


def test_polarization_constant_linear_field():
    # for sigma = c x the polarization combination is c^2 (x - y)^2: constant c^2
    fld = MartingaleField([scalar_gbm_factor(3.0)], 1, 1)
    rng = np.random.default_rng(0)
    c = polarization_constant(fld, 0.0, rng.normal(size=(100, 1)), np.zeros((100, 1)),
                              rng.normal(size=(100, 1)), np.zeros((100, 1)))
    assert c == pytest.approx(9.0)


@pytest.mark.parametrize("factor", [
    bilinear_factor([[1.0, 0.5], [0.0, 2.0]], [[1.0], [0.3]], np.arange(4.0).reshape(2, 2, 1) / 4, [0.1, 0.2]),
    linear_factor([[0.0, 1.0], [1.0, 0.0]], [[2.0], [1.0]]),
])
def test_analytic_gradients_match_finite_differences(factor):
    rng = np.random.default_rng(2)
    for _ in range(20):
        assert gradient_mismatch(factor, 0.1, rng.normal(size=2), rng.normal(size=1)) < 1e-4


def test_scalar_factor_gradients():
    for f in (scalar_gbm_factor(0.7), scalar_quadratic_factor(1.3)):
        assert gradient_mismatch(f, 0.0, np.array([0.8]), np.array([0.1])) < 1e-4


def test_finite_difference_factor_is_flagged():
    fd = SigmaFactor.from_function(lambda t, x, u: np.sin(x) * u, 1, 1)
    fld = MartingaleField([fd], 1, 1)
    assert fld.uses_finite_differences
    g = fld.sigma_x(0.0, np.array([0.4]), np.array([2.0]))
    assert g[0, 0, 0] == pytest.approx(2.0 * np.cos(0.4), rel=1e-8)


def test_trace_form_gradient_is_covariation_density():
    # tfgx . h must equal sum_k (z sigma_k) . (d_x sigma_k h) for every h
    rng = np.random.default_rng(3)
    fld = random_bilinear_field(rng, 3, 2, 2)
    x, u = rng.normal(size=3), rng.normal(size=2)
    z, h, w = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=2)
    s, sx, su = fld.sigma(0.0, x, u), fld.sigma_x(0.0, x, u), fld.sigma_u(0.0, x, u)
    direct_x = sum((z @ s[:, k]) @ (sx[k] @ h) for k in range(2))
    direct_u = sum((z @ s[:, k]) @ (su[k] @ w) for k in range(2))
    assert trace_form_grad_x(fld, z, 0.0, x, u) @ h == pytest.approx(direct_x, rel=1e-12)
    assert trace_form_grad_u(fld, z, 0.0, x, u) @ w == pytest.approx(direct_u, rel=1e-12)


def test_trace_form_gradient_matches_characteristic_derivative():
    # gradient in the second slot of tr[z q(xbar, ubar, x, u)] at (x, u) = (xbar, ubar)
    rng = np.random.default_rng(4)
    fld = random_bilinear_field(rng, 2, 1, 3)
    xb, ub, z = rng.normal(size=2), rng.normal(size=1), rng.normal(size=(2, 2))

    def tr(x, u):
        return np.sum(z.T * local_characteristic(fld, 0.0, xb, ub, x, u))

    h = 1e-6
    fdx = [(tr(xb + h * e, ub) - tr(xb - h * e, ub)) / (2 * h) for e in np.eye(2)]
    fdu = [(tr(xb, ub + h) - tr(xb, ub - h)) / (2 * h)]
    np.testing.assert_allclose(trace_form_grad_x(fld, z, 0.0, xb, ub), fdx, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(trace_form_grad_u(fld, z, 0.0, xb, ub), fdu, rtol=1e-6, atol=1e-8)


def test_constant_factor_has_zero_gradients():
    fld = MartingaleField([constant_factor([1.0, 2.0])], 2, 1)
    z = np.ones((2, 2))
    assert np.all(trace_form_grad_x(fld, z, 0.0, np.ones((5, 2)), np.ones((5, 1))) == 0)
    assert np.all(trace_form_grad_u(fld, z, 0.0, np.ones((5, 2)), np.ones((5, 1))) == 0)


def test_factor_library():
    fs = make_factors("identity", {"dim": 3})
    assert len(fs) == 3
    with pytest.raises(InputError, match="unknown factor"):
        make_factors("nope", {})
    with pytest.raises(InputError, match="missing parameter"):
        make_factors("linear", {"C": [[1.0]]})
