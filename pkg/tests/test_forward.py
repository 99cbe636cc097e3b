import numpy as np
import pytest

from smpfield.errors import InputError, SimulationError
from smpfield.field import MartingaleField, bilinear_factor, identity_factors, scalar_gbm_factor, scalar_quadratic_factor
from smpfield.forward import (
    ControlLaw, TimeGrid, export_paths_csv, ito_integral, linear_drift, perturbation_gap, realized_covariation,
    simulate_perturbed, simulate_state, simulate_variational, variational_remainder, zero_drift,
)


def bilinear_setup():
    fld = MartingaleField([bilinear_factor([[1.0]], [[1.0]])], 1, 1)
    return fld, linear_drift([[0.0]], [[1.0]])


def test_euler_hand_example():
    # sigma = x, b = 0, x0 = 1, dW = (0.1, -0.2): 1 -> 1.1 -> 0.88
    fld = MartingaleField([scalar_gbm_factor(1.0)], 1, 1)
    grid = TimeGrid(1.0, 2)
    law = ControlLaw.constant(0.0, 2)
    dW = np.array([[[0.1], [-0.2]]])
    b = simulate_state(fld, zero_drift(1, 1), law, [1.0], grid, 1, 0, dW=dW)
    np.testing.assert_allclose(b.x[0, :, 0], [1.0, 1.1, 0.88], rtol=0, atol=1e-15)
    assert ito_integral(fld, b)[0, 0] == pytest.approx(0.1 * 1.0 - 0.2 * 1.1)


def test_increments_are_standard_normal_scaled():
    fld = MartingaleField(identity_factors(2), 2, 1)
    grid = TimeGrid(1.0, 50)
    b = simulate_state(fld, zero_drift(2, 1), ControlLaw.constant(0.0, 50), [0.0, 0.0], grid, 4000, 3)
    z = b.dW.ravel() / np.sqrt(grid.dt)
    se = 1 / np.sqrt(z.size)
    assert abs(z.mean()) < 4 * se
    assert abs(z.var() - 1.0) < 4 * np.sqrt(2) * se


def test_field_integral_has_zero_mean():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 200)
    b = simulate_state(fld, drift, ControlLaw.constant(0.5, 200), [1.0], grid, 5000, 11)
    I = ito_integral(fld, b)[:, 0]
    assert abs(I.mean()) < 3 * I.std(ddof=1) / np.sqrt(I.size)


def test_bilinear_terminal_mean():
    # b = u: E x(T) = x0 + u T
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 500)
    b = simulate_state(fld, drift, ControlLaw.constant(0.5, 500), [1.0], grid, 10000, 5)
    xT = b.x[:, -1, 0]
    assert abs(xT.mean() - 1.5) < 3 * xT.std(ddof=1) / np.sqrt(xT.size)


def test_bitwise_reproducible_across_threads():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 100)
    law = ControlLaw.from_feedback(lambda t, x: -0.5 * x, 1)
    a = simulate_state(fld, drift, law, [1.0], grid, 1001, 42, threads=1)
    b = simulate_state(fld, drift, law, [1.0], grid, 1001, 42, threads=4)
    assert a.dw_checksum() == b.dw_checksum()
    assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)


def test_paths_do_not_depend_on_batch_size():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 20)
    law = ControlLaw.constant(0.5, 20)
    small = simulate_state(fld, drift, law, [1.0], grid, 10, 9)
    large = simulate_state(fld, drift, law, [1.0], grid, 500, 9)
    assert np.array_equal(small.x, large.x[:10])


def test_blow_up_names_path_and_step():
    fld = MartingaleField([scalar_quadratic_factor(1.0)], 1, 1)
    grid = TimeGrid(1.0, 4)
    dW = np.zeros((3, 4, 1))
    dW[2, 1, 0] = 1e200
    with pytest.raises(SimulationError) as exc:
        simulate_state(fld, zero_drift(1, 1), ControlLaw.constant(0.0, 4), [1.0], grid, 3, 0, dW=dW)
    assert exc.value.path == 2 and exc.value.step == 3


def test_input_validation():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 4)
    with pytest.raises(InputError):
        simulate_state(fld, drift, ControlLaw.constant(0.0, 4), [1.0, 2.0], grid, 3, 0)
    with pytest.raises(InputError):
        simulate_state(fld, drift, ControlLaw.constant([0.0, 1.0], 4), [1.0], grid, 3, 0)
    with pytest.raises(InputError):
        TimeGrid(0.0, 10)
    with pytest.raises(InputError):
        ControlLaw("table", 1)


def test_perturbation_at_zero_eps_is_reference():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 50)
    bar = simulate_state(fld, drift, ControlLaw.constant(0.5, 50), [1.0], grid, 200, 1)
    pert = simulate_perturbed(fld, drift, bar, bar.u + 1.0, 0.0, [1.0])
    assert np.array_equal(pert.x, bar.x)
    assert perturbation_gap(bar, 0.0, pert).sup == 0.0


def test_variational_exact_for_affine_dynamics():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 100)
    bar = simulate_state(fld, drift, ControlLaw.constant(0.5, 100), [1.0], grid, 500, 2)
    direction = np.ones_like(bar.u)
    hat = simulate_variational(fld, drift, bar, direction)
    pert = simulate_perturbed(fld, drift, bar, bar.u + direction, 0.1, [1.0])
    np.testing.assert_allclose((pert.x - bar.x) / 0.1, hat.x, atol=1e-10)
    assert variational_remainder(bar, 0.1, pert, hat).sup < 1e-20


def test_crn_is_enforced():
    fld, drift = bilinear_setup()
    grid = TimeGrid(1.0, 10)
    a = simulate_state(fld, drift, ControlLaw.constant(0.5, 10), [1.0], grid, 20, 1)
    b = simulate_state(fld, drift, ControlLaw.constant(0.5, 10), [1.0], grid, 20, 2)
    with pytest.raises(InputError, match="common random numbers"):
        perturbation_gap(a, 0.1, b)


def test_covariation_error_decreases_under_refinement():
    fld = MartingaleField([scalar_gbm_factor(1.0), bilinear_factor([[0.5]], [[1.0]])], 1, 1)
    drift = zero_drift(1, 1)
    rms = []
    for n in (25, 50, 100, 200):
        grid = TimeGrid(1.0, n)
        bx = simulate_state(fld, drift, ControlLaw.constant(0.3, n), [1.0], grid, 4000, 17)
        by = simulate_state(fld, drift, ControlLaw.constant(-0.2, n), [0.5], grid, 4000, 17, dW=bx.dW)
        rms.append(realized_covariation(fld, bx, by).rms)
    assert all(b < a for a, b in zip(rms, rms[1:]))
    # realized-minus-predicted error is O(sqrt(dt))
    assert np.polyfit(np.log([25, 50, 100, 200]), np.log(rms), 1)[0] == pytest.approx(-0.5, abs=0.15)


def test_csv_export(tmp_path):
    fld, drift = bilinear_setup()
    bar = simulate_state(fld, drift, ControlLaw.constant(0.5, 3), [1.0], TimeGrid(1.0, 3), 2, 1)
    p = tmp_path / "paths.csv"
    export_paths_csv(bar, p, config_hash="abc")
    lines = p.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "path_id,t,x_1,u_1"
    assert len(lines) == 2 + 2 * 4
