import numpy as np
import pytest

from app.core import numerics
from app.core.errors import AdmissibilityError, NonFiniteInput


def test_fd_weights_centered_second_derivative():
    weights = numerics.fd_weights([-1, 0, 1], 2)
    assert weights == pytest.approx([1.0, -2.0, 1.0])


def test_axis_rejects_small_size():
    with pytest.raises(ValueError):
        numerics.periodic_axis(4)


def test_periodic_derivative_is_spectral():
    axis = numerics.periodic_axis(32)
    x = axis.points()
    f = np.sin(2 * np.pi * 3 * x)
    df = numerics.axis_derivative(f, axis, 0)
    assert np.max(np.abs(df - 6 * np.pi * np.cos(2 * np.pi * 3 * x))) < 1e-9


def test_chart_derivative_fourth_order():
    errors = []
    for n in (32, 64):
        axis = numerics.chart_axis(n, -1.0, 1.0)
        x = axis.points()
        d2 = numerics.axis_derivative(np.sin(x), axis, 0, 2)
        errors.append(np.max(np.abs(d2 + np.sin(x))))
    # one-sided boundary rows limit the observed order
    assert errors[1] < errors[0] / 8


def test_differentiate_wirtinger_on_polynomial():
    axis = numerics.chart_axis(16, -1.0, 1.0)
    grid = numerics.Grid2D((axis, axis))
    x, y = grid.mesh()
    z = x + 1j * y
    f = z ** 2
    assert np.max(np.abs(numerics.differentiate(f, grid, 0, "d") - 2 * z)) < 1e-10
    assert np.max(np.abs(numerics.differentiate(f, grid, 0, "dbar"))) < 1e-10


def test_ddbar_of_squared_modulus_is_one():
    axis = numerics.chart_axis(16, -1.0, 1.0)
    grid = numerics.Grid2D((axis, axis))
    x, y = grid.mesh()
    dbar = numerics.differentiate(x ** 2 + y ** 2, grid, 0, "dbar")
    assert np.max(np.abs(numerics.differentiate(dbar, grid, 0, "d") - 1.0)) < 1e-9


def test_wirtinger_derivatives_of_plane_wave():
    axis = numerics.periodic_axis(32, 0.0, 2 * np.pi)
    grid = numerics.Grid2D((axis, axis))
    x, y = grid.mesh()
    f = np.exp(1j * (x + y))
    assert np.max(np.abs(numerics.differentiate(f, grid, 0, "d") - 0.5 * (1 + 1j) * f)) < 1e-10
    assert np.max(np.abs(numerics.differentiate(f, grid, 0, "dbar") - 0.5 * (1j - 1) * f)) < 1e-10


def test_d_and_dbar_commute():
    axis = numerics.periodic_axis(32)
    grid = numerics.Grid2D((axis, axis))
    x, y = grid.mesh()
    f = np.cos(2 * np.pi * x) * np.sin(4 * np.pi * y) + np.sin(2 * np.pi * (x + y))
    d_then_dbar = numerics.differentiate(numerics.differentiate(f, grid, 0, "d"), grid, 0, "dbar")
    dbar_then_d = numerics.differentiate(numerics.differentiate(f, grid, 0, "dbar"), grid, 0, "d")
    assert np.max(np.abs(d_then_dbar - dbar_then_d)) < 1e-8


def test_differentiate_rejects_missing_axis():
    axis = numerics.chart_axis(16, -1.0, 1.0)
    with pytest.raises(ValueError):
        numerics.differentiate(np.zeros((16,)), numerics.Grid2D((axis,)), 0)


def test_non_finite_field_reports_location():
    axis = numerics.periodic_axis(8)
    field = np.zeros(8)
    field[5] = np.nan
    with pytest.raises(NonFiniteInput) as info:
        numerics.axis_derivative(field, axis, 0)
    assert info.value.location == (5,)


def test_quadrature_trapezoid_and_negative_measure():
    axis = numerics.chart_axis(101, 0.0, 1.0)
    x = axis.points()
    assert numerics.quadrature(x ** 2, np.ones_like(x), axis) == pytest.approx(1 / 3, abs=1e-4)
    with pytest.raises(ValueError):
        numerics.quadrature(x, -np.ones_like(x), axis)


def test_hermitian_inverse_of_identity_and_diagonal():
    assert numerics.hermitian_inverse(np.eye(3)) == pytest.approx(np.eye(3))
    assert numerics.hermitian_inverse(np.diag([2.0, 4.0])) == pytest.approx(np.diag([0.5, 0.25]))


def test_hermitian_inverse_residual_and_involution():
    rng = np.random.default_rng(3)
    raw = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    mat = raw @ np.conj(raw.T) + np.eye(4)
    inv = numerics.hermitian_inverse(mat)
    assert np.max(np.abs(mat @ inv - np.eye(4))) < 1e-10
    assert np.max(np.abs(numerics.hermitian_inverse(inv) - mat)) < 1e-9 * np.max(np.abs(mat))
    assert numerics.is_hermitian(inv)


def test_hermitian_inverse_rejects_indefinite():
    with pytest.raises(AdmissibilityError) as info:
        numerics.hermitian_inverse(np.diag([1.0, -0.5]))
    assert info.value.eigenvalue == pytest.approx(-0.5)


def test_schur_gap_semidefinite_and_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        block = numerics.random_block_matrix(rng)
        gap = numerics.schur_gap(block)
        assert np.linalg.eigvalsh(gap)[0] >= -1e-10
        assert np.max(np.abs(gap - numerics.schur_gap_closed_form(block))) < 1e-10


def test_schur_gap_vanishes_without_coupling():
    # A3 = 0 and B3 = 0 leave nothing beyond the B2 block
    mat = np.eye(6, dtype=complex)
    mat[0, 2] = mat[2, 0] = 0.3
    block = numerics.HermitianBlockMatrix(mat, 2, 2)
    assert np.max(np.abs(numerics.schur_gap(block))) < 1e-14


def test_block_matrix_rejects_bad_partition():
    with pytest.raises(ValueError):
        numerics.HermitianBlockMatrix(np.eye(4), 3, 2)
