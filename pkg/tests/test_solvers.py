import numpy as np
import pytest
from scipy.special import expit

from app.core import functionals, geometry, solvers, stability
from app.core.errors import FlowStalled, InvariantViolation
from app.core.geometry import compute_jets


@pytest.fixture(scope="module")
def product():
    return geometry.product_testbed(1, 1, 32, 32)


@pytest.fixture(scope="module")
def zero(product):
    return compute_jets(product, np.zeros(product.grid.shape))


@pytest.fixture(scope="module")
def perturbed_flow(product):
    start = compute_jets(product, geometry.random_bump(product, np.random.default_rng(0), 0.2))
    return solvers.gradient_flow(start, product)


def test_geodesic_einstein_start_takes_no_steps(product, zero):
    result = solvers.gradient_flow(zero, product)
    assert result.converged
    assert result.iterations == 0
    assert result.scheme == solvers.SEMI_IMPLICIT


def test_flow_converges_with_monotone_functional(perturbed_flow):
    assert perturbed_flow.converged
    assert perturbed_flow.residual <= solvers.DEFAULT_TOL_GE
    assert np.all(np.diff(perturbed_flow.values) <= 1e-12)
    assert perturbed_flow.lam == 1.0


def test_flow_restart_at_limit_is_stationary(product, perturbed_flow):
    restart = solvers.gradient_flow(perturbed_flow.final, product)
    assert restart.iterations == 0


def test_flow_dissipation_accounts_for_the_drop(perturbed_flow):
    assert perturbed_flow.energy_identity_gap() < 0.1


def test_flow_limit_is_a_minimum(product, perturbed_flow):
    rng = np.random.default_rng(5)
    candidates = [compute_jets(product, perturbed_flow.final.u + geometry.random_bump(product, rng, 0.1))
                  for _ in range(3)]
    assert solvers.check_minimum(perturbed_flow.final, candidates, product) >= -1e-3


def test_check_minimum_flags_undercut(product, zero):
    higher = compute_jets(product, geometry.random_bump(product, np.random.default_rng(2), 0.2))
    with pytest.raises(InvariantViolation):
        solvers.check_minimum(higher, [zero], product, tol=1e-12)


def test_flow_stops_at_max_iter(product):
    start = compute_jets(product, geometry.random_bump(product, np.random.default_rng(1), 0.2))
    result = solvers.gradient_flow(start, product, solvers.FlowParams(max_iter=0))
    assert not result.converged
    assert result.iterations == 0


def test_flow_stalls_below_dt_min(product):
    start = compute_jets(product, geometry.random_bump(product, np.random.default_rng(1), 0.2))
    params = solvers.FlowParams(dt0=10.0, dt_min=1.0, dt_max=10.0, scheme=solvers.EXPLICIT)
    with pytest.raises(FlowStalled) as info:
        solvers.gradient_flow(start, product, params)
    assert info.value.diagnostics["dt"] < 1.0


def test_flow_params_validation():
    with pytest.raises(ValueError):
        solvers.FlowParams(scheme="runge-kutta")
    with pytest.raises(ValueError):
        solvers.FlowParams(dt_min=1.0, dt_max=0.5)


def test_flow_params_reject_residual_growth_below_one():
    with pytest.raises(ValueError):
        solvers.FlowParams(residual_growth=1.0)


def test_flow_holds_base_chart_ends(product, perturbed_flow):
    free = solvers.flow_region(product)
    assert not free[:2].any() and not free[-2:].any()
    assert free[2:-2].all()
    start = geometry.random_bump(product, np.random.default_rng(0), 0.2)
    np.testing.assert_array_equal(perturbed_flow.final.u[~free], start[~free])


def test_flow_residual_is_measured_on_the_flow_region(product, perturbed_flow):
    assert solvers.flow_residual(perturbed_flow.final, product, 1.0) == pytest.approx(
        perturbed_flow.residual, abs=1e-14)


def test_torus_flow_reaches_a_z_independent_potential():
    model = geometry.torus_testbed(32, 32)
    assert solvers.flow_region(model).all()
    x, t = model.grid.mesh()
    start = compute_jets(model, 0.1 * np.cos(2 * np.pi * x) * np.exp(-t ** 2 / 4.5))
    result = solvers.gradient_flow(start, model)
    assert result.scheme == solvers.SEMI_IMPLICIT
    assert result.lam == 0.0
    assert result.converged
    assert np.all(np.diff(result.values) <= 1e-12)
    assert np.ptp(result.final.u, axis=0).max() < 1e-4


def test_unstable_projective_flow_does_not_converge():
    model = geometry.projective_testbed(1, -1, 32, 32)
    start = compute_jets(model, np.zeros(model.grid.shape))
    try:
        result = solvers.gradient_flow(start, model, solvers.FlowParams(max_iter=60))
    except FlowStalled as exc:
        residual = exc.diagnostics["residual"]
    else:
        assert not result.converged
        residual = result.residual
    assert residual > solvers.DEFAULT_TOL_GE


def test_flow_limit_is_semistable_with_equality_on_sections(product, perturbed_flow):
    data = stability.product_data(1, 1)
    verdict = stability.semistability_verdict(data)
    assert verdict.verdict != stability.UNSTABLE
    rows = solvers.flow_region(product)[:, 0]
    for end, name in (("zero", "section v=0"), ("infinity", "section v=inf")):
        restriction = geometry.restrict_to_section(perturbed_flow.final, end)
        lam_y = functionals.numerical_lambda_section(restriction.second_derivative, product)
        assert lam_y == pytest.approx(float(verdict.slopes[name]), abs=1e-3)
        assert lam_y >= perturbed_flow.lam - 1e-3
        # lambda_Y = lambda_X, so the limit restricts to a GE metric on the section
        assert np.max(np.abs(restriction.trace[rows] - perturbed_flow.lam)) < 1e-3


def test_constant_shift_geodesic_is_exact(product, zero):
    shifted = compute_jets(product, np.full(product.grid.shape, 0.5))
    path = solvers.epsilon_geodesic(zero, shifted, 1e-3, product, 9)
    exact = solvers.exact_dilation_geodesic(product, 0.5, 1e-3, 9)
    assert path.max_residual <= 1e-8
    assert path.sup_distance(exact) < 1e-5


@pytest.fixture(scope="module")
def bump_target(product):
    return compute_jets(product, geometry.random_bump(product, np.random.default_rng(4), 0.1))


@pytest.fixture(scope="module")
def bump_geodesic(product, zero, bump_target):
    return solvers.epsilon_geodesic(zero, bump_target, 1e-4, product, 9)


def test_epsilon_geodesic_convexity(product, bump_geodesic):
    assert bump_geodesic.converged
    assert bump_geodesic.max_residual <= 1e-8
    report = solvers.convexity_report(bump_geodesic, product)
    assert report.min_second_difference >= -1e-3
    assert len(report.rows()) == 9


def test_convexity_lower_bound_scales_with_epsilon(product, bump_geodesic):
    report = solvers.convexity_report(bump_geodesic, product)
    assert report.bound_constant >= 0.0
    assert report.lower_bound == pytest.approx(-report.bound_constant * 1e-4)
    assert report.min_second_difference >= report.lower_bound - 1e-3
    times = np.linspace(0.0, 1.0, 5)
    manual = solvers.ConvexityReport(times, np.zeros(5), np.zeros(3), 2.0, 1e-3)
    assert manual.lower_bound == pytest.approx(-2e-3)


def test_epsilon_sequence_is_cauchy(product, zero, bump_target, bump_geodesic):
    coarse = solvers.epsilon_geodesic(zero, bump_target, 1e-2, product, 9)
    middle = solvers.epsilon_geodesic(zero, bump_target, 1e-3, product, 9)
    assert coarse.converged and middle.converged
    first = coarse.sup_distance(middle)
    second = middle.sup_distance(bump_geodesic)
    assert first < 1e-2
    assert second < 0.5 * first


def test_epsilon_must_lie_in_unit_interval(product, zero):
    for eps in (0.0, -1e-3, 1.5):
        with pytest.raises(ValueError):
            solvers.epsilon_geodesic(zero, zero, eps, product)


def test_convexity_report_needs_five_samples(product):
    path = solvers.exact_dilation_geodesic(product, 0.1, 1e-2, 3)
    with pytest.raises(ValueError):
        solvers.convexity_report(path, product)


def test_fiber_shift_geodesic_is_flat_along_the_path():
    model = geometry.product_testbed(1, 2, 32, 48, fiber_extent=20.0)
    path = solvers.fiber_shift_geodesic(model, 1.0)
    report = solvers.convexity_report(path, model, functionals.topological_lambda(model))
    assert np.max(np.abs(report.second_differences)) < 1e-3


def test_fiber_shift_geodesic_uses_closed_form_jets():
    model = geometry.product_testbed(1, 2, 32, 48, fiber_extent=20.0)
    path = solvers.fiber_shift_geodesic(model, 1.0, 5)
    _, t = model.grid.mesh()
    end = path.potentials[-1]
    assert np.all(end.phi_zv == 0.0)
    np.testing.assert_allclose(end.phi_vv, 2.0 * expit(t + 1.0) * expit(-t - 1.0), rtol=1e-14)
    np.testing.assert_allclose(end.u[:, -1], 2.0, atol=1e-7)
    np.testing.assert_array_equal(path.potentials[0].u, 0.0)


def test_fiber_shift_needs_split_reference():
    with pytest.raises(ValueError):
        solvers.fiber_shift_geodesic(geometry.projective_testbed(1, -1, 16, 16), 1.0)
