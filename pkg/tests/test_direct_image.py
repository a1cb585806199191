import numpy as np
import pytest

from app.core import direct_image, geometry
from app.core.errors import AdmissibilityError, DomainTruncationError, Unsupported
from app.core.finsler import FinslerMetric, kobayashi_curvature
from app.core.geometry import compute_jets


@pytest.fixture(scope="module")
def product():
    return geometry.product_testbed(1, 3, 64, 128, 12.0, 40.0)


@pytest.fixture(scope="module")
def flat_bundle(product):
    return direct_image.l2_metric(product, compute_jets(product, np.zeros(product.grid.shape)))


def test_l2_metric_matches_closed_form(product, flat_bundle):
    s = product.base_axis.points()
    expected = direct_image.closed_form_product_metric(1.0, 3, s)
    diag = np.real(np.diagonal(flat_bundle.h(), axis1=1, axis2=2))
    assert flat_bundle.rank == 2
    assert np.max(np.abs(diag / expected - 1.0)) < 1e-6


def test_closed_form_constants():
    coeffs = direct_image.closed_form_product_metric(0.0, 3, np.zeros(1))[0]
    assert coeffs == pytest.approx([np.pi / 2, np.pi / 2])


def test_curvature_is_twist_times_identity(flat_bundle):
    curvature = direct_image.chern_curvature(flat_bundle)
    assert np.max(np.abs(curvature.eigenvalues() - 1.0)) < 1e-4
    assert curvature.hermitian_gap() < 1e-12
    assert direct_image.hermitian_einstein_residual(flat_bundle) < 1e-4


def test_curvature_is_frame_independent(flat_bundle):
    basis = np.array([[1.0, 0.5j], [0.25, 2.0]])
    moved = direct_image.chern_curvature(flat_bundle.transformed(basis))
    assert not flat_bundle.transformed(basis).is_diagonal
    assert np.max(np.abs(moved.eigenvalues() - 1.0)) < 1e-6


def test_chern_weil_degree(flat_bundle):
    assert direct_image.chern_weil_degree(flat_bundle) == pytest.approx(2.0, abs=1e-4)


def test_chart_overlap_of_split_metric(flat_bundle):
    report = direct_image.chart_overlap(flat_bundle, [1, 1])
    assert report.metric_gap < 1e-10
    assert report.curvature_gap < 1e-4
    assert report.end_slope < 1e-4
    assert direct_image.chart_overlap_residual(flat_bundle, [1, 1]) < 1e-4
    with pytest.raises(Unsupported):
        direct_image.chart_overlap(flat_bundle, [1])


def test_chart_overlap_flags_wrong_degrees(flat_bundle):
    report = direct_image.chart_overlap(flat_bundle, [2, 2])
    assert report.end_slope > 0.5
    assert report.metric_gap < 1e-10


def test_fiber_curvature_of_flat_metric(product, flat_bundle):
    zero = compute_jets(product, np.zeros(product.grid.shape))
    np.testing.assert_allclose(direct_image.fiber_curvature(flat_bundle, zero), 1.0, atol=1e-12)
    gaps = direct_image.curvature_lower_bound_gaps(flat_bundle, zero)
    assert np.max(np.abs(gaps)) < 1e-10


def test_fiber_curvature_matches_base_differences(product):
    p = compute_jets(product, geometry.random_bump(product, np.random.default_rng(7), 0.15))
    bundle = direct_image.l2_metric(product, p)
    chern = np.real(np.diagonal(direct_image.chern_curvature(bundle).endomorphism, axis1=1, axis2=2))
    rows = np.abs(product.base_axis.points()) <= 4.0
    gap = np.abs(direct_image.fiber_curvature(bundle, p) - chern)[rows]
    assert gap.max() < 2e-2


@pytest.mark.parametrize("seed", range(3))
def test_curvature_lower_bound(product, seed):
    p = compute_jets(product, geometry.random_bump(product, np.random.default_rng(seed), 0.15))
    bundle = direct_image.l2_metric(product, p)
    assert direct_image.curvature_lower_bound_gap(bundle, p, product) >= -1e-4


def test_rank_zero_direct_image_is_unsupported():
    model = geometry.product_testbed(1, 1, 16, 16)
    with pytest.raises(Unsupported):
        direct_image.l2_metric(model, compute_jets(model, np.zeros(model.grid.shape)))


def test_short_fiber_chart_is_truncated():
    model = geometry.product_testbed(1, 3, 16, 64, 12.0, 12.0)
    with pytest.raises(DomainTruncationError) as info:
        direct_image.l2_metric(model, compute_jets(model, np.zeros(model.grid.shape)))
    assert info.value.boundary_value > 1e-14


def test_torus_base_is_unsupported():
    model = geometry.torus_testbed(16, 16)
    with pytest.raises(Unsupported):
        direct_image.l2_metric(model, compute_jets(model, np.zeros(model.grid.shape)))


# --- Finsler metrics and the bridge ---

def test_finsler_metric_validation():
    with pytest.raises(AdmissibilityError):
        FinslerMetric((1, 1), epsilon=0.3)
    with pytest.raises(Unsupported):
        FinslerMetric((1, 1, 1))
    with pytest.raises(ValueError):
        FinslerMetric((1, 1), weights=(1.0, 0.0))


@pytest.mark.parametrize("epsilon", [0.0, 0.1, -0.1])
def test_kobayashi_identity(epsilon):
    model = geometry.projective_testbed(1, 1, 32, 32)
    curvature = kobayashi_curvature(FinslerMetric((1, 1), epsilon=epsilon), model)
    assert curvature.identity_gap() < 1e-8


def test_hermitian_einstein_bridge_on_equal_degrees():
    model = geometry.projective_testbed(1, 1, 32, 32)
    report = direct_image.finsler_einstein_bridge(FinslerMetric((1, 1)), model, n_base=32)
    assert report.ge_residual <= 1e-3
    assert report.he_residual <= 1e-3
    assert report.polystable
    assert report.consistent


def test_bridge_detects_unequal_degrees():
    model = geometry.projective_testbed(2, 0, 32, 32)
    report = direct_image.finsler_einstein_bridge(FinslerMetric((2, 0)), model, n_base=32)
    assert report.he_residual >= 0.1
    assert not report.ge_ok
    assert not report.polystable
    assert report.consistent
    assert report.transfer_gap < 1e-8
    assert report.transfer_spread > 1.0


def test_transfer_is_constant_on_equal_degrees():
    model = geometry.projective_testbed(1, 1, 32, 32)
    report = direct_image.finsler_einstein_bridge(FinslerMetric((1, 1)), model, n_base=32)
    assert report.transfer_gap < 1e-8
    assert report.transfer_spread < 1e-9


def test_unstable_bundle_has_no_einstein_side():
    model = geometry.projective_testbed(1, -1, 32, 32)
    report = direct_image.finsler_einstein_bridge(FinslerMetric((1, -1)), model, n_base=32)
    assert report.he_residual > 0.05
    assert report.ge_residual > 0.05
    assert not report.polystable
    assert report.consistent


@pytest.mark.parametrize("epsilon", [0.0, 0.1, -0.1])
def test_unstable_bundle_ge_residual_over_finsler_family(epsilon):
    model = geometry.projective_testbed(1, -1, 32, 32)
    curvature = kobayashi_curvature(FinslerMetric((1, -1), epsilon=epsilon), model)
    assert np.max(np.abs(curvature.c_trace)) > 0.05


@pytest.mark.parametrize("epsilon", [0.0, 0.1, -0.1])
def test_pseudo_convexity_is_relative_to_the_weights(epsilon):
    model = geometry.projective_testbed(2, 0, 32, 32)
    curvature = kobayashi_curvature(FinslerMetric((2, 0), epsilon=epsilon), model)
    assert curvature.relative_fiber_eigenvalue.min() > 0.5
    assert np.all(np.isfinite(curvature.c_trace))
    assert curvature.identity_gap() < 1e-6


def test_bridge_is_scale_invariant():
    model = geometry.projective_testbed(1, 1, 32, 32)
    base = direct_image.finsler_einstein_bridge(FinslerMetric((1, 1)), model, n_base=32)
    scaled = direct_image.finsler_einstein_bridge(FinslerMetric((1, 1)).scaled(2.5), model, n_base=32)
    assert scaled.ge_residual == pytest.approx(base.ge_residual, abs=1e-9)
    assert scaled.he_residual == pytest.approx(base.he_residual, abs=1e-9)


def test_non_hermitian_finsler_metric_has_no_l2_side():
    model = geometry.projective_testbed(1, 1, 32, 32)
    report = direct_image.finsler_einstein_bridge(FinslerMetric((1, 1), epsilon=0.1), model, n_base=32)
    assert report.he_residual is None
    assert report.to_dict()["he_ok"] is None


def test_mixed_twists_forbid_frame_changes():
    bundle = direct_image.split_hermitian_bundle(FinslerMetric((2, 0)), n_base=32)
    with pytest.raises(Unsupported):
        bundle.transformed(np.eye(2))


def test_bridge_rejects_a_model_for_other_degrees():
    model = geometry.projective_testbed(1, 1, 32, 32)
    with pytest.raises(ValueError):
        direct_image.finsler_einstein_bridge(FinslerMetric((2, 0)), model, n_base=32)
