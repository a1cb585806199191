from fractions import Fraction

import pytest

from app.core import geometry, stability
from app.core.errors import Unsupported
from app.core.stability import ALPHA, BETA, CohomologyClass


def test_ring_relations():
    assert (ALPHA * ALPHA).integrate() == 0
    assert (BETA * BETA).integrate() == 0
    assert (ALPHA * BETA).integrate() == 1
    xi = BETA - ALPHA * Fraction(3, 2)
    assert (xi ** 2).integrate() == -3


def test_class_arithmetic_is_exact():
    d = CohomologyClass.divisor(Fraction(1, 3), 2)
    assert ((d * 3) ** 2).integrate() == 12
    assert (d - d) == CohomologyClass()


@pytest.mark.parametrize("a, b, scale, expected", [
    (1, 1, 1, Fraction(1)),
    (3, 2, 2, Fraction(3, 2)),
    (-2, 1, 1, Fraction(-2)),
    (0, 1, Fraction(1, 3), Fraction(0)),
])
def test_product_lambda(a, b, scale, expected):
    assert stability.lambda_sub(stability.product_data(a, b, scale)) == expected


def test_product_sections_are_semistable():
    verdict = stability.semistability_verdict(stability.product_data(1, 2))
    assert verdict.verdict == stability.SEMISTABLE
    assert verdict.lambda_x == 1


@pytest.mark.parametrize("degrees, lam_x", [([0, -1], Fraction(1, 2)), ([1, -1], Fraction(0)),
                                           ([2, 2], Fraction(-2)), ([1, 0], Fraction(-1, 2))])
def test_projective_lambda_is_minus_half_degree(degrees, lam_x):
    assert stability.lambda_sub(stability.projective_data(degrees)) == lam_x


def test_section_lambda_is_minus_summand_degree():
    data = stability.projective_data([2, -1])
    assert stability.lambda_sub(data, "P(O(2))") == -2
    assert stability.lambda_sub(data, "P(O(-1))") == 1
    with pytest.raises(ValueError):
        stability.lambda_sub(data, "P(O(5))")


def test_unbalanced_split_bundle_is_unstable_with_witness():
    verdict = stability.semistability_verdict(stability.projective_data([1, -1]))
    assert verdict.verdict == stability.UNSTABLE
    assert verdict.witness == "P(O(1))"
    assert verdict.to_dict()["lambda_Y"]["P(O(1))"] == "-1"


def test_hirzebruch_verdict_is_catalogue_relative():
    # the section P(O(0)) has lambda 0 below lambda_X = 1/2
    verdict = stability.semistability_verdict(stability.projective_data([0, -1]))
    assert verdict.verdict == stability.UNSTABLE
    assert verdict.witness == "P(O(0))"
    assert verdict.catalogue_relative


def test_balanced_split_bundle_is_semistable_and_polystable():
    assert stability.semistability_verdict(stability.projective_data([1, 1])).verdict == stability.SEMISTABLE
    result = stability.polystable_check_split([1, 1])
    assert result.polystable
    assert result.filtration == ("P(O(1)+O(1))", "P(O(1))")


def test_polystability_input_validation():
    assert not stability.polystable_check_split([2, 0]).polystable
    with pytest.raises(Unsupported):
        stability.polystable_check_split([])
    with pytest.raises(Unsupported):
        stability.polystable_check_split([1.5, 0.5])


@pytest.mark.parametrize("a", range(-2, 3))
@pytest.mark.parametrize("b", range(-2, 3))
def test_slope_bridge_over_catalogue(a, b):
    data = stability.projective_data([a, b])
    for y in data.catalogue:
        bridge = stability.slope_bridge(list(y.sub_degrees))
        assert bridge.holds
        assert stability.lambda_sub(data, y) == -bridge.slope
    assert stability.slope_bridge([a, b]).holds


@pytest.mark.parametrize("degrees", [[1, 1], [2, 0], [3, -2]])
def test_dual_projective_lambda_recovers_slope(degrees):
    data = stability.dual_projective_data(degrees, 2)
    assert data.omega_scale * stability.lambda_sub(data) == stability.bundle_slope(degrees)


def test_bundle_semistability():
    assert stability.bundle_semistability([1, 1]) == stability.SEMISTABLE
    assert stability.bundle_semistability([1, -1]) == stability.UNSTABLE
    assert stability.bundle_semistability([4]) == stability.STABLE


@pytest.mark.parametrize("a", range(-2, 3))
@pytest.mark.parametrize("b", range(1, 4))
def test_product_df_vanishes_and_rank_law(a, b):
    coeffs = stability.grr_expansion(stability.product_data(a, b))
    assert coeffs.df == 0
    assert coeffs.b0 == b and coeffs.b1 == -1
    for k in range(1, 11):
        assert coeffs.rank(k) == stability.sections_on_fiber(b * k - 2)


def test_df_under_line_bundle_powers():
    data = stability.projective_data([1, -1])
    base = stability.grr_expansion(data)
    squared = stability.grr_expansion(stability.scaled_data(data, 2))
    assert squared.degree(1) == base.degree(2)
    assert squared.rank(1) == base.rank(2)


def test_df_obstruction_verdict():
    verdict = stability.df_obstruction(stability.product_data(1, 1))
    assert not verdict.obstructed
    assert verdict.verdict == "no obstruction from DF"


def test_intersection_data_follows_model():
    model = geometry.projective_testbed(1, -1, 16, 16)
    assert stability.intersection_data(model).tag == "P(O(1)+O(-1))"
    assert stability.intersection_data(geometry.product_testbed(2, 3, 16, 16)).tag == "O(2,3)"


def test_non_ample_line_bundle_is_rejected():
    with pytest.raises(ValueError):
        stability.product_data(1, 0)
