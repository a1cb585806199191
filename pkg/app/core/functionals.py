"""
Fiber integrals and the Donaldson-type functional.

Reduced conventions (m = n = 1): a fiber (1,1)-coefficient f integrates to
pi_* = 2 pi * int f dt, base coefficients integrate against nu_b db, and the
mixed wedge of two potentials has density

    W(phi, psi) = phi_bb psi_tt + psi_bb phi_tt - 2 phi_bt psi_bt.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core import numerics, stability
from app.core.errors import Unsupported
from app.core.geometry import (FIBER_DENSITY, FibrationModel, PotentialField,
                               geodesic_curvature)

logger = logging.getLogger(__name__)


def _fiber_integral(values: np.ndarray, model: FibrationModel) -> np.ndarray:
    return FIBER_DENSITY * numerics.integrate_along(values, model.fiber_axis, 1)


def base_integral(values: np.ndarray, model: FibrationModel) -> float:
    """int_M f nu_b db for a base (1,1)-coefficient f."""
    measure = np.full(values.shape, model.base_density)
    return numerics.quadrature(values, measure, model.base_axis)


def pushforward(coefficients: np.ndarray, model: FibrationModel, fiber_degree: int = 1) -> np.ndarray:
    """Fiber integral of a form whose fiber part is a top-degree coefficient.

    In invariant modes the result is 2 pi int f dt per base sample. In full mode
    the coefficient of i dv ^ dvbar is integrated over the chart square.
    """
    if fiber_degree < model.n:
        raise ValueError(f"form has fiber degree {fiber_degree} < {model.n}; push-forward vanishes "
                         "only for forms of full fiber degree")
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.shape != model.grid.shape:
        raise ValueError("form samples do not match the model grid")
    if model.reduced:
        return _fiber_integral(coefficients, model)
    axes = model.grid.axes
    inner = numerics.integrate_along(coefficients, axes[3], 3)
    # i dv ^ dvbar = 2 dxi ^ deta
    return 2.0 * numerics.integrate_along(inner, axes[2], 2)


def _require_reduced(model: FibrationModel):
    if not model.reduced:
        raise Unsupported("functionals are evaluated in the invariant modes")


def _reference_field(model: FibrationModel) -> PotentialField:
    jets = model.reference_jets
    return PotentialField(model, np.zeros(model.grid.shape), jets["bb"], jets["bt"],
                          jets["tt"], 1.0 / jets["tt"])


def _resolve(model: FibrationModel, reference: Optional[PotentialField]) -> PotentialField:
    return _reference_field(model) if reference is None else reference


def mixed_wedge(p: PotentialField, q: PotentialField) -> np.ndarray:
    return p.phi_zz * q.phi_vv + q.phi_zz * p.phi_vv - 2.0 * p.phi_zv * q.phi_zv


def energy(p: PotentialField, model: FibrationModel,
           reference: Optional[PotentialField] = None) -> np.ndarray:
    """E(phi, psi) = 1/2 pi_*((phi - psi)(i ddbar phi + i ddbar psi)) per base sample."""
    _require_reduced(model)
    ref = _resolve(model, reference)
    diff = p.u - ref.u
    return 0.5 * _fiber_integral(diff * (p.phi_vv + ref.phi_vv), model)


def energy1(p: PotentialField, model: FibrationModel,
            reference: Optional[PotentialField] = None) -> np.ndarray:
    """E_1(phi, psi) = 1/3 pi_*((phi - psi) sum_j (i ddbar phi)^j (i ddbar psi)^(2-j))."""
    _require_reduced(model)
    ref = _resolve(model, reference)
    diff = p.u - ref.u
    wedges = mixed_wedge(p, p) + mixed_wedge(p, ref) + mixed_wedge(ref, ref)
    return _fiber_integral(diff * wedges, model) / 3.0


def donaldson(p: PotentialField, model: FibrationModel, lam: float,
              reference: Optional[PotentialField] = None) -> float:
    """L(phi) = int_M (lambda E ^ omega - 1/2 E_1)."""
    e = energy(p, model, reference)
    e1 = energy1(p, model, reference)
    return lam * base_integral(e * model.base_metric, model) - 0.5 * base_integral(e1, model)


def topological_lambda(model: FibrationModel, potential: Optional[PotentialField] = None) -> float:
    """Exact lambda_X from the intersection ring, or the numerical ratio for a given potential.

    The numerical value is int (i ddbar phi)^2/2 / int omega ^ i ddbar phi.
    """
    if potential is None:
        return float(stability.lambda_sub(stability.intersection_data(model), "X"))
    _require_reduced(model)
    c = geodesic_curvature(potential, model).c
    numerator = base_integral(_fiber_integral(c * potential.phi_vv, model), model)
    denominator = base_integral(_fiber_integral(model.metric_field() * potential.phi_vv, model),
                                model)
    if denominator <= 0:
        raise ValueError("int omega ^ i ddbar phi is not positive")
    return numerator / denominator


def numerical_lambda_section(second_derivative: np.ndarray, model: FibrationModel) -> float:
    """lambda_Y for a section from the restricted potential's base Laplacian."""
    denominator = base_integral(model.base_metric, model)
    return base_integral(second_derivative, model) / denominator


def first_variation_integrand(p: PotentialField, model: FibrationModel, lam: float) -> np.ndarray:
    """(tr c(phi) - lambda) * (i ddbar phi)^n ^ omega^m / m! as a reduced density."""
    curvature = geodesic_curvature(p, model)
    return (curvature.trace - lam) * model.metric_field() * p.phi_vv


def first_variation(p: PotentialField, phidot: np.ndarray, model: FibrationModel, lam: float) -> float:
    """-dL/dt = int phidot (tr c - lambda) (i ddbar phi)^n ^ omega^m / m!."""
    density = phidot * first_variation_integrand(p, model, lam)
    return base_integral(_fiber_integral(density, model), model)


@dataclass(frozen=True)
class VariationCheck:
    index: int
    finite_difference: float
    analytic: float

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.finite_difference), abs(self.analytic), 1e-12)
        return abs(self.finite_difference + self.analytic) / scale


def first_variation_checks(path: Sequence[PotentialField], times: Sequence[float],
                           model: FibrationModel, lam: float) -> List[VariationCheck]:
    if len(path) < 3:
        raise ValueError("first-variation check needs at least 3 path samples")
    if len(times) != len(path):
        raise ValueError("times and path have different lengths")
    values = [donaldson(p, model, lam) for p in path]
    checks = []
    for k in range(1, len(path) - 1):
        dt = times[k + 1] - times[k - 1]
        fd = (values[k + 1] - values[k - 1]) / dt
        phidot = (path[k + 1].u - path[k - 1].u) / dt
        checks.append(VariationCheck(k, fd, first_variation(path[k], phidot, model, lam)))
    return checks


def first_variation_residual(path: Sequence[PotentialField], times: Sequence[float],
                             model: FibrationModel, lam: float) -> float:
    """Largest relative gap between dL/dt by differences and minus the analytic variation."""
    checks = first_variation_checks(path, times, model, lam)
    worst = max(checks, key=lambda c: c.relative_gap)
    logger.debug("[Functionals] first variation worst at %d: fd=%.6e analytic=%.6e",
                 worst.index, worst.finite_difference, worst.analytic)
    return worst.relative_gap


def second_variation_bound(p: PotentialField, model: FibrationModel, lam: float) -> float:
    """int (tr c(phi) - lambda) (i ddbar psi) ^ omega for the epsilon-geodesic lower bound."""
    curvature = geodesic_curvature(p, model)
    density = (curvature.trace - lam) * model.metric_field() * model.reference_vv()
    return base_integral(_fiber_integral(density, model), model)


@dataclass
class FunctionalReport:
    model: str
    lam: float
    energy: np.ndarray
    energy1: np.ndarray
    value: float
    energy_mass: float
    energy1_mass: float
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "model": self.model,
            "lambda": self.lam,
            "L_value": self.value,
            "E_mass": self.energy_mass,
            "E1_mass": self.energy1_mass,
            **self.extras,
        }


def functional_report(p: PotentialField, model: FibrationModel,
                      lam: Optional[float] = None) -> FunctionalReport:
    lam = topological_lambda(model) if lam is None else lam
    e = energy(p, model)
    e1 = energy1(p, model)
    value = lam * base_integral(e * model.base_metric, model) - 0.5 * base_integral(e1, model)
    return FunctionalReport(model.name, lam, e, e1, value,
                            base_integral(e * model.base_metric, model), base_integral(e1, model))
