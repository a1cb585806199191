"""
Invariant suite run by `main.py verify`.

Each check returns one CheckResult; the suite never stops at the first
failure so that the summary lists every violated property.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List

import numpy as np

from app.core import direct_image, functionals, geometry, numerics, solvers, stability
from app.core.config import ExperimentConfig
from app.core.finsler import FinslerMetric
from app.core.geometry import FibrationModel, compute_jets

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    module: str
    passed: bool

    def to_dict(self) -> Dict:
        return {"value": self.value, "tolerance": self.tolerance,
                "module": self.module, "passed": self.passed}


def _at_most(name: str, value: float, tolerance: float, module: str) -> CheckResult:
    return CheckResult(name, float(value), tolerance, module, bool(value <= tolerance))


def _at_least(name: str, value: float, bound: float, module: str) -> CheckResult:
    return CheckResult(name, float(value), bound, module, bool(value >= bound))


class VerifySuite:
    """Property checks over the testbeds, seeded from the experiment config."""

    def __init__(self, config: ExperimentConfig, model: FibrationModel):
        self.config = config
        self.model = model
        self.counts = config.verify
        self._flow_limit = None

    def _rng(self, offset: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, offset])

    def _sphere_model(self) -> FibrationModel:
        if self.model.base == geometry.SPHERE and self.model.bundle.kind == geometry.PRODUCT:
            return self.model
        return geometry.product_testbed(1, 1, self.config.grid.n_base, self.config.grid.n_fiber)

    def checks(self) -> List[Callable[[], List[CheckResult]]]:
        return [self.decomposition, self.schur, self.topological_lambda, self.first_variation,
                self.flow, self.absolute_minimum, self.geodesics, self.stability_tables,
                self.donaldson_futaki, self.l2_metric, self.bridge]

    def run(self) -> List[CheckResult]:
        results: List[CheckResult] = []
        for check in self.checks():
            for result in check():
                level = logging.INFO if result.passed else logging.WARNING
                logger.log(level, "[Verify] %s: %.6e (tolerance %.1e) %s", result.name,
                           result.value, result.tolerance, "ok" if result.passed else "FAILED")
                results.append(result)
        return results

    # --- geometry and numerics ---

    def decomposition(self) -> List[CheckResult]:
        rng = self._rng(1)
        models = [self._sphere_model(), geometry.torus_testbed(self.config.grid.n_base,
                                                               self.config.grid.n_fiber)]
        worst = 0.0
        for k in range(self.counts.decomposition_samples):
            model = models[k % 2]
            p = compute_jets(model, geometry.random_bump(model, rng, 0.15))
            worst = max(worst, geometry.decomposition_residual(p, model))
        return [_at_most("decomposition_residual", worst, 1e-8, "geometry")]

    def schur(self) -> List[CheckResult]:
        rng = self._rng(2)
        lowest, mismatch = np.inf, 0.0
        for _ in range(self.counts.schur_samples):
            block = numerics.random_block_matrix(rng)
            gap = numerics.schur_gap(block)
            lowest = min(lowest, float(np.linalg.eigvalsh(gap)[0]))
            mismatch = max(mismatch, float(np.max(np.abs(gap - numerics.schur_gap_closed_form(block)))))
        return [_at_least("schur_gap_min_eigenvalue", lowest, -1e-10, "numerics-core"),
                _at_most("schur_closed_form", mismatch, 1e-10, "numerics-core")]

    # --- functionals ---

    def topological_lambda(self) -> List[CheckResult]:
        rng = self._rng(3)
        model = self._sphere_model()
        exact = functionals.topological_lambda(model)
        worst = 0.0
        for _ in range(self.counts.lambda_potentials):
            p = compute_jets(model, geometry.random_bump(model, rng, 0.15))
            numerical = functionals.topological_lambda(model, p)
            worst = max(worst, abs(numerical - exact) / max(abs(exact), 1.0))
        return [_at_most("lambda_numerical_vs_exact", worst, 1e-3, "functionals")]

    def first_variation(self) -> List[CheckResult]:
        rng = self._rng(4)
        model = self._sphere_model()
        lam = functionals.topological_lambda(model)
        dt = 1e-3
        times = [0.5 - dt, 0.5, 0.5 + dt]
        worst = 0.0
        for _ in range(self.counts.variation_paths):
            bump = geometry.random_bump(model, rng, 0.15)
            path = [compute_jets(model, t * bump) for t in times]
            worst = max(worst, functionals.first_variation_residual(path, times, model, lam))
        return [_at_most("first_variation_relative", worst, 1e-3, "functionals")]

    # --- solvers ---

    def _flow_params(self) -> solvers.FlowParams:
        cfg = self.config.flow
        return solvers.FlowParams(cfg.dt0, cfg.tol_ge, cfg.max_iter, cfg.dt_min, cfg.dt_max,
                                  scheme=cfg.scheme)

    def flow(self) -> List[CheckResult]:
        rng = self._rng(5)
        model = self._sphere_model()
        params = self._flow_params()
        worst_residual, worst_increase = 0.0, 0.0
        result = None
        for _ in range(self.counts.flow_starts):
            start = compute_jets(model, geometry.random_bump(model, rng, self.config.flow.perturbation))
            result = solvers.gradient_flow(start, model, params)
            worst_residual = max(worst_residual, result.residual if result.converged else np.inf)
            worst_increase = max(worst_increase, float(np.max(np.diff(result.values), initial=0.0)))
        self._flow_limit = result.final
        restart = solvers.gradient_flow(result.final, model, params)
        return [_at_most("flow_final_residual", worst_residual, params.tol_ge, "solvers"),
                _at_most("flow_L_increase", worst_increase, 1e-12, "solvers"),
                _at_most("flow_restart_steps", restart.iterations, 0, "solvers")]

    def absolute_minimum(self) -> List[CheckResult]:
        rng = self._rng(6)
        model = self._sphere_model()
        limit = self._flow_limit
        if limit is None:
            limit = compute_jets(model, np.zeros(model.grid.shape))
        candidates = [compute_jets(model, limit.u + geometry.random_bump(model, rng, 0.1))
                      for _ in range(self.counts.minimum_candidates)]
        lam = functionals.topological_lambda(model)
        gap = solvers.check_minimum(limit, candidates, model, lam, tol=np.inf)
        return [_at_least("minimum_gap", gap, -1e-3, "solvers")]

    def geodesics(self) -> List[CheckResult]:
        rng = self._rng(7)
        model = self._sphere_model()
        n_times = self.config.geodesic.n_times
        zero = compute_jets(model, np.zeros(model.grid.shape))
        shifted = compute_jets(model, np.full(model.grid.shape, 0.5))
        constant = solvers.epsilon_geodesic(zero, shifted, 1e-6, model, n_times)
        linear_gap = max(float(np.max(np.abs(p.u - 0.5 * tau)))
                         for p, tau in zip(constant.potentials, constant.times))
        target = compute_jets(model, geometry.random_bump(model, rng, self.config.geodesic.perturbation))
        path = solvers.epsilon_geodesic(zero, target, 1e-4, model, n_times)
        report = solvers.convexity_report(path, model)
        return [_at_most("geodesic_residual", max(constant.max_residual, path.max_residual), 1e-8,
                         "solvers"),
                _at_most("geodesic_constant_shift", linear_gap, 1e-5, "solvers"),
                _at_least("convexity_min_second_difference", report.min_second_difference, -1e-3,
                          "solvers")]

    # --- stability ---

    def stability_tables(self) -> List[CheckResult]:
        low, high = self.config.stability.degree_range
        mismatches = 0
        for a in range(low, high + 1):
            for b in range(low, high + 1):
                data = stability.projective_data([a, b])
                for y in data.catalogue:
                    bridge = stability.slope_bridge(list(y.sub_degrees))
                    if not bridge.holds or stability.lambda_sub(data, y) != -bridge.slope:
                        mismatches += 1
        verdict = stability.semistability_verdict(stability.projective_data([1, -1]))
        flagged = verdict.verdict == stability.UNSTABLE and verdict.witness == "P(O(1))"
        return [_at_most("slope_bridge_mismatches", mismatches, 0, "stability"),
                _at_least("unstable_witness_flagged", int(flagged), 1, "stability")]

    def donaldson_futaki(self) -> List[CheckResult]:
        low, high = self.config.stability.degree_range
        b_low, b_high = self.config.stability.fiber_degree_range
        nonzero, rank_errors = 0, 0
        for a in range(low, high + 1):
            for b in range(max(b_low, 1), b_high + 1):
                coeffs = stability.grr_expansion(stability.product_data(a, b))
                nonzero += int(coeffs.df != 0)
                for k in range(1, self.config.stability.k_max + 1):
                    if coeffs.rank(k) != Fraction(stability.sections_on_fiber(b * k - 2)):
                        rank_errors += 1
        return [_at_most("product_DF_nonzero", nonzero, 0, "stability"),
                _at_most("rank_law_errors", rank_errors, 0, "stability")]

    # --- direct images ---

    def l2_metric(self) -> List[CheckResult]:
        rng = self._rng(8)
        model = geometry.product_testbed(1, 3, self.config.grid.n_base, 128, 12.0, 40.0)
        zero = compute_jets(model, np.zeros(model.grid.shape))
        bundle = direct_image.l2_metric(model, zero)
        s = model.base_axis.points()
        expected = direct_image.closed_form_product_metric(1.0, 3, s)
        diag = np.real(np.diagonal(bundle.h(), axis1=1, axis2=2))
        metric_error = float(np.max(np.abs(diag / expected - 1.0)))
        curvature = direct_image.chern_curvature(bundle)
        curvature_error = float(np.max(np.abs(curvature.eigenvalues() - 1.0)))
        lowest = np.inf
        for _ in range(self.counts.lower_bound_potentials):
            p = compute_jets(model, geometry.random_bump(model, rng, 0.15))
            lowest = min(lowest, direct_image.curvature_lower_bound_gap(
                direct_image.l2_metric(model, p), p, model))
        return [_at_most("l2_closed_form_relative", metric_error, 1e-6, "direct-image"),
                _at_most("curvature_twist", curvature_error, 1e-4, "direct-image"),
                _at_least("curvature_lower_bound_gap", lowest, -1e-4, "direct-image")]

    def bridge(self) -> List[CheckResult]:
        cfg = self.config.bridge
        grid = dict(n_base=self.config.grid.n_base, n_fiber=cfg.n_fiber,
                    fiber_extent=cfg.fiber_extent)

        def run(metric: FinslerMetric) -> direct_image.BridgeReport:
            model = geometry.projective_testbed(*metric.degrees, self.config.grid.n_base,
                                                self.config.grid.n_fiber)
            return direct_image.finsler_einstein_bridge(metric, model, cfg.tolerance, **grid)

        equal = run(FinslerMetric((1, 1)))
        unequal = run(FinslerMetric((2, 0)))
        scaled = run(FinslerMetric((1, 1)).scaled(2.5))
        scaling_gap = max(abs(scaled.ge_residual - equal.ge_residual),
                          abs(scaled.he_residual - equal.he_residual))
        return [_at_most("bridge_equal_ge", equal.ge_residual, 1e-3, "direct-image"),
                _at_most("bridge_equal_he", equal.he_residual, 1e-3, "direct-image"),
                _at_least("bridge_unequal_he", unequal.he_residual, 0.1, "direct-image"),
                _at_most("bridge_scaling", scaling_gap, 1e-9, "direct-image")]
