"""
L2 metrics on E = pi_*(K_{X/M} + L) and their Chern curvature.

Sections are the fiber monomials v^j dv, j = 0 .. q - 2, for a reference of
fiber degree q. For circle-invariant phi the metric is diagonal,

    h_jj(s) = pi * int exp((j + 1) t - phi(s, t)) dt,

and the closed-form part of the reference is factored out as a twist
h = exp(-tau) * h_hat with tau_j = p l(s) + (j + 1)(r l(s) + shift), so that only
the numerically integrated h_hat is differentiated on the base grid.
"""

import logging
from dataclasses import dataclass, replace
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit

from app.core import functionals, numerics, stability
from app.core.errors import DomainTruncationError, Unsupported
from app.core.finsler import FinslerMetric, dual_reference, kobayashi_curvature
from app.core.geometry import (BI_INVARIANT, PROJECTIVE, SPHERE, FibrationModel,
                               LineBundleDescriptor, PotentialField, ReferencePotential,
                               compute_jets, geodesic_curvature)

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION_TOL = 1e-14
DIAGONAL_TOL = 1e-12


@dataclass(frozen=True)
class DirectImageBundle:
    """Metric h = D h_hat D on E over the sphere base, D = diag(exp(-tau_j / 2))."""
    model: FibrationModel
    rank: int
    h_hat: np.ndarray
    twist: np.ndarray
    twist_dd: np.ndarray
    # exponents of h_hat before normalization, per base point and section
    log_scale: np.ndarray

    @property
    def scalar_twist(self) -> bool:
        return bool(np.allclose(self.twist, self.twist[:, :1], rtol=0.0, atol=1e-12))

    @property
    def is_diagonal(self) -> bool:
        diag = np.abs(np.diagonal(self.h_hat, axis1=1, axis2=2))
        off = np.abs(self.h_hat - np.einsum("nj,jk->njk", np.diagonal(self.h_hat, axis1=1, axis2=2),
                                            np.eye(self.rank)))
        return bool(np.all(off.max(axis=(1, 2)) <= DIAGONAL_TOL * diag.max(axis=1)))

    def h(self) -> np.ndarray:
        d = np.exp(-0.5 * self.twist)
        return d[:, :, None] * self.h_hat * d[:, None, :]

    def transformed(self, basis: np.ndarray) -> "DirectImageBundle":
        """Metric in the section basis u'_A = sum_B basis[B, A] u_B (constant change of frame)."""
        if not self.scalar_twist:
            raise Unsupported("a change of frame mixes sections with different twists")
        basis = np.asarray(basis)
        h_new = np.einsum("ba,nbc,cd->nad", basis.conj(), self.h_hat, basis)
        return replace(self, h_hat=h_new)


@dataclass(frozen=True)
class CurvatureMatrixField:
    """K = g^{z zbar} Theta_{z zbar} as an endomorphism per base sample."""
    bundle: DirectImageBundle
    endomorphism: np.ndarray

    @property
    def trace(self) -> np.ndarray:
        return np.real(np.trace(self.endomorphism, axis1=1, axis2=2))

    def hermitian_form(self) -> np.ndarray:
        """h_hat K, which is Hermitian when K is self-adjoint for h."""
        return np.einsum("njk,nkl->njl", self.bundle.h_hat, self.endomorphism)

    def hermitian_gap(self) -> float:
        form = self.hermitian_form()
        gap = np.abs(form - np.conj(np.swapaxes(form, 1, 2))).max()
        return float(gap / max(1.0, np.abs(form).max()))

    def eigenvalues(self) -> np.ndarray:
        form = self.hermitian_form()
        form = 0.5 * (form + np.conj(np.swapaxes(form, 1, 2)))
        return np.array([linalg.eigh(form[i], self.bundle.h_hat[i], eigvals_only=True)
                         for i in range(form.shape[0])])


def _section_exponents(model: FibrationModel, u: np.ndarray, rank: int) -> np.ndarray:
    """(j + 1) w - q F(w) - u on the grid, per section; shape (rank, n_base, n_fiber)."""
    ref = model.reference
    s, t = model.grid.mesh()
    ell = np.logaddexp(0.0, s) if model.base == SPHERE else np.zeros_like(s)
    w = t + ref.r * ell + ref.shift
    core = -ref.q * np.logaddexp(0.0, w) - u
    return np.stack([(j + 1) * w + core for j in range(rank)])


def _twists(model: FibrationModel, rank: int) -> Tuple[np.ndarray, np.ndarray]:
    ref = model.reference
    s = model.base_axis.points()
    ell = np.logaddexp(0.0, s)
    sig = expit(s)
    dd_ell = sig * (1.0 - sig)
    twist = np.stack([ref.p * ell + (j + 1) * (ref.r * ell + ref.shift) for j in range(rank)], -1)
    twist_dd = np.stack([(ref.p + (j + 1) * ref.r) * dd_ell for j in range(rank)], -1)
    return twist, twist_dd


def l2_metric(model: FibrationModel, p: PotentialField,
              truncation_tol: float = DEFAULT_TRUNCATION_TOL) -> DirectImageBundle:
    """h_{A Bbar}(z) = int u_A conj(u_B) e^{-phi} by fiber quadrature per base point."""
    if model.base != SPHERE or not model.reduced:
        raise Unsupported("direct images are computed over the sphere base in invariant modes")
    q = model.reference.q
    if abs(q - round(q)) > 1e-12 or round(q) < 2:
        raise Unsupported(f"fiber degree {q} leaves no sections of L + K_X/M")
    rank = int(round(q)) - 1
    exponents = _section_exponents(model, p.u, rank)
    peak = exponents.max(axis=2, keepdims=True)
    integrand = np.exp(exponents - peak)
    boundary = np.maximum(integrand[..., 0], integrand[..., -1]).max()
    if boundary > truncation_tol:
        raise DomainTruncationError(
            f"fiber integrand is {boundary:.3e} of its peak at the chart end; enlarge the fiber extent",
            boundary_value=float(boundary))
    fiber = model.fiber_axis
    integrals = np.pi * numerics.integrate_along(integrand, fiber, 2)
    log_scale = peak[..., 0].T
    diag = integrals.T * np.exp(log_scale)
    h_hat = np.einsum("nj,jk->njk", diag, np.eye(rank))
    twist, twist_dd = _twists(model, rank)
    logger.debug("[DirectImage] %s: rank %d, boundary ratio %.2e", model.name, rank, boundary)
    return DirectImageBundle(model, rank, h_hat, twist, twist_dd, log_scale)


def closed_form_product_metric(a: float, b: int, s: np.ndarray) -> np.ndarray:
    """Diagonal of h for phi = a l(s) + b log(1 + |v|^2): (1+|z|^2)^-a pi j!(b-j-2)!/(b-1)!."""
    coeffs = np.array([np.pi * factorial(j) * factorial(b - j - 2) / factorial(b - 1)
                       for j in range(b - 1)])
    return np.exp(-a * np.logaddexp(0.0, s))[:, None] * coeffs[None, :]


def chern_curvature(bundle: DirectImageBundle) -> CurvatureMatrixField:
    """K = -(h^-1 h_s)_s / g by base differences, with the twist added analytically."""
    model = bundle.model
    axis = model.base_axis
    g = model.base_metric
    h_hat = bundle.h_hat
    if bundle.is_diagonal:
        diag = np.real(np.diagonal(h_hat, axis1=1, axis2=2))
        numerics.hermitian_inverse(h_hat, model.eps_pd)
        connection = numerics.axis_derivative(diag, axis, 0, 1) / diag
        k_diag = (-numerics.axis_derivative(connection, axis, 0, 1) + bundle.twist_dd) / g[:, None]
        endo = np.einsum("nj,jk->njk", k_diag, np.eye(bundle.rank))
        return CurvatureMatrixField(bundle, endo)
    if not bundle.scalar_twist:
        raise Unsupported("non-diagonal metrics need a scalar twist")
    inverse = numerics.hermitian_inverse(h_hat, model.eps_pd)
    dh = numerics.axis_derivative(h_hat, axis, 0, 1)
    connection = np.einsum("njk,nkl->njl", inverse, dh)
    d_connection = numerics.axis_derivative(connection, axis, 0, 1)
    endo = (-d_connection + bundle.twist_dd[:, 0, None, None] * np.eye(bundle.rank)) / g[:, None, None]
    return CurvatureMatrixField(bundle, endo)


def _fiber_averages(bundle: DirectImageBundle, p: PotentialField,
                    fields: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Averages against exp((j + 1) t - phi) dt per base sample and section, shape (n, rank)."""
    model = bundle.model
    weights = np.exp(_section_exponents(model, p.u, bundle.rank) - bundle.log_scale.T[..., None])
    mass = numerics.integrate_along(weights, model.fiber_axis, 2)
    # fields are (n_base, n_fiber) or per section (rank, n_base, n_fiber)
    return [(numerics.integrate_along(weights * (f if f.ndim == 3 else f[None]),
                                      model.fiber_axis, 2) / mass).T
            for f in fields]


def _base_slope(p: PotentialField) -> np.ndarray:
    model = p.model
    return model.reference_jets["b"] + numerics.axis_derivative(p.u, model.base_axis, 0, 1)


def fiber_curvature(bundle: DirectImageBundle, p: PotentialField) -> np.ndarray:
    """Diagonal K_j = (<phi_ss>_j - Var_j(phi_s)) / g, differentiating h_jj under the integral.

    Agrees with chern_curvature up to the base differencing error, which the
    fiber moments avoid.
    """
    if not bundle.is_diagonal:
        raise Unsupported("fiber moments give the curvature of diagonal metrics only")
    if not p.model.grid.matches(bundle.model.grid):
        raise ValueError("bundle and potential live on different grids")
    slope = _base_slope(p)
    mean_ss, mean_s = _fiber_averages(bundle, p, (np.real(p.phi_zz), slope))
    (variance,) = _fiber_averages(bundle, p, ((slope[None] - mean_s.T[..., None]) ** 2,))
    return (mean_ss - variance) / bundle.model.base_metric[:, None]


def curvature_lower_bound_gaps(bundle: DirectImageBundle, p: PotentialField) -> np.ndarray:
    """Smallest eigenvalue of K - h^-1 T per base sample.

    For diagonal h the phi_ss moments of K and T cancel, leaving
    (<phi_st^2 / phi_tt>_j - Var_j(phi_s)) / g per section.
    """
    if not bundle.is_diagonal:
        raise Unsupported("the lower bound is evaluated in the monomial basis")
    if not p.model.grid.matches(bundle.model.grid):
        raise ValueError("bundle and potential live on different grids")
    slope = _base_slope(p)
    cross = np.abs(p.phi_zv) ** 2 * p.phi_vv_inv
    mean_cross, mean_s = _fiber_averages(bundle, p, (cross, slope))
    (variance,) = _fiber_averages(bundle, p, ((slope[None] - mean_s.T[..., None]) ** 2,))
    gaps = (mean_cross - variance) / bundle.model.base_metric[:, None]
    return gaps.min(axis=1)


def curvature_lower_bound_gap(bundle: DirectImageBundle, p: PotentialField,
                              model: Optional[FibrationModel] = None) -> float:
    """min over the base of the smallest eigenvalue of g Theta - T phi relative to h."""
    if model is not None and not model.grid.matches(bundle.model.grid):
        raise ValueError("bundle and model live on different grids")
    gaps = curvature_lower_bound_gaps(bundle, p)
    return float(gaps.min())


def einstein_constant(curvature: CurvatureMatrixField) -> float:
    """omega-average of tr K / r."""
    model = curvature.bundle.model
    g = model.base_metric
    mean = curvature.trace / curvature.bundle.rank
    return functionals.base_integral(mean * g, model) / functionals.base_integral(g, model)


def hermitian_einstein_residual(bundle: DirectImageBundle,
                                model: Optional[FibrationModel] = None) -> float:
    """max_z max |eig K(z) - c| with c the omega-average of tr K / r."""
    curvature = chern_curvature(bundle)
    constant = einstein_constant(curvature)
    return float(np.max(np.abs(curvature.eigenvalues() - constant)))


def chern_weil_degree(bundle: DirectImageBundle) -> float:
    """(1 / 2 pi) int tr Theta."""
    curvature = chern_curvature(bundle)
    model = bundle.model
    return functionals.base_integral(curvature.trace * model.base_metric, model) / (2.0 * np.pi)


@dataclass(frozen=True)
class OverlapReport:
    curvature_gap: float
    metric_gap: float
    end_slope: float


def chart_overlap(bundle: DirectImageBundle, degrees: Sequence[int]) -> OverlapReport:
    """Re-express a split diagonal metric in the chart w = 1/z and compare on the overlap.

    In that chart h'_j(s') = h_j(-s') exp(-d_j s'). With tau_j = c_j l(s) + k_j the
    twist becomes tau'_j(s') = c_j l(s') + (d_j - c_j) s' + k_j, so log h'_j
    flattens towards w = 0 exactly when d_j = c_j. Curvature in the w chart is
    taken from the reflected h_hat plus the analytic second derivative of tau'.
    """
    if not bundle.is_diagonal or len(degrees) != bundle.rank:
        raise Unsupported("overlap check is implemented for split diagonal metrics")
    model = bundle.model
    ref = model.reference
    axis = model.base_axis
    s = axis.points()
    d = np.asarray(degrees, dtype=float)
    c = np.array([ref.p + (j + 1) * ref.r for j in range(bundle.rank)])
    kappa = np.array([(j + 1) * ref.shift for j in range(bundle.rank)])
    ell = np.logaddexp(0.0, s)[:, None]
    sig = expit(s)[:, None]

    log_h_hat = np.log(np.real(np.diagonal(bundle.h_hat, axis1=1, axis2=2)))
    log_h = log_h_hat - bundle.twist
    twist_inf = c * ell + (d - c) * s[:, None] + kappa
    log_h_inf = log_h_hat[::-1] - twist_inf
    # the Fubini-Study g is the same function of s' in both charts
    g_inf = model.base_metric
    k_inf = (-numerics.axis_derivative(log_h_hat[::-1], axis, 0, 2)
             + c * sig * (1.0 - sig)) / g_inf[:, None]
    k = np.real(np.diagonal(chern_curvature(bundle).endomorphism, axis1=1, axis2=2))
    curvature_gap = float(np.max(np.abs(k_inf[::-1] - k)))
    # transition rule h'(s') = h(-s') exp(-d s') against the transformed twist
    metric_gap = float(np.max(np.abs(log_h_inf - (log_h[::-1] - d[None, :] * s[:, None]))))
    end_slope = float(np.max(np.abs(numerics.axis_derivative(log_h_inf, axis, 0, 1)[0])))
    return OverlapReport(curvature_gap, metric_gap, end_slope)


def chart_overlap_residual(bundle: DirectImageBundle, degrees: Sequence[int]) -> float:
    report = chart_overlap(bundle, degrees)
    return max(report.curvature_gap, report.metric_gap)


# --- Finsler-Einstein and Hermitian-Einstein ---

def dual_side_model(metric: FinslerMetric, n_base: int = 64, n_fiber: int = 160,
                    base_extent: float = 12.0, fiber_extent: float = 60.0) -> FibrationModel:
    """P(E*) with L = 3 O_{P(E*)}(1) - pi^* det E and phi_L = 3 phi* + log det h."""
    if not metric.hermitian:
        raise Unsupported("the dual-side L2 metric is built from a Hermitian G")
    d1, d2 = metric.degrees
    k1, k2 = metric.weights
    star = dual_reference(metric)
    # log det h = log(k1 k2) + 2 scale - (d1 + d2) l(s); constants only rescale h
    reference = ReferencePotential(3.0 * star.p - (d1 + d2), 3.0 * star.q, star.r, SPHERE,
                                   shift=star.shift)
    grid = numerics.Grid2D((numerics.log_axis(n_base, base_extent),
                            numerics.log_axis(n_fiber, fiber_extent)))
    return FibrationModel(f"P(E*):O({d1})+O({d2})", SPHERE, BI_INVARIANT, grid, reference,
                          LineBundleDescriptor(PROJECTIVE, (-d1, -d2)))


def split_hermitian_bundle(metric: FinslerMetric, **grid) -> DirectImageBundle:
    """L2 metric on E = pi_*(L + K) over P(E*), computed by fiber integration."""
    model = dual_side_model(metric, **grid)
    return l2_metric(model, compute_jets(model, np.zeros(model.grid.shape)))


@dataclass(frozen=True)
class BridgeReport:
    degrees: Tuple[int, int]
    lam: float
    ge_residual: float
    kobayashi_gap: float
    he_residual: Optional[float]
    transfer_gap: Optional[float]
    transfer_spread: Optional[float]
    polystable: bool
    tolerance: float

    @property
    def ge_ok(self) -> bool:
        return self.ge_residual <= self.tolerance

    @property
    def he_ok(self) -> Optional[bool]:
        return None if self.he_residual is None else self.he_residual <= self.tolerance

    @property
    def consistent(self) -> bool:
        """GE and HE agree, and a GE metric only appears on a polystable bundle."""
        if self.ge_ok and not self.polystable:
            return False
        return self.he_ok is None or self.he_ok == self.ge_ok

    def to_dict(self) -> Dict:
        return {
            "degrees": list(self.degrees),
            "lambda": self.lam,
            "ge_residual": self.ge_residual,
            "kobayashi_gap": self.kobayashi_gap,
            "he_residual": self.he_residual,
            "transfer_gap": self.transfer_gap,
            "transfer_spread": self.transfer_spread,
            "polystable": self.polystable,
            "ge_ok": self.ge_ok,
            "he_ok": self.he_ok,
            "consistent": self.consistent,
        }


def finsler_einstein_bridge(metric: FinslerMetric, model: FibrationModel,
                            tolerance: float = 1e-3, **dual_grid) -> BridgeReport:
    """GE residual of phi_G against the HE residual of the induced L2 metric."""
    if len(metric.degrees) != 2:
        raise Unsupported("the bridge is implemented for rank-2 split bundles")
    degrees = tuple(int(d) for d in metric.degrees)
    if model.bundle.kind != PROJECTIVE or tuple(model.bundle.degrees) != degrees:
        raise ValueError(f"metric on O({degrees[0]})+O({degrees[1]}) does not live on {model.name}")
    kobayashi = kobayashi_curvature(metric, model)
    lam = float(-stability.bundle_slope(degrees)) / model.omega_scale
    ge_residual = float(np.max(np.abs(kobayashi.c_trace - lam)))
    polystable = stability.polystable_check_split(list(degrees)).polystable

    he_residual = transfer_gap = transfer_spread = None
    if metric.hermitian:
        bundle = split_hermitian_bundle(metric, **dual_grid)
        he_residual = hermitian_einstein_residual(bundle)
        dual_model = bundle.model
        star = dual_reference(metric)
        s, t = dual_model.grid.mesh()
        star_jets = star.jets(s, t)
        c_star = star_jets["bb"] - star_jets["bt"] ** 2 / star_jets["tt"]
        trace_star = c_star / dual_model.metric_field()
        trace_l = geodesic_curvature(compute_jets(dual_model, np.zeros(dual_model.grid.shape)),
                                     dual_model).trace
        det_trace = float(sum(degrees)) / dual_model.omega_scale
        transfer_gap = float(np.max(np.abs(trace_l - (3.0 * trace_star - det_trace))))
        transfer_spread = float(trace_l.max() - trace_l.min())

    report = BridgeReport(degrees, lam, ge_residual, kobayashi.identity_gap(), he_residual,
                          transfer_gap, transfer_spread, polystable, tolerance)
    logger.info("[Bridge] O(%d)+O(%d): GE residual %.3e, HE residual %s, consistent=%s",
                degrees[0], degrees[1], ge_residual,
                "n/a" if he_residual is None else f"{he_residual:.3e}", report.consistent)
    return report
