"""
Geometry of the triple (X -> M, L) on desk-scale grids.

The base M is a curve (torus C/Z^2 or the sphere P^1), the fiber is P^1 and the
line bundle is described either by a bidegree on P^1 x P^1 or by the split
bundle E = O(a) + O(b) whose projectivization carries O_{P(E)}(1).

Jets are stored in a frame-reduced form. In the invariant modes the potential
is a function of reduced real coordinates (b, t) with t = log|v|^2 and b = x on
the torus or b = log|z|^2 on the sphere; rescaling the coordinate frame sends

    phi_{z zbar} -> phi_bb,  phi_{z vbar} -> phi_bt,  phi_{v vbar} -> phi_tt,  g -> G(b)

so every algebraic formula below (curvature, horizontal frame, decomposition,
trace) reads the same in both the reduced and the full chart representation.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from app.core.errors import AdmissibilityError, Unsupported
from app.core import numerics
from app.core.numerics import Axis, Grid2D

logger = logging.getLogger(__name__)

TORUS = "torus"
SPHERE = "sphere"

FULL = "full"
CIRCLE_INVARIANT = "circle-invariant"
BI_INVARIANT = "bi-invariant"

PRODUCT = "product"
PROJECTIVE = "projective"

FIBER_DENSITY = 2.0 * np.pi
# fiber-chart extent used by full mode
DEFAULT_CHART_RADIUS = 2.5


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class LineBundleDescriptor:
    """Bidegree (a, b) on P^1 x P^1, or summand degrees of E for O_{P(E)}(1)."""
    kind: str
    degrees: Tuple[int, int]

    @property
    def fiber_degree(self) -> int:
        return self.degrees[1] if self.kind == PRODUCT else 1


@dataclass(frozen=True)
class ReferencePotential:
    """Closed-form psi = p*l(b) + q*log(1 + exp(t + r*l(b) + shift)).

    l(s) = log(1 + e^s) on the sphere base and l = 0 on the torus.
    """
    p: float
    q: float
    r: float
    base: str
    shift: float = 0.0

    def _base_terms(self, b: np.ndarray):
        if self.base == SPHERE:
            sig = expit(b)
            return _softplus(b), sig, sig * (1.0 - sig)
        zero = np.zeros_like(b)
        return zero, zero, zero

    def jets(self, b: np.ndarray, t: np.ndarray) -> Dict[str, np.ndarray]:
        ell, d_ell, dd_ell = self._base_terms(b)
        w = t + self.r * ell + self.shift
        f1 = expit(w)
        f2 = f1 * expit(-w)
        return {
            "value": self.p * ell + self.q * _softplus(w),
            "b": self.p * d_ell + self.q * f1 * self.r * d_ell,
            "t": self.q * f1,
            "bb": self.p * dd_ell + self.q * (f2 * (self.r * d_ell) ** 2 + f1 * self.r * dd_ell),
            "bt": self.q * f2 * self.r * d_ell,
            "tt": self.q * f2,
        }

    def section_value(self, b: np.ndarray, end: str) -> np.ndarray:
        """Restriction to v = 0 or (in the frame at infinity) v = infinity."""
        ell, _, _ = self._base_terms(b)
        if end == "zero":
            return self.p * ell
        return (self.p + self.q * self.r) * ell + self.q * self.shift

    def section_second_derivative(self, b: np.ndarray, end: str) -> np.ndarray:
        _, _, dd_ell = self._base_terms(b)
        if end == "zero":
            return self.p * dd_ell
        return (self.p + self.q * self.r) * dd_ell


@dataclass(frozen=True)
class FibrationModel:
    """Discretized triple (X -> M, L) with base metric and reference potential."""
    name: str
    base: str
    symmetry: str
    grid: Grid2D
    reference: ReferencePotential
    bundle: LineBundleDescriptor
    omega_scale: float = 1.0
    eps_pd: float = numerics.DEFAULT_EPS_PD
    m: int = 1
    n: int = 1

    def __post_init__(self):
        if self.base not in (TORUS, SPHERE):
            raise Unsupported(f"unknown base kind '{self.base}'")
        if self.symmetry not in (FULL, CIRCLE_INVARIANT, BI_INVARIANT):
            raise Unsupported(f"unknown symmetry mode '{self.symmetry}'")
        expected = 4 if self.symmetry == FULL else 2
        if self.grid.ndim != expected:
            raise ValueError(f"{self.symmetry} mode needs a {expected}-axis grid")
        if self.symmetry == BI_INVARIANT and self.base != SPHERE:
            raise Unsupported("bi-invariant mode needs the sphere base")
        if self.symmetry == CIRCLE_INVARIANT and self.base != TORUS:
            raise Unsupported("circle-invariant mode is used with the torus base")
        if self.symmetry == FULL and (self.base != TORUS or self.reference.r != 0):
            raise Unsupported("full mode supports the torus base with a split reference")
        if self.omega_scale <= 0:
            raise ValueError("omega_scale must be positive")
        if self.reference.q <= 0:
            raise AdmissibilityError("reference potential is not fiberwise positive",
                                     eigenvalue=float(self.reference.q))

    @property
    def reduced(self) -> bool:
        return self.symmetry != FULL

    @property
    def base_axis(self) -> Axis:
        return self.grid.axes[0]

    @property
    def fiber_axis(self) -> Axis:
        if not self.reduced:
            raise Unsupported("full mode has no single fiber axis")
        return self.grid.axes[1]

    @property
    def base_density(self) -> float:
        """nu_b such that a reduced base (1,1)-coefficient integrates against nu_b db."""
        return 2.0 * np.pi if self.base == SPHERE else 0.5

    @property
    def volume(self) -> float:
        return 2.0 * np.pi * self.omega_scale

    @cached_property
    def base_metric(self) -> np.ndarray:
        """Frame-reduced g as a 1-D array over the base axis."""
        b = self.base_axis.points()
        if self.base == SPHERE:
            sig = expit(b)
            return self.omega_scale * sig * (1.0 - sig)
        if self.reduced:
            return np.full(b.shape, 4.0 * np.pi * self.omega_scale)
        return np.full(b.shape, np.pi * self.omega_scale)

    def metric_field(self) -> np.ndarray:
        """g broadcast against grid-shaped arrays."""
        g = self.base_metric
        return g.reshape(g.shape + (1,) * (self.grid.ndim - 1))

    @cached_property
    def reference_jets(self) -> Dict[str, np.ndarray]:
        if self.reduced:
            b, t = self.grid.mesh()
            return self.reference.jets(b, t)
        x, y, xi, eta = self.grid.mesh()
        rho = xi ** 2 + eta ** 2
        q = self.reference.q
        zero = np.zeros_like(rho)
        return {
            "value": q * np.log1p(rho),
            "zz": zero,
            "zv": zero.astype(complex),
            "vv": q / (1.0 + rho) ** 2,
        }

    def reference_vv(self) -> np.ndarray:
        jets = self.reference_jets
        return jets["tt"] if self.reduced else jets["vv"]

    def reference_value(self) -> np.ndarray:
        return self.reference_jets["value"]


# --- Potentials and curvature ---

@dataclass(frozen=True)
class PotentialField:
    """Admissible phi = psi + u with its complex 2-jet cached at construction."""
    model: FibrationModel
    u: np.ndarray
    phi_zz: np.ndarray
    phi_zv: np.ndarray
    phi_vv: np.ndarray
    phi_vv_inv: np.ndarray

    @property
    def fiber_eigenvalue(self) -> np.ndarray:
        """phi_{v vbar} / psi_{v vbar}, the fiber Hessian in the reference frame."""
        return self.phi_vv / self.model.reference_vv()

    def values(self) -> np.ndarray:
        return self.model.reference_value() + self.u

    @classmethod
    def from_jets(cls, model: FibrationModel, u: np.ndarray, zz: np.ndarray,
                  zv: np.ndarray, vv: np.ndarray, reference_vv: Optional[np.ndarray] = None
                  ) -> "PotentialField":
        """Wrap externally computed jets after the admissibility check."""
        ref = model.reference_vv() if reference_vv is None else reference_vv
        ratio = vv / ref
        _require_admissible(ratio, model.eps_pd)
        return cls(model, np.asarray(u, dtype=float), zz, zv, vv, 1.0 / vv)


def _require_admissible(ratio: np.ndarray, eps_pd: float):
    if not np.all(np.isfinite(ratio)) or np.any(ratio <= eps_pd):
        bad = np.where(np.isfinite(ratio), ratio, -np.inf)
        idx = np.unravel_index(int(np.argmin(bad)), np.shape(bad))
        raise AdmissibilityError("fiber Hessian not positive definite",
                                 location=tuple(int(i) for i in idx),
                                 eigenvalue=float(bad[idx]))


def _raw_jets(model: FibrationModel, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ref = model.reference_jets
    axes = model.grid.axes
    if model.reduced:
        u_t = numerics.axis_derivative(u, axes[1], 1, 1)
        zz = ref["bb"] + numerics.axis_derivative(u, axes[0], 0, 2)
        zv = ref["bt"] + numerics.axis_derivative(u_t, axes[0], 0, 1)
        vv = ref["tt"] + numerics.axis_derivative(u, axes[1], 1, 2)
        return zz, zv, vv
    grid = model.grid
    u_zbar = numerics.differentiate(u, grid, 0, "dbar")
    u_vbar = numerics.differentiate(u, grid, 1, "dbar")
    zz = ref["zz"] + numerics.differentiate(u_zbar, grid, 0, "d").real
    zv = ref["zv"] + numerics.differentiate(u_vbar, grid, 0, "d")
    vv = ref["vv"] + numerics.differentiate(u_vbar, grid, 1, "d").real
    return zz, zv, vv


def compute_jets(model: FibrationModel, u: np.ndarray) -> PotentialField:
    """Differentiate u = phi - psi and verify fiberwise admissibility."""
    u = np.asarray(u, dtype=float)
    if u.shape != model.grid.shape:
        raise ValueError(f"u has shape {u.shape}, grid expects {model.grid.shape}")
    zz, zv, vv = _raw_jets(model, u)
    ratio = vv / model.reference_vv()
    _require_admissible(ratio, model.eps_pd)
    return PotentialField(model, u, zz, zv, vv, 1.0 / vv)


@dataclass(frozen=True)
class CurvatureField:
    """Geodesic curvature c(phi) (a scalar per point since m = 1) and its trace."""
    model: FibrationModel
    c: np.ndarray
    trace: np.ndarray

    def max_deviation(self, value: float) -> float:
        return float(np.max(np.abs(self.trace - value)))


def _curvature_values(p: PotentialField) -> np.ndarray:
    return p.phi_zz - np.abs(p.phi_zv) ** 2 * p.phi_vv_inv


def trace_c(c: CurvatureField, model: FibrationModel) -> np.ndarray:
    """Pointwise contraction g^{z zbar} c_{z zbar}."""
    if not c.model.grid.matches(model.grid):
        raise ValueError("curvature field and model live on different grids")
    return c.c / model.metric_field()


def geodesic_curvature(p: PotentialField, model: FibrationModel) -> CurvatureField:
    """c(phi) = phi_{z zbar} - |phi_{z vbar}|^2 / phi_{v vbar} with its trace."""
    if not p.model.grid.matches(model.grid):
        raise ValueError("potential and model live on different grids")
    _require_admissible(p.fiber_eigenvalue, model.eps_pd)
    c = _curvature_values(p)
    partial = CurvatureField(model, c, np.zeros_like(c))
    return CurvatureField(model, c, trace_c(partial, model))


@dataclass(frozen=True)
class HorizontalFrame:
    """Connection coefficients N = phi^{v vbar} phi_{vbar z} (frame-reduced)."""
    model: FibrationModel
    coefficients: np.ndarray

    def chart_coefficients(self) -> np.ndarray:
        """N^v in chart coordinates at real positive z and v.

        delta/delta z = d/dz - N d/dv and delta v = dv + N dz.
        """
        model = self.model
        if not model.reduced:
            return self.coefficients
        b, t = model.grid.mesh()
        v_mod = np.exp(0.5 * t)
        if model.base == SPHERE:
            dz_b = np.exp(-0.5 * b)
        else:
            dz_b = 0.5
        return v_mod * dz_b * self.coefficients


def horizontal_frame(p: PotentialField) -> HorizontalFrame:
    _require_admissible(p.fiber_eigenvalue, p.model.eps_pd)
    return HorizontalFrame(p.model, p.phi_zv * p.phi_vv_inv)


def decomposition_residual(p: PotentialField, model: FibrationModel) -> float:
    """Max-norm gap in i ddbar phi = c(phi) + i phi_{v vbar} dv^ ^ dvbar^.

    The left side is re-differentiated from u; the right side uses the cached
    jets through c(phi) and the horizontal frame.
    """
    curvature = geodesic_curvature(p, model)
    frame = horizontal_frame(p)
    zz, zv, vv = _raw_jets(model, p.u)
    n = frame.coefficients
    # coefficients of dz^dzbar, dz^dvbar and dv^dvbar on the right
    rhs_zz = curvature.c + p.phi_vv * np.abs(n) ** 2
    rhs_zv = p.phi_vv * n
    rhs_vv = p.phi_vv
    gaps = (np.max(np.abs(rhs_zz - zz)), np.max(np.abs(rhs_zv - zv)), np.max(np.abs(rhs_vv - vv)))
    scale = max(1.0, float(np.max(np.abs(zz))), float(np.max(np.abs(vv))))
    return float(max(gaps) / scale)


# --- Subfibrations ---

@dataclass(frozen=True)
class SectionRestriction:
    """phi restricted to the section v = 0 ('zero') or v = infinity ('infinity')."""
    model: FibrationModel
    end: str
    values: np.ndarray
    second_derivative: np.ndarray
    trace: np.ndarray


def restrict_to_section(p: PotentialField, end: str) -> SectionRestriction:
    """Restriction to a catalogued section; the fiber-chart end stands in for the limit."""
    model = p.model
    if not model.reduced:
        raise Unsupported("section restriction needs an invariant mode")
    if end not in ("zero", "infinity"):
        raise ValueError(f"unknown section '{end}'")
    b = model.base_axis.points()
    col = 0 if end == "zero" else -1
    u_end = p.u[:, col]
    values = model.reference.section_value(b, end) + u_end
    second = model.reference.section_second_derivative(b, end) + \
        numerics.axis_derivative(u_end, model.base_axis, 0, 2)
    return SectionRestriction(model, end, values, second, second / model.base_metric)


# --- Testbeds ---

def _reduced_grid(base: str, n_base: int, n_fiber: int, base_extent: float,
                  fiber_extent: float) -> Grid2D:
    if base == SPHERE:
        base_axis = numerics.log_axis(n_base, base_extent)
    else:
        base_axis = numerics.periodic_axis(n_base, 0.0, 1.0)
    return Grid2D((base_axis, numerics.log_axis(n_fiber, fiber_extent)))


def product_testbed(a: int, b: int, n_base: int = 64, n_fiber: int = 64,
                    base_extent: float = 12.0, fiber_extent: float = 12.0,
                    omega_scale: float = 1.0, eps_pd: float = numerics.DEFAULT_EPS_PD
                    ) -> FibrationModel:
    """Testbed A: P^1 x P^1 with L = O(a, b) and the Fubini-Study product reference."""
    if b < 1:
        raise AdmissibilityError("O(a, b) needs fiber degree b >= 1", eigenvalue=float(b))
    grid = _reduced_grid(SPHERE, n_base, n_fiber, base_extent, fiber_extent)
    return FibrationModel(f"A:O({a},{b})", SPHERE, BI_INVARIANT, grid,
                          ReferencePotential(float(a), float(b), 0.0, SPHERE),
                          LineBundleDescriptor(PRODUCT, (a, b)), omega_scale, eps_pd)


def torus_testbed(n_base: int = 64, n_fiber: int = 64, fiber_extent: float = 12.0,
                  omega_scale: float = 1.0, eps_pd: float = numerics.DEFAULT_EPS_PD
                  ) -> FibrationModel:
    """Testbed B: torus x P^1 with L fiberwise O(1), bidegree (0, 1)."""
    grid = _reduced_grid(TORUS, n_base, n_fiber, 0.0, fiber_extent)
    return FibrationModel("B:torus", TORUS, CIRCLE_INVARIANT, grid,
                          ReferencePotential(0.0, 1.0, 0.0, TORUS),
                          LineBundleDescriptor(PRODUCT, (0, 1)), omega_scale, eps_pd)


def projective_testbed(a: int, b: int, n_base: int = 64, n_fiber: int = 64,
                       base_extent: float = 12.0, fiber_extent: float = 12.0,
                       omega_scale: float = 1.0, eps_pd: float = numerics.DEFAULT_EPS_PD
                       ) -> FibrationModel:
    """Testbed C: P(O(a) + O(b)) over P^1 with O_{P(E)}(1).

    The reference is log G for G = (1+|z|^2)^-a |z1|^2 + (1+|z|^2)^-b |z2|^2.
    """
    grid = _reduced_grid(SPHERE, n_base, n_fiber, base_extent, fiber_extent)
    return FibrationModel(f"C:P(O({a})+O({b}))", SPHERE, BI_INVARIANT, grid,
                          ReferencePotential(float(-a), 1.0, float(a - b), SPHERE),
                          LineBundleDescriptor(PROJECTIVE, (a, b)), omega_scale, eps_pd)


def full_torus_model(n_base: int = 16, n_fiber: int = 32,
                     radius: float = DEFAULT_CHART_RADIUS) -> FibrationModel:
    """Torus x P^1 on a full grid: z in C/Z^2 and one fiber chart |Re v|, |Im v| <= radius."""
    grid = Grid2D((numerics.periodic_axis(n_base), numerics.periodic_axis(n_base),
                   numerics.chart_axis(n_fiber, -radius, radius),
                   numerics.chart_axis(n_fiber, -radius, radius)))
    return FibrationModel("B:torus-full", TORUS, FULL, grid,
                          ReferencePotential(0.0, 1.0, 0.0, TORUS),
                          LineBundleDescriptor(PRODUCT, (0, 1)))


def circle_reduction_residual(n_base: int = 16, n_fiber: int = 32, amplitude: float = 0.1,
                              radius: float = DEFAULT_CHART_RADIUS) -> float:
    """Full-grid c(phi) against the reduced formula (phi_xx - phi_xt^2/phi_tt)/4.

    Uses u = amplitude * cos(2 pi x) * exp(-|v|^2), which is circle-invariant in v.
    """
    model = full_torus_model(n_base, n_fiber, radius)
    x, _, xi, eta = model.grid.mesh()
    rho = xi ** 2 + eta ** 2
    cos_x = np.cos(2 * np.pi * x)
    sin_x = np.sin(2 * np.pi * x)
    decay = np.exp(-rho)
    u = amplitude * cos_x * decay
    numeric = geodesic_curvature(compute_jets(model, u), model).c

    phi_xx = -4 * np.pi ** 2 * amplitude * cos_x * decay
    # phi_tt and phi_xt^2 both carry a factor rho; divide it out analytically
    tt_over_rho = 1.0 / (1.0 + rho) ** 2 + amplitude * cos_x * (rho - 1.0) * decay
    xt_sq_over_rho = (2 * np.pi * amplitude * sin_x) ** 2 * rho * decay ** 2
    reduced = 0.25 * (phi_xx - xt_sq_over_rho / tt_over_rho)
    gap = float(np.max(np.abs(numeric - reduced)))
    logger.info("[Geometry] circle reduction gap %.3e on %s", gap, model.grid.shape)
    return gap


def random_bump(model: FibrationModel, rng: np.random.Generator, amplitude: float = 0.1,
                modes: int = 2, width: float = 1.5) -> np.ndarray:
    """Smooth perturbation u localized near t = 0, admissible for amplitude up to about 0.2.

    Sphere bases get Gaussians in s; the torus gets low Fourier modes in x.
    """
    if not model.reduced:
        raise Unsupported("random perturbations are drawn in the invariant modes")
    b, t = model.grid.mesh()
    u = np.zeros(model.grid.shape)
    for _ in range(modes):
        coeff = rng.uniform(-1.0, 1.0) / modes
        t0 = rng.uniform(-1.0, 1.0)
        fiber = np.exp(-0.5 * ((t - t0) / width) ** 2)
        if model.base == SPHERE:
            b0 = rng.uniform(-1.0, 1.0)
            base = np.exp(-0.5 * ((b - b0) / width) ** 2)
        else:
            k = int(rng.integers(1, 3))
            base = np.cos(2.0 * np.pi * k * b + rng.uniform(0.0, 2.0 * np.pi))
        u += coeff * base * fiber
    return amplitude * u
