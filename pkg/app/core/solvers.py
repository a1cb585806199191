"""
Gradient flow towards geodesic-Einstein potentials, epsilon-geodesics between
potentials, and convexity diagnostics of the Donaldson functional along them.
"""

import logging
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.special import expit

from app.core import functionals, numerics
from app.core.errors import AdmissibilityError, FlowStalled, InvariantViolation, NonFiniteInput
from app.core.geometry import (SPHERE, FibrationModel, PotentialField, compute_jets,
                               geodesic_curvature, horizontal_frame)

logger = logging.getLogger(__name__)

EXPLICIT = "explicit"
SEMI_IMPLICIT = "semi-implicit"

DEFAULT_TOL_GE = 1e-5
DEFAULT_TIME_SAMPLES = 17
NEWTON_DAMPING = 0.5
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-10


# --- Gradient flow ---

@dataclass(frozen=True)
class FlowParams:
    dt0: float = 0.05
    tol_ge: float = DEFAULT_TOL_GE
    max_iter: int = 500
    dt_min: float = 1e-10
    dt_max: float = 50.0
    growth: float = 2.0
    # a step may not multiply the max residual by more than this
    residual_growth: float = 2.0
    scheme: Optional[str] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.dt0 <= 0 or self.dt_min <= 0 or self.dt_max < self.dt_min:
            raise ValueError("step sizes must satisfy 0 < dt_min <= dt_max and dt0 > 0")
        if self.tol_ge <= 0:
            raise ValueError("tol_ge must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.residual_growth <= 1.0:
            raise ValueError("residual_growth must exceed 1")
        if self.scheme not in (None, EXPLICIT, SEMI_IMPLICIT):
            raise ValueError(f"unknown time-stepping scheme '{self.scheme}'")


@dataclass(frozen=True)
class FlowStep:
    iteration: int
    value: float
    residual: float
    dt: float


@dataclass
class FlowResult:
    final: PotentialField
    log: List[FlowStep]
    converged: bool
    wall_time: float
    lam: float
    scheme: str
    rejected: int = 0
    dissipation: float = 0.0

    @property
    def iterations(self) -> int:
        return max(len(self.log) - 1, 0)

    @property
    def residual(self) -> float:
        return self.log[-1].residual

    @property
    def values(self) -> np.ndarray:
        return np.array([step.value for step in self.log])

    def energy_identity_gap(self) -> float:
        """|sum of dissipated energy - (L(start) - L(end))| relative to the drop."""
        drop = self.log[0].value - self.log[-1].value
        scale = max(abs(drop), 1e-14)
        return abs(self.dissipation - drop) / scale


def default_scheme(model: FibrationModel) -> str:
    # forward Euler is stiff on the log chart and needs thousands of steps on the torus
    return SEMI_IMPLICIT if model.reduced else EXPLICIT


def flow_region(model: FibrationModel) -> np.ndarray:
    """Grid points the flow moves and measures the GE residual on.

    On the sphere the rows of the base chart that are differentiated with
    one-sided stencils are held fixed as Dirichlet data; g decays like
    exp(-|s|) there and the closures carry no boundary condition.
    """
    free = np.ones(model.grid.shape, dtype=bool)
    if model.base == SPHERE:
        free[:numerics.CLOSURE_ROWS] = False
        free[-numerics.CLOSURE_ROWS:] = False
    return free


def flow_residual(p: PotentialField, model: FibrationModel, lam: float) -> float:
    """max |tr c(phi) - lambda| over the flow region."""
    residual = geodesic_curvature(p, model).trace - lam
    return float(np.max(np.abs(residual[flow_region(model)])))


@lru_cache(maxsize=8)
def _flow_operators(grid: numerics.Grid2D):
    base, fiber = grid.axes
    eye_b = sparse.identity(base.size, format="csr")
    eye_t = sparse.identity(fiber.size, format="csr")
    d_b1 = sparse.csr_matrix(numerics.differentiation_matrix(base, 1))
    d_b2 = sparse.csr_matrix(numerics.differentiation_matrix(base, 2))
    d_t1 = sparse.csr_matrix(numerics.differentiation_matrix(fiber, 1))
    d_t2 = sparse.csr_matrix(numerics.differentiation_matrix(fiber, 2))
    return (sparse.kron(d_b2, eye_t, format="csr"),
            sparse.kron(d_b1, d_t1, format="csr"),
            sparse.kron(eye_b, d_t2, format="csr"))


def _linearized_operator(p: PotentialField, model: FibrationModel) -> sparse.csr_matrix:
    """d(tr c)/du = (delta_bb - 2 N delta_bt + N^2 delta_tt) / g."""
    d_bb, d_bt, d_tt = _flow_operators(model.grid)
    n = horizontal_frame(p).coefficients.ravel()
    inv_g = np.broadcast_to(1.0 / model.metric_field(), model.grid.shape).ravel()
    return (sparse.diags(inv_g) @ (d_bb - sparse.diags(2.0 * n) @ d_bt
                                   + sparse.diags(n * n) @ d_tt)).tocsr()


def _weighted_pairing(p: PotentialField, model: FibrationModel, residual: np.ndarray,
                      direction: np.ndarray) -> float:
    density = direction * residual * model.metric_field() * p.phi_vv
    return functionals.base_integral(functionals.pushforward(density, model), model)


def _update(p: PotentialField, model: FibrationModel, residual: np.ndarray,
            free: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    if scheme == EXPLICIT:
        return np.where(free, dt * residual, 0.0)
    idx = np.flatnonzero(free.ravel())
    jac = _linearized_operator(p, model)[idx][:, idx]
    lhs = (sparse.identity(idx.size, format="csr") - dt * jac).tocsc()
    delta = np.zeros(free.size)
    delta[idx] = spsolve(lhs, dt * residual.ravel()[idx])
    return delta.reshape(model.grid.shape)


def gradient_flow(start: PotentialField, model: FibrationModel,
                  params: Optional[FlowParams] = None) -> FlowResult:
    """Descend L along phidot = tr c(phi) - lambda with backtracking on L.

    A step is rejected when L would increase, when the max residual would grow
    by more than `residual_growth`, or when admissibility would fail; dt is
    halved on rejection and grown by `growth` after an accepted step. Only the
    points of `flow_region` move.
    """
    params = params or FlowParams()
    scheme = params.scheme or default_scheme(model)
    lam = functionals.topological_lambda(model) if params.lam is None else params.lam
    free = flow_region(model)
    started = time.perf_counter()

    p = start
    residual = geodesic_curvature(p, model).trace - lam
    value = functionals.donaldson(p, model, lam)
    log = [FlowStep(0, value, float(np.max(np.abs(residual[free]))), 0.0)]
    dt = params.dt0
    rejected = 0
    dissipation = 0.0
    logger.info("[Flow] %s: start L=%.10e residual=%.3e scheme=%s",
                model.name, value, log[0].residual, scheme)

    iteration = 0
    while log[-1].residual > params.tol_ge and iteration < params.max_iter:
        iteration += 1
        while True:
            if dt < params.dt_min:
                diagnostics = {"iteration": iteration, "dt": dt, "L_value": value,
                               "residual": log[-1].residual, "rejected": rejected}
                raise FlowStalled(f"no admissible descent step above dt_min={params.dt_min:g}",
                                  diagnostics)
            try:
                delta = _update(p, model, residual, free, dt, scheme)
                trial = compute_jets(model, p.u + delta)
                trial_residual = geodesic_curvature(trial, model).trace - lam
                trial_value = functionals.donaldson(trial, model, lam)
            except (AdmissibilityError, NonFiniteInput) as exc:
                logger.debug("[Flow] rejected dt=%.3e: %s", dt, exc)
                rejected += 1
                dt *= 0.5
                continue
            trial_norm = float(np.max(np.abs(trial_residual[free])))
            slack = 1e-13 * max(1.0, abs(value))
            if (not np.isfinite(trial_value) or trial_value > value + slack
                    or not trial_norm <= params.residual_growth * log[-1].residual):
                logger.debug("[Flow] rejected dt=%.3e: L=%.10e residual=%.3e",
                             dt, trial_value, trial_norm)
                rejected += 1
                dt *= 0.5
                continue
            break

        dissipation += 0.5 * (_weighted_pairing(p, model, residual, delta)
                              + _weighted_pairing(trial, model, trial_residual, delta))
        p, residual, value = trial, trial_residual, trial_value
        log.append(FlowStep(iteration, value, trial_norm, dt))
        logger.debug("[Flow] iter=%d L=%.10e residual=%.3e dt=%.3e",
                     iteration, value, log[-1].residual, dt)
        dt = min(dt * params.growth, params.dt_max)

    converged = log[-1].residual <= params.tol_ge
    wall = time.perf_counter() - started
    if converged:
        logger.info("[Flow] %s: converged after %d steps, residual=%.3e",
                    model.name, len(log) - 1, log[-1].residual)
    else:
        logger.warning("[Flow] %s: stopped at max_iter=%d with residual=%.3e",
                       model.name, params.max_iter, log[-1].residual)
    return FlowResult(p, log, converged, wall, lam, scheme, rejected, dissipation)


# --- Epsilon-geodesics ---

@dataclass
class GeodesicPath:
    times: np.ndarray
    potentials: List[PotentialField]
    epsilon: float
    residuals: np.ndarray
    converged: bool = True
    newton_iterations: int = 0
    continuation_steps: int = 1

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))

    def sup_distance(self, other: "GeodesicPath") -> float:
        if len(self.potentials) != len(other.potentials):
            raise ValueError("paths have different time grids")
        return float(max(np.max(np.abs(a.u - b.u))
                         for a, b in zip(self.potentials, other.potentials)))


@dataclass(frozen=True)
class _BlockOperators:
    d_tt_time: sparse.csr_matrix
    d_tt_fiber: sparse.csr_matrix
    d_mixed: sparse.csr_matrix
    interior: np.ndarray


@lru_cache(maxsize=8)
def _block_operators(n_times: int, fiber: numerics.Axis) -> _BlockOperators:
    time_axis = numerics.chart_axis(n_times, 0.0, 1.0)
    eye_tau = sparse.identity(n_times, format="csr")
    eye_t = sparse.identity(fiber.size, format="csr")
    d_tau1 = sparse.csr_matrix(numerics.differentiation_matrix(time_axis, 1))
    d_tau2 = sparse.csr_matrix(numerics.differentiation_matrix(time_axis, 2))
    d_t1 = sparse.csr_matrix(numerics.differentiation_matrix(fiber, 1))
    d_t2 = sparse.csr_matrix(numerics.differentiation_matrix(fiber, 2))
    mask = np.zeros((n_times, fiber.size), dtype=bool)
    mask[1:-1, 1:-1] = True
    return _BlockOperators(sparse.kron(d_tau2, eye_t, format="csr"),
                           sparse.kron(eye_tau, d_t2, format="csr"),
                           sparse.kron(d_tau1, d_t1, format="csr"),
                           np.flatnonzero(mask.ravel()))


def _block_terms(w: np.ndarray, psi_tt: np.ndarray, ops: _BlockOperators):
    flat = w.ravel()
    w_tau2 = ops.d_tt_time @ flat
    w_tt = ops.d_tt_fiber @ flat
    w_mix = ops.d_mixed @ flat
    phi_tt = np.tile(psi_tt, w.shape[0]) + w_tt
    return w_tau2, phi_tt, w_mix


def _block_residual(w: np.ndarray, psi_tt: np.ndarray, eps: float, ops: _BlockOperators):
    """(phi_ττ phi_tt - phi_τt^2) / psi_tt - eps on the block."""
    w_tau2, phi_tt, w_mix = _block_terms(w, psi_tt, ops)
    ref = np.tile(psi_tt, w.shape[0])
    return (w_tau2 * phi_tt - w_mix ** 2) / ref - eps, phi_tt / ref


def _newton_block(w: np.ndarray, psi_tt: np.ndarray, eps: float, eps_pd: float,
                  ops: _BlockOperators):
    """Damped Newton on the interior of one (τ, t) block. Returns (w, residual, iters, ok)."""
    w = w.copy()
    idx = ops.interior
    ref = np.tile(psi_tt, w.shape[0])
    res, ratio = _block_residual(w, psi_tt, eps, ops)
    norm = float(np.max(np.abs(res[idx])))
    for iteration in range(NEWTON_MAX_ITER):
        if norm <= NEWTON_TOL:
            return w, norm, iteration, True
        w_tau2, phi_tt, w_mix = _block_terms(w, psi_tt, ops)
        jac = (sparse.diags(phi_tt / ref) @ ops.d_tt_time
               + sparse.diags(w_tau2 / ref) @ ops.d_tt_fiber
               - sparse.diags(2.0 * w_mix / ref) @ ops.d_mixed).tocsr()
        sub = jac[idx][:, idx].tocsc()
        step = spsolve(sub, -res[idx])
        if not np.all(np.isfinite(step)):
            return w, norm, iteration, False
        damping = 1.0
        improved = False
        for _ in range(12):
            trial = w.ravel().copy()
            trial[idx] += damping * step
            trial = trial.reshape(w.shape)
            trial_res, trial_ratio = _block_residual(trial, psi_tt, eps, ops)
            trial_norm = float(np.max(np.abs(trial_res[idx])))
            if np.all(trial_ratio > eps_pd) and trial_norm < norm:
                improved = True
                break
            damping *= NEWTON_DAMPING
        if not improved:
            return w, norm, iteration, False
        w, res, norm = trial, trial_res, trial_norm
    return w, norm, NEWTON_MAX_ITER, norm <= NEWTON_TOL


def _boundary_profile(w0: np.ndarray, w1: np.ndarray, taus: np.ndarray, eps: float) -> np.ndarray:
    """Linear interpolation minus eps/2 tau(1 - tau), exact for constant shifts of psi."""
    lin = (1.0 - taus)[:, None] * w0[None, :] + taus[:, None] * w1[None, :]
    return lin - 0.5 * eps * (taus * (1.0 - taus))[:, None]


def _solve_base_point(w0: np.ndarray, w1: np.ndarray, psi_tt: np.ndarray, eps: float,
                      eps_pd: float, taus: np.ndarray, ops: _BlockOperators):
    """Continuation in the endpoint difference, starting from the stationary path at w0."""
    w = _boundary_profile(w0, w0, taus, eps)
    reached = 0.0
    step = 1.0
    iterations = 0
    stages = 0
    norm = 0.0
    while reached < 1.0:
        target = min(1.0, reached + step)
        end = w0 + target * (w1 - w0)
        guess = w + ((target - reached) * taus)[:, None] * (w1 - w0)[None, :]
        guess[:, [0, -1]] = _boundary_profile(w0[[0, -1]], end[[0, -1]], taus, eps)
        guess[0], guess[-1] = w0, end
        solved, norm, its, ok = _newton_block(guess, psi_tt, eps, eps_pd, ops)
        iterations += its
        if not ok:
            step *= 0.5
            if step < 1.0 / 256:
                return solved, norm, iterations, stages, False
            continue
        w, reached = solved, target
        stages += 1
        step = min(1.0, 2.0 * step)
    return w, norm, iterations, stages, True


def epsilon_geodesic(phi0: PotentialField, phi1: PotentialField, eps: float,
                     model: FibrationModel, n_times: int = DEFAULT_TIME_SAMPLES) -> GeodesicPath:
    """Solve (phi_ττ - |d^V phi_τ|^2) phi_tt = eps psi_tt per base point.

    Dirichlet data: the endpoints at τ = 0, 1 and the boundary profile at the
    fiber chart ends.
    """
    if not eps > 0 or eps > 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {eps}")
    if not model.reduced:
        raise ValueError("epsilon-geodesics are solved in the invariant modes")
    for p in (phi0, phi1):
        if not p.model.grid.matches(model.grid):
            raise ValueError("endpoint lives on a different grid")
    ops = _block_operators(n_times, model.fiber_axis)
    taus = np.linspace(0.0, 1.0, n_times)
    psi_tt = model.reference_jets["tt"]
    n_base = model.grid.shape[0]

    field_path = np.empty((n_times,) + model.grid.shape)
    worst = 0.0
    total_iterations = 0
    max_stages = 0
    converged = True
    for i in range(n_base):
        w, norm, its, stages, ok = _solve_base_point(phi0.u[i], phi1.u[i], psi_tt[i], eps,
                                                     model.eps_pd, taus, ops)
        field_path[:, i, :] = w
        worst = max(worst, norm)
        total_iterations += its
        max_stages = max(max_stages, stages)
        converged = converged and ok
    if not converged:
        logger.warning("[Geodesic] Newton did not converge, last residual %.3e", worst)

    field_path[0] = phi0.u
    field_path[-1] = phi1.u
    potentials = [phi0] + [compute_jets(model, field_path[k]) for k in range(1, n_times - 1)] + [phi1]
    residuals = np.zeros(n_times)
    for i in range(n_base):
        res, _ = _block_residual(field_path[:, i, :], psi_tt[i], eps, ops)
        per_time = np.abs(res.reshape(n_times, -1)[1:-1, 1:-1]).max(axis=1)
        residuals[1:-1] = np.maximum(residuals[1:-1], per_time)
    logger.info("[Geodesic] eps=%.1e residual=%.3e newton=%d continuation=%d",
                eps, float(residuals.max()), total_iterations, max_stages)
    return GeodesicPath(taus, potentials, eps, residuals, converged, total_iterations, max_stages)


def exact_dilation_geodesic(model: FibrationModel, shift: float, eps: float,
                            n_times: int = DEFAULT_TIME_SAMPLES) -> GeodesicPath:
    """psi + τ shift - eps/2 τ(1 - τ), the exact solution between psi and psi + shift."""
    taus = np.linspace(0.0, 1.0, n_times)
    ones = np.ones(model.grid.shape)
    potentials = [compute_jets(model, (tau * shift - 0.5 * eps * tau * (1 - tau)) * ones)
                  for tau in taus]
    return GeodesicPath(taus, potentials, eps, np.zeros(n_times), True, 0, 0)


def fiber_shift_geodesic(model: FibrationModel, shift: float,
                         n_times: int = DEFAULT_TIME_SAMPLES) -> GeodesicPath:
    """The eps = 0 geodesic q F(t + τ a) between q F(t) and q F(t + a) for split references.

    Jets come from the closed form: phi_bb is the reference one, phi_bt = 0 and
    phi_tt = q F''(t + τ a).
    """
    ref = model.reference
    if ref.r != 0 or ref.shift != 0:
        raise ValueError("fiber shifts are geodesics only for split references")
    taus = np.linspace(0.0, 1.0, n_times)
    _, t = model.grid.mesh()
    jets = model.reference_jets
    base_part = np.logaddexp(0.0, t)
    potentials = []
    for tau in taus:
        w = t + tau * shift
        u = ref.q * (np.logaddexp(0.0, w) - base_part)
        potentials.append(PotentialField.from_jets(model, u, jets["bb"], np.zeros_like(u),
                                                   ref.q * expit(w) * expit(-w), jets["tt"]))
    return GeodesicPath(taus, potentials, 0.0, np.zeros(n_times), True, 0, 0)


# --- Convexity ---

@dataclass
class ConvexityReport:
    times: np.ndarray
    values: np.ndarray
    second_differences: np.ndarray
    bound_constant: float
    epsilon: float

    @property
    def min_second_difference(self) -> float:
        return float(np.min(self.second_differences))

    @property
    def lower_bound(self) -> float:
        return -self.bound_constant * self.epsilon

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for k, (tau, value) in enumerate(zip(self.times, self.values)):
            second = self.second_differences[k - 1] if 0 < k < len(self.times) - 1 else float("nan")
            out.append({"t": float(tau), "L_value": float(value),
                        "second_difference": float(second), "epsilon": self.epsilon})
        return out


def convexity_report(path: GeodesicPath, model: FibrationModel,
                     lam: Optional[float] = None) -> ConvexityReport:
    """Centered second differences of τ -> L(phi_τ, psi) and the constant of the eps-bound."""
    if len(path.potentials) < 5:
        raise ValueError("convexity report needs at least 5 time samples")
    lam = functionals.topological_lambda(model) if lam is None else lam
    values = np.array([functionals.donaldson(p, model, lam) for p in path.potentials])
    h = float(path.times[1] - path.times[0])
    second = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / h ** 2
    bound = max(max(functionals.second_variation_bound(p, model, lam) for p in path.potentials), 0.0)
    report = ConvexityReport(path.times, values, second, bound, path.epsilon)
    logger.info("[Geodesic] convexity: min second difference %.3e, bound %.3e",
                report.min_second_difference, report.lower_bound)
    return report


def check_minimum(flow_limit: PotentialField, candidates: Sequence[PotentialField],
                  model: FibrationModel, lam: Optional[float] = None, tol: float = 1e-3) -> float:
    """min_k L(phi_k) - L(phi_GE); raises when a candidate undercuts the flow limit by more than tol."""
    lam = functionals.topological_lambda(model) if lam is None else lam
    floor = functionals.donaldson(flow_limit, model, lam)
    gap = min(functionals.donaldson(p, model, lam) for p in candidates) - floor
    if gap < -tol:
        raise InvariantViolation(f"candidate undercuts the flow limit by {-gap:.3e}", "minimum")
    return gap
