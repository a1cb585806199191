"""
Finsler metrics on split rank-2 bundles E = O(a) + O(b) over P^1 and their
Kobayashi curvature.

A circle-invariant Finsler metric is a function of the reduced variables
(s, x1, x2) with s = log|z|^2 and x_i = log|zeta_i|^2:

    G = exp(scale) * (k1 (1+|z|^2)^-a |zeta1|^2 + k2 (1+|z|^2)^-b |zeta2|^2) * (1 + eps * S)

where S = 4 sigma(y)(1 - sigma(y)) and y = e2 - e1 is the log-ratio of the two
Hermitian terms, so that in the rescaled coordinates of the Hermitian part the
metric is the same for all degrees. In the frame zeta_i d/dzeta_i the complex
Hessians of G become real Hessians in (s, x1, x2), so both sides of
c(log G) = -Psi are evaluated from closed-form derivatives.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from app.core.errors import AdmissibilityError, Unsupported
from app.core import geometry
from app.core.geometry import FibrationModel, ReferencePotential

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinslerMetric:
    """Strongly pseudo-convex circle-invariant Finsler function on O(a) + O(b)."""
    degrees: Tuple[int, int]
    weights: Tuple[float, float] = (1.0, 1.0)
    epsilon: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if len(self.degrees) != 2:
            raise Unsupported("only rank-2 split bundles are modelled")
        if min(self.weights) <= 0:
            raise ValueError("Finsler weights must be positive")
        if abs(self.epsilon) >= 0.25:
            raise AdmissibilityError("perturbation too large for strong pseudo-convexity",
                                     eigenvalue=float(self.epsilon))

    @property
    def hermitian(self) -> bool:
        return self.epsilon == 0.0

    def scaled(self, c: float) -> "FinslerMetric":
        return FinslerMetric(self.degrees, self.weights, self.epsilon, self.scale + c)

    def _exponents(self, s: np.ndarray, x1: np.ndarray, x2: np.ndarray):
        ell = np.logaddexp(0.0, s)
        a, b = self.degrees
        return (np.log(self.weights[0]) - a * ell + x1,
                np.log(self.weights[1]) - b * ell + x2)

    def log_value(self, s: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        e1, e2 = self._exponents(s, x1, x2)
        y = e2 - e1
        bump = 4.0 * expit(y) * expit(-y)
        return self.scale + np.logaddexp(e1, e2) + np.log1p(self.epsilon * bump)

    def value(self, s: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return np.exp(self.log_value(s, x1, x2))

    def log_derivatives(self, s: np.ndarray, x1: np.ndarray, x2: np.ndarray
                        ) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient (..., 3) and Hessian (..., 3, 3) of log G in (s, x1, x2)."""
        a, b = self.degrees
        sig = expit(s)
        dd_ell = sig * (1.0 - sig)
        e1, e2 = self._exponents(s, x1, x2)
        w1 = expit(e1 - e2)
        w2 = expit(e2 - e1)
        shape = np.broadcast(s, x1, x2).shape
        grad_a = [np.stack(np.broadcast_arrays(-a * sig, np.ones(shape), np.zeros(shape)), -1),
                  np.stack(np.broadcast_arrays(-b * sig, np.zeros(shape), np.ones(shape)), -1)]
        mean = w1[..., None] * grad_a[0] + w2[..., None] * grad_a[1]
        grad = mean.copy()
        hess = np.zeros(shape + (3, 3))
        for w, g, d in ((w1, grad_a[0], a), (w2, grad_a[1], b)):
            hess += w[..., None, None] * g[..., :, None] * g[..., None, :]
            hess[..., 0, 0] += w * (-d * dd_ell)
        hess -= mean[..., :, None] * mean[..., None, :]

        if self.epsilon != 0.0:
            y = e2 - e1
            sy = expit(y)
            base = sy * expit(-y)
            bump = 4.0 * base
            d_bump = 4.0 * base * (1.0 - 2.0 * sy)
            dd_bump = 4.0 * base * ((1.0 - 2.0 * sy) ** 2 - 2.0 * base)
            denom = 1.0 + self.epsilon * bump
            p1 = self.epsilon * d_bump / denom
            p2 = self.epsilon * dd_bump / denom - p1 ** 2
            dy = grad_a[1] - grad_a[0]
            grad += p1[..., None] * dy
            hess += p2[..., None, None] * dy[..., :, None] * dy[..., None, :]
            hess[..., 0, 0] += p1 * (a - b) * dd_ell
        return grad, hess


@dataclass(frozen=True)
class KobayashiCurvature:
    """Psi and c(phi_G) over the reduced (s, t) grid of a projective model."""
    model: FibrationModel
    psi: np.ndarray
    psi_trace: np.ndarray
    c: np.ndarray
    c_trace: np.ndarray
    fiber_eigenvalue: np.ndarray
    # smallest eigenvalue of the fiber Hessian against its Hermitian part
    relative_fiber_eigenvalue: np.ndarray

    def identity_gap(self) -> float:
        """max |tr c(phi_G) + tr Psi|."""
        return float(np.max(np.abs(self.c_trace + self.psi_trace)))


def kobayashi_curvature(metric: FinslerMetric, model: FibrationModel) -> KobayashiCurvature:
    """Psi = K v v / G from the homogeneous Hessian of G, and c(log G) in the chart zeta = (1, v).

    Strong pseudo-convexity is checked on the fiber Hessian rescaled by the
    weights w_i of the Hermitian part, since in the zeta_i d/dzeta_i frame its
    entries carry a factor |zeta_i| |zeta_j|.
    """
    if model.base != geometry.SPHERE or not model.reduced:
        raise Unsupported("Kobayashi curvature is evaluated on the sphere-base reduced grid")
    s, t = model.grid.mesh()
    zero = np.zeros_like(t)
    grad, hess = metric.log_derivatives(s, zero, t)
    # homogeneous Hessian of G divided by G
    g_hess = hess + grad[..., :, None] * grad[..., None, :]
    e1, e2 = metric._exponents(s, zero, t)
    root = np.sqrt(np.stack([expit(e1 - e2), expit(e2 - e1)], -1))
    relative = g_hess[..., 1:, 1:] / (root[..., :, None] * root[..., None, :])
    relative_eig = np.linalg.eigvalsh(relative)[..., 0]
    if np.any(relative_eig <= model.eps_pd):
        idx = np.unravel_index(int(np.argmin(relative_eig)), relative_eig.shape)
        raise AdmissibilityError("Finsler metric is not strongly pseudo-convex",
                                 location=tuple(int(i) for i in idx),
                                 eigenvalue=float(relative_eig[idx]))
    mixed = g_hess[..., 0, 1:] / root
    solved = np.linalg.solve(relative, mixed[..., None])[..., 0]
    psi = -(g_hess[..., 0, 0] - np.sum(mixed * solved, axis=-1))

    # c(phi) for phi(s, t) = log G(s, 0, t): Schur complement of the (s, t) block
    c = hess[..., 0, 0] - hess[..., 0, 2] ** 2 / hess[..., 2, 2]
    g = model.metric_field()
    return KobayashiCurvature(model, psi, psi / g, c, c / g, hess[..., 2, 2], relative_eig)


def dual_reference(metric: FinslerMetric) -> ReferencePotential:
    """phi* = log G*(1, v) for the dual Hermitian metric of a Hermitian G.

    G*(xi) = |xi1|^2 / h1 + |xi2|^2 / h2 has the closed form
    d1*l(s) - log(k1) - scale + log(1 + exp(t + (d2 - d1) l(s) + log(k1/k2))).
    """
    if not metric.hermitian:
        raise Unsupported("dual metric is closed-form only for Hermitian G")
    d1, d2 = metric.degrees
    k1, k2 = metric.weights
    return ReferencePotential(float(d1), 1.0, float(d2 - d1), geometry.SPHERE,
                              shift=float(np.log(k1 / k2)))
