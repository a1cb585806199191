"""
Numerics core - grids, differentiation, quadrature and small Hermitian algebra.

Axes come in two kinds:
- periodic: uniform samples of a circle, differentiated spectrally
- chart: uniform samples of an interval of a chart coordinate (possibly the
  log-modulus t = log|v|^2), differentiated with 4th-order centered stencils
  and one-sided closures at both ends

A complex coordinate is a pair of consecutive real axes (x, y) with z = x + iy.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from app.core.errors import AdmissibilityError, NonFiniteInput

logger = logging.getLogger(__name__)

PERIODIC = "periodic"
CHART = "chart"

IDENTITY = "identity"
LOG_MODULUS = "log-modulus"

# rows at each end of a chart axis differentiated with one-sided stencils
CLOSURE_ROWS = 2

MIN_AXIS_SIZE = 8
DEFAULT_EPS_PD = 1e-10


@dataclass(frozen=True)
class Axis:
    """One real axis of a grid."""
    kind: str
    size: int
    lower: float
    upper: float
    coordinate: str = IDENTITY
    # exponential decay rates declared for fields at the two chart ends
    decay: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in (PERIODIC, CHART):
            raise ValueError(f"unknown axis kind '{self.kind}'")
        if self.size < MIN_AXIS_SIZE:
            raise ValueError(f"axis size {self.size} below minimum {MIN_AXIS_SIZE}")
        if not self.upper > self.lower:
            raise ValueError("axis must have upper > lower")
        if self.coordinate not in (IDENTITY, LOG_MODULUS):
            raise ValueError(f"unknown coordinate map '{self.coordinate}'")

    @property
    def spacing(self) -> float:
        if self.kind == PERIODIC:
            return (self.upper - self.lower) / self.size
        return (self.upper - self.lower) / (self.size - 1)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def points(self) -> np.ndarray:
        if self.kind == PERIODIC:
            return self.lower + self.spacing * np.arange(self.size)
        return np.linspace(self.lower, self.upper, self.size)

    def chart_values(self) -> np.ndarray:
        """Modulus of the underlying complex chart coordinate at the samples."""
        pts = self.points()
        if self.coordinate == LOG_MODULUS:
            return np.exp(0.5 * pts)
        return pts

    def weights(self) -> np.ndarray:
        """Quadrature weights: exact periodic sum or trapezoid rule."""
        w = np.full(self.size, self.spacing)
        if self.kind == CHART:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w


def periodic_axis(size: int, lower: float = 0.0, upper: float = 1.0) -> Axis:
    return Axis(PERIODIC, size, lower, upper)


def chart_axis(size: int, lower: float, upper: float, coordinate: str = IDENTITY,
               decay: Tuple[float, float] = (1.0, 1.0)) -> Axis:
    return Axis(CHART, size, lower, upper, coordinate, decay)


def log_axis(size: int, extent: float, decay: Tuple[float, float] = (1.0, 1.0)) -> Axis:
    """Symmetric log-modulus chart axis t in [-extent, extent]."""
    return Axis(CHART, size, -extent, extent, LOG_MODULUS, decay)


@dataclass(frozen=True)
class Grid2D:
    """Product of real axes; two axes form one complex chart or a reduced (b, t) plane."""
    axes: Tuple[Axis, ...]

    def __post_init__(self):
        if len(self.axes) == 0:
            raise ValueError("grid needs at least one axis")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(ax.size for ax in self.axes)

    @property
    def spacings(self) -> Tuple[float, ...]:
        return tuple(ax.spacing for ax in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def mesh(self) -> List[np.ndarray]:
        return np.meshgrid(*[ax.points() for ax in self.axes], indexing="ij")

    def weights(self) -> np.ndarray:
        w = np.ones(())
        for ax in self.axes:
            w = np.multiply.outer(w, ax.weights())
        return w

    def matches(self, other: "Grid2D") -> bool:
        return self.axes == other.axes


# --- Stencils and differentiation matrices ---

def fd_weights(offsets: Sequence[int], order: int) -> np.ndarray:
    """Finite-difference weights for the given integer offsets (unit spacing)."""
    offs = np.asarray(offsets, dtype=float)
    k = len(offs)
    vander = np.vander(offs, k, increasing=True).T
    rhs = np.zeros(k)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vander, rhs)


@lru_cache(maxsize=64)
def differentiation_matrix(axis: Axis, order: int) -> np.ndarray:
    """Dense matrix of d^order/dx^order on the axis samples."""
    if order not in (1, 2):
        raise ValueError("only first and second derivatives are supported")
    n = axis.size
    h = axis.spacing
    if axis.kind == PERIODIC:
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=axis.length / n)
        if order == 1 and n % 2 == 0:
            k[n // 2] = 0.0
        symbol = (1j * k) ** order
        eye = np.eye(n)
        mat = np.fft.ifft(symbol[:, None] * np.fft.fft(eye, axis=0), axis=0).real
        return mat
    mat = np.zeros((n, n))
    centered = fd_weights([-2, -1, 0, 1, 2], order)
    for i in range(CLOSURE_ROWS, n - CLOSURE_ROWS):
        mat[i, i - 2:i + 3] = centered
    width = 6
    for i in range(CLOSURE_ROWS):
        mat[i, :width] = fd_weights([j - i for j in range(width)], order)
    for i in range(n - CLOSURE_ROWS, n):
        cols = list(range(n - width, n))
        mat[i, n - width:] = fd_weights([j - i for j in cols], order)
    return mat / h ** order


def _check_finite(field: np.ndarray, what: str = "field"):
    finite = np.isfinite(field)
    if not np.all(finite):
        loc = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise NonFiniteInput(f"non-finite value in {what}", location=loc)


def axis_derivative(field: np.ndarray, axis: Axis, dim: int, order: int = 1) -> np.ndarray:
    """Derivative of a sampled field along one real axis (array dimension dim)."""
    _check_finite(field)
    mat = differentiation_matrix(axis, order)
    out = np.tensordot(mat, field, axes=([1], [dim]))
    return np.moveaxis(out, 0, dim)


def differentiate(field: np.ndarray, grid: Grid2D, axis: int = 0, kind: str = "d") -> np.ndarray:
    """Wirtinger derivative d/dz or d/dzbar along complex coordinate `axis`.

    Complex coordinate k is built from real axes 2k and 2k+1.
    """
    if kind not in ("d", "dbar"):
        raise ValueError(f"unknown derivative kind '{kind}'")
    if axis < 0 or 2 * axis + 1 >= grid.ndim:
        raise ValueError(f"complex axis {axis} not available on a {grid.ndim}-axis grid")
    field = np.asarray(field, dtype=complex)
    dx = axis_derivative(field, grid.axes[2 * axis], 2 * axis)
    dy = axis_derivative(field, grid.axes[2 * axis + 1], 2 * axis + 1)
    sign = -1.0 if kind == "d" else 1.0
    return 0.5 * (dx + sign * 1j * dy)


# --- Quadrature ---

def quadrature(field: np.ndarray, measure: np.ndarray, grid: Union[Grid2D, Axis]) -> float:
    """Integral of field against a nonnegative density sampled on the grid."""
    field = np.asarray(field, dtype=float)
    measure = np.asarray(measure, dtype=float)
    _check_finite(field)
    if np.any(measure < 0):
        loc = tuple(int(i) for i in np.argwhere(measure < 0)[0])
        raise ValueError(f"negative measure entry at {loc}")
    weights = grid.weights()
    return float(np.sum(field * measure * weights))


def integrate_along(field: np.ndarray, axis: Axis, dim: int) -> np.ndarray:
    """Partial integral along one array dimension (periodic sum or trapezoid)."""
    if axis.kind == PERIODIC:
        return np.sum(field, axis=dim) * axis.spacing
    return integrate.trapezoid(field, dx=axis.spacing, axis=dim)


# --- Hermitian linear algebra ---

def is_hermitian(mat: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(mat - np.conj(np.swapaxes(mat, -1, -2))), initial=0.0) <= tol)


def hermitian_inverse(mat: np.ndarray, eps_pd: float = DEFAULT_EPS_PD) -> np.ndarray:
    """Inverse of a (stack of) Hermitian positive definite matrices."""
    mat = np.asarray(mat)
    _check_finite(mat, "matrix")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if not is_hermitian(mat, 1e-12 * scale):
        raise ValueError("matrix is not Hermitian")
    eig = np.linalg.eigvalsh(mat)
    smallest = eig[..., 0]
    if np.any(smallest <= eps_pd):
        idx = np.unravel_index(int(np.argmin(smallest)), np.shape(smallest)) if np.ndim(smallest) else ()
        raise AdmissibilityError("matrix not positive definite",
                                 location=tuple(int(i) for i in idx),
                                 eigenvalue=float(np.min(smallest)))
    eye = np.broadcast_to(np.eye(mat.shape[-1], dtype=mat.dtype), mat.shape)
    inv = np.linalg.solve(mat, eye)
    return 0.5 * (inv + np.conj(np.swapaxes(inv, -1, -2)))


@dataclass(frozen=True)
class HermitianBlockMatrix:
    """Hermitian A = [[A1, E], [E*, D]] with D = [[B2, B3], [B3*, C3]] and E = [A2, A3].

    `head` is the size of A1, `middle` the size of B2.
    """
    matrix: np.ndarray
    head: int
    middle: int
    eps_pd: float = DEFAULT_EPS_PD

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError("block matrix must be square")
        if not 0 < self.head < n or not 0 < self.middle < n - self.head:
            raise ValueError("block partition out of range")
        scale = max(1.0, float(np.max(np.abs(self.matrix))))
        if not is_hermitian(self.matrix, 1e-12 * scale):
            raise ValueError("block matrix is not Hermitian")

    @property
    def D(self) -> np.ndarray:
        return self.matrix[self.head:, self.head:]

    @property
    def E(self) -> np.ndarray:
        return self.matrix[:self.head, self.head:]

    @property
    def A1(self) -> np.ndarray:
        return self.matrix[:self.head, :self.head]

    @property
    def A2(self) -> np.ndarray:
        return self.E[:, :self.middle]

    @property
    def A3(self) -> np.ndarray:
        return self.E[:, self.middle:]

    @property
    def B2(self) -> np.ndarray:
        return self.D[:self.middle, :self.middle]

    @property
    def B3(self) -> np.ndarray:
        return self.D[:self.middle, self.middle:]

    @property
    def C3(self) -> np.ndarray:
        return self.D[self.middle:, self.middle:]


def _adjoint(mat: np.ndarray) -> np.ndarray:
    return np.conj(mat.T)


def schur_gap(block: HermitianBlockMatrix) -> np.ndarray:
    """E D^-1 E* - A2 B2^-1 A2*, positive semidefinite when D is positive definite."""
    d_inv = hermitian_inverse(block.D, block.eps_pd)
    b2_inv = hermitian_inverse(block.B2, block.eps_pd)
    gap = block.E @ d_inv @ _adjoint(block.E) - block.A2 @ b2_inv @ _adjoint(block.A2)
    return 0.5 * (gap + _adjoint(gap))


def schur_gap_closed_form(block: HermitianBlockMatrix) -> np.ndarray:
    """(A3 - A2 B2^-1 B3)(C3 - B3* B2^-1 B3)^-1 (A3 - A2 B2^-1 B3)*."""
    b2_inv = hermitian_inverse(block.B2, block.eps_pd)
    left = block.A3 - block.A2 @ b2_inv @ block.B3
    complement = block.C3 - _adjoint(block.B3) @ b2_inv @ block.B3
    complement = 0.5 * (complement + _adjoint(complement))
    gap = left @ hermitian_inverse(complement, block.eps_pd) @ _adjoint(left)
    return 0.5 * (gap + _adjoint(gap))


def random_block_matrix(rng: np.random.Generator, head: int = 2, middle: int = 2,
                        tail: int = 2, margin: float = 0.1) -> HermitianBlockMatrix:
    """Random Hermitian block matrix whose D block is positive definite."""
    n = head + middle + tail
    raw = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    mat = 0.5 * (raw + _adjoint(raw))
    k = head
    d = mat[k:, k:]
    shift = margin - float(np.linalg.eigvalsh(d)[0])
    if shift > 0:
        mat[k:, k:] = d + shift * np.eye(n - k)
    return HermitianBlockMatrix(mat, head, middle)
