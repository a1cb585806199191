"""
Exact intersection arithmetic for curve bases with P^1 fibers.

Classes live in the truncated ring Q[alpha, beta] / (alpha^2, beta^2): alpha is
the pullback of a point of the base curve, beta restricts to a point class on
every fiber, and alpha*beta pairs to 1 with [X]. Projective bundles
P(O(a) + O(b)) fit the same ring through

    xi = c1(O_{P(E)}(1)) = beta - (deg E / 2) alpha,   xi^2 = -deg E,
    K_{P(E)/M} = -2 xi - deg E * alpha = -2 beta,

and the Kahler class of the base is [omega] = 2 pi * omega_scale * alpha, with
omega_scale the rational multiple of the Fubini-Study class (volume 2 pi).
No floating point is used in this module.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple, Union

from app.core.errors import Unsupported

logger = logging.getLogger(__name__)

Number = Union[int, Fraction]

SEMISTABLE = "semistable"
STABLE = "stable"
UNSTABLE = "unstable"


def _frac(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10 ** 9)
    return Fraction(x)


@dataclass(frozen=True)
class CohomologyClass:
    """c0 + c_alpha * alpha + c_beta * beta + c_ab * alpha*beta."""
    c0: Fraction = Fraction(0)
    alpha: Fraction = Fraction(0)
    beta: Fraction = Fraction(0)
    ab: Fraction = Fraction(0)

    @classmethod
    def divisor(cls, alpha: Number, beta: Number) -> "CohomologyClass":
        return cls(Fraction(0), _frac(alpha), _frac(beta), Fraction(0))

    @classmethod
    def unit(cls) -> "CohomologyClass":
        return cls(Fraction(1))

    def __add__(self, other: "CohomologyClass") -> "CohomologyClass":
        return CohomologyClass(self.c0 + other.c0, self.alpha + other.alpha,
                               self.beta + other.beta, self.ab + other.ab)

    def __neg__(self) -> "CohomologyClass":
        return CohomologyClass(-self.c0, -self.alpha, -self.beta, -self.ab)

    def __sub__(self, other: "CohomologyClass") -> "CohomologyClass":
        return self + (-other)

    def __mul__(self, other) -> "CohomologyClass":
        if not isinstance(other, CohomologyClass):
            k = _frac(other)
            return CohomologyClass(k * self.c0, k * self.alpha, k * self.beta, k * self.ab)
        return CohomologyClass(
            self.c0 * other.c0,
            self.c0 * other.alpha + self.alpha * other.c0,
            self.c0 * other.beta + self.beta * other.c0,
            self.c0 * other.ab + self.ab * other.c0
            + self.alpha * other.beta + self.beta * other.alpha,
        )

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "CohomologyClass":
        out = CohomologyClass.unit()
        for _ in range(k):
            out = out * self
        return out

    def integrate(self) -> Fraction:
        """Pairing with the fundamental class [X]."""
        return self.ab

    def fiber_degree(self) -> Fraction:
        """Pairing of a divisor with a fiber (the class alpha)."""
        return self.beta

    def section_degree(self, section: "CohomologyClass") -> Fraction:
        return (self * section).integrate()


ALPHA = CohomologyClass.divisor(1, 0)
BETA = CohomologyClass.divisor(0, 1)


@dataclass(frozen=True)
class Subfibration:
    """A catalogued subfibration Y with relative dimension and its class."""
    name: str
    relative_dim: int
    # class of Y in X (alpha*beta-type pairing); for a section this is a divisor class
    cycle: CohomologyClass
    # sub-bundle F when Y = P(F)
    sub_degrees: Tuple[int, ...] = ()


@dataclass(frozen=True)
class IntersectionClassData:
    """Exact ([omega]^k c1(L)^j)[X] and the subfibration catalogue."""
    tag: str
    relative_dim: int
    omega_scale: Fraction
    line_bundle: CohomologyClass
    canonical: Optional[CohomologyClass]
    numbers: Dict[Tuple[int, int], Fraction]
    catalogue: Tuple[Subfibration, ...] = ()
    bundle_degrees: Tuple[int, ...] = ()

    def __post_init__(self):
        top = self.numbers[(1, self.relative_dim)]
        if top <= 0:
            raise ValueError(f"([omega] c1(L)^{self.relative_dim})[X] = {top} is not positive; "
                             "L is not relatively ample in cohomology")

    @property
    def omega(self) -> CohomologyClass:
        return ALPHA * (2 * self.omega_scale)


def _numbers(line: CohomologyClass, omega_scale: Fraction) -> Dict[Tuple[int, int], Fraction]:
    omega = ALPHA * (2 * omega_scale)
    # the factor pi of [omega] = 2 pi omega_scale alpha is carried by the formulas
    return {(k, j): ((omega ** k) * (line ** j)).integrate()
            for k in range(0, 2) for j in range(0, 3) if k + j == 2}


def product_data(a: int, b: int, omega_scale: Number = 1) -> IntersectionClassData:
    """P^1 x P^1 (or torus x P^1 when a = 0 and only the fiber is used) with L = O(a, b)."""
    scale = _frac(omega_scale)
    line = CohomologyClass.divisor(a, b)
    catalogue = (
        Subfibration("section v=0", 0, BETA),
        Subfibration("section v=inf", 0, BETA),
    )
    return IntersectionClassData(f"O({a},{b})", 1, scale, line, BETA * -2,
                                 _numbers(line, scale), catalogue)


def projective_data(degrees: Sequence[int], omega_scale: Number = 1,
                    line: Optional[CohomologyClass] = None) -> IntersectionClassData:
    """P(E) for split E = O(d1) + O(d2) with O_{P(E)}(1) (or a supplied L)."""
    if len(degrees) != 2:
        raise Unsupported("projective data implemented for rank-2 split bundles")
    scale = _frac(omega_scale)
    deg = sum(degrees)
    xi = BETA - ALPHA * Fraction(deg, 2)
    canonical = xi * -2 - ALPHA * deg
    # the section P(O(d_i)) has class xi + d_j alpha (j != i), i.e. it meets xi in -d_i
    catalogue = tuple(
        Subfibration(f"P(O({d}))", 0, xi + ALPHA * degrees[1 - i], (d,))
        for i, d in enumerate(degrees)
    )
    line = xi if line is None else line
    tag = "P(" + "+".join(f"O({d})" for d in degrees) + ")"
    return IntersectionClassData(tag, 1, scale, line, canonical, _numbers(line, scale),
                                 catalogue, tuple(degrees))


def dual_projective_line_bundle(degrees: Sequence[int]) -> CohomologyClass:
    """L = (r+1) O_{P(E*)}(1) - pi^* det E on P(E*), so that pi_*(L + K) = E."""
    deg = sum(degrees)
    xi_dual = BETA + ALPHA * Fraction(deg, 2)
    return xi_dual * 3 - ALPHA * deg


def dual_projective_data(degrees: Sequence[int], omega_scale: Number = 1) -> IntersectionClassData:
    dual = [-d for d in degrees]
    data = projective_data(dual, omega_scale, line=dual_projective_line_bundle(degrees))
    return IntersectionClassData("P(E*) for E=" + "+".join(f"O({d})" for d in degrees),
                                 data.relative_dim, data.omega_scale, data.line_bundle,
                                 data.canonical, data.numbers, data.catalogue, tuple(degrees))


def intersection_data(model) -> IntersectionClassData:
    """Exact data matching a FibrationModel's line-bundle descriptor."""
    bundle = model.bundle
    if bundle.kind == "product":
        return product_data(bundle.degrees[0], bundle.degrees[1], model.omega_scale)
    return projective_data(bundle.degrees, model.omega_scale)


# --- Slopes and verdicts ---

def lambda_sub(data: IntersectionClassData, which: Union[str, Subfibration] = "X") -> Fraction:
    """lambda_{Y,L} = 2 pi m/(d+1) ([omega]^{m-1} L^{d+1})[Y] / ([omega]^m L^d)[Y] for m = 1.

    With [omega] = 2 pi omega_scale alpha the powers of pi cancel and the value is rational.
    """
    if isinstance(which, str):
        if which != "X":
            matches = [y for y in data.catalogue if y.name == which]
            if not matches:
                raise ValueError(f"'{which}' is not in the catalogue")
            which = matches[0]
        else:
            d = data.relative_dim
            numerator = data.numbers[(0, d + 1)]
            denominator = data.numbers[(1, d)] * Fraction(1, 2)
            return Fraction(1, d + 1) * numerator / denominator
    y = which
    line_on_y = (data.line_bundle * y.cycle).integrate()
    omega_on_y = (data.omega * y.cycle).integrate() * Fraction(1, 2)
    if omega_on_y == 0:
        raise ValueError(f"zero denominator for {y.name}")
    if y.relative_dim != 0:
        raise Unsupported("catalogued subfibrations are sections")
    return line_on_y / omega_on_y


@dataclass(frozen=True)
class StabilityVerdict:
    verdict: str
    lambda_x: Fraction
    slopes: Dict[str, Fraction]
    witness: Optional[str]
    catalogue_relative: bool = True

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict,
            "lambda_X": str(self.lambda_x),
            "lambda_Y": {k: str(v) for k, v in self.slopes.items()},
            "witness": self.witness,
            "catalogue_relative": self.catalogue_relative,
        }


def semistability_verdict(data: IntersectionClassData,
                          catalogue: Optional[Sequence[Subfibration]] = None) -> StabilityVerdict:
    """Compare lambda_Y with lambda_X over the catalogue; the witness minimizes lambda_Y."""
    entries = tuple(data.catalogue if catalogue is None else catalogue)
    if not entries:
        raise ValueError("empty subfibration catalogue")
    lam_x = lambda_sub(data, "X")
    slopes = {y.name: lambda_sub(data, y) for y in entries}
    witness = min(slopes, key=lambda name: (slopes[name], name))
    lowest = slopes[witness]
    if lowest < lam_x:
        verdict = UNSTABLE
    elif lowest == lam_x:
        verdict = SEMISTABLE
    else:
        verdict = STABLE
    logger.info("[Stability] %s: lambda_X=%s verdict=%s witness=%s",
                data.tag, lam_x, verdict, witness)
    return StabilityVerdict(verdict, lam_x, slopes, witness)


@dataclass(frozen=True)
class PolystabilityResult:
    polystable: bool
    filtration: Tuple[str, ...]
    slopes: Tuple[Fraction, ...]


def polystable_check_split(degrees: Sequence[int]) -> PolystabilityResult:
    """Split bundles over a curve are polystable exactly when all summand slopes agree."""
    if not degrees:
        raise Unsupported("empty bundle")
    if any(not isinstance(d, int) for d in degrees):
        raise Unsupported("only split bundles of line bundles O(d) are supported")
    slopes = tuple(Fraction(d) for d in degrees)
    tag = "P(" + "+".join(f"O({d})" for d in degrees) + ")"
    if len(degrees) == 1:
        return PolystabilityResult(True, (tag,), slopes)
    polystable = len(set(slopes)) == 1
    if not polystable:
        return PolystabilityResult(False, (), slopes)
    # X = Y_0 > Y_1 > ... with each step a maximal equal-slope summand
    chain = [tag]
    for k in range(1, len(degrees)):
        chain.append("P(" + "+".join(f"O({d})" for d in degrees[k:]) + ")")
    return PolystabilityResult(True, tuple(chain), slopes)


def bundle_slope(degrees: Sequence[int]) -> Fraction:
    return Fraction(sum(degrees), len(degrees))


@dataclass(frozen=True)
class SlopeBridge:
    slope: Fraction
    lambda_projective: Fraction
    bridged: Fraction

    @property
    def holds(self) -> bool:
        return self.slope == self.bridged


def projective_lambda(degrees: Sequence[int], omega_scale: Number = 1) -> Fraction:
    """lambda_{P(F), O_{P(F)}(1)} computed in the ring of P(F)."""
    scale = _frac(omega_scale)
    if len(degrees) == 1:
        # P(F) = M and O_{P(F)}(1) = F^{-1}
        return Fraction(-degrees[0]) / scale
    return lambda_sub(projective_data(degrees, scale), "X")


def slope_bridge(degrees: Sequence[int], omega_scale: Number = 1) -> SlopeBridge:
    """deg F / rank F against -(Vol / 2 pi m) lambda_{P(F), O(1)}, computed independently."""
    scale = _frac(omega_scale)
    lam = projective_lambda(degrees, scale)
    return SlopeBridge(bundle_slope(degrees), lam, -scale * lam)


def bundle_semistability(degrees: Sequence[int]) -> str:
    """Slope verdict of a split bundle against its summand sub-bundles."""
    mu = bundle_slope(degrees)
    subs = [Fraction(d) for d in degrees] if len(degrees) > 1 else []
    if any(s > mu for s in subs):
        return UNSTABLE
    if any(s == mu for s in subs):
        return SEMISTABLE
    return STABLE


# --- Riemann-Roch expansion ---

@dataclass(frozen=True)
class ExpansionCoefficients:
    tag: str
    a0: Fraction
    a1: Fraction
    b0: Fraction
    b1: Fraction

    def __post_init__(self):
        if self.b0 <= 0:
            raise ValueError("b0 must be positive")

    @property
    def df(self) -> Fraction:
        return (self.a1 * self.b0 - self.a0 * self.b1) / self.b0 ** 2

    @property
    def leading_slope(self) -> Fraction:
        return self.a0 / self.b0

    def degree(self, k: int) -> Fraction:
        return self.a0 * k * k + self.a1 * k

    def rank(self, k: int) -> Fraction:
        return self.b0 * k + self.b1

    def slope(self, k: int) -> Fraction:
        return self.degree(k) / self.rank(k)

    def to_row(self) -> Dict:
        return {"a0": self.a0, "a1": self.a1, "b0": self.b0, "b1": self.b1, "DF": self.df}


def grr_expansion(data: IntersectionClassData) -> ExpansionCoefficients:
    """a0, a1, b0, b1 of deg and rank of pi_*(L^k + K_{X/M}) for fiber dimension 1."""
    if data.canonical is None:
        raise ValueError("model carries no relative canonical class")
    if data.relative_dim != 1:
        raise Unsupported("expansion implemented for fiber dimension 1")
    line, canonical = data.line_bundle, data.canonical
    omega_pow = CohomologyClass.unit()  # [omega]^{m-1} with m = 1
    b0 = line.fiber_degree()
    b1 = canonical.fiber_degree() / 2
    a0 = ((line ** 2) * omega_pow).integrate() / 2
    a1 = (line * canonical * omega_pow).integrate() / 2
    return ExpansionCoefficients(data.tag, a0, a1, b0, b1)


def scaled_data(data: IntersectionClassData, k: int) -> IntersectionClassData:
    """Same triple with L replaced by L^k."""
    line = data.line_bundle * k
    return IntersectionClassData(f"{data.tag}^{k}", data.relative_dim, data.omega_scale, line,
                                 data.canonical, _numbers(line, data.omega_scale),
                                 data.catalogue, data.bundle_degrees)


@dataclass(frozen=True)
class ObstructionVerdict:
    df: Fraction
    obstructed: bool

    @property
    def verdict(self) -> str:
        return "no GE metric" if self.obstructed else "no obstruction from DF"


def df_obstruction(data: IntersectionClassData) -> ObstructionVerdict:
    coeffs = grr_expansion(data)
    return ObstructionVerdict(coeffs.df, coeffs.df < 0)


def sections_on_fiber(degree: int) -> int:
    """h^0(P^1, O(d))."""
    return max(degree + 1, 0)
