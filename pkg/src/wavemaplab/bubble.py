"""Closed-form bubble profiles, the linearized operators around Q and their
fundamental systems, the half-line identities that fix the modulation
constant, and the variation-of-constants solver for the elliptic operator.

Conventions
-----------
Q(R) = 2 arctan(R^2), Phi = R Q'(R) = 4R^2/(1+R^4).

L (elliptic sign)   = d_RR + (1/R) d_R - 4 cos(2Q)/R^2
L~ (spectral sign)  = -d_RR + 15/(4R^2) - 32R^2/(1+R^4)^2 = R^{1/2} L_spec R^{-1/2}

The elliptic kernel pair is (Phi/4, Theta); the Schroedinger pair for L~ is
(phi0, theta0) = (R^{1/2} Phi, R^{1/2} Theta/4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError, OrthogonalityError
from .numerics import (RadialFn, RadialGrid, cumulative_log, integrate_halfline,
                       log_derivatives)

PROFILE_KINDS = ("Q", "Phi", "Theta", "phi0", "theta0", "cos2Q", "sin2Q")
STATED_I1 = 3.0 * math.pi
STATED_I2 = 12.0 * math.pi


# ------------------------------------------------------------------ profiles
# Everything is written through s = R^2 + R^{-2} so that nothing overflows
# for R in [1e-70, 1e70].

def _sym(R):
    R = np.asarray(R, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return R * R + 1.0 / (R * R)


def Q(R):
    return 2.0 * np.arctan(np.asarray(R, dtype=float) ** 2)


def Phi(R):
    with np.errstate(divide="ignore"):
        return 4.0 / _sym(R)


def sinQ(R):
    return 0.5 * Phi(R)


def cosQ(R):
    R = np.asarray(R, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inv = 1.0 / (R * R)
        out = (inv - R * R) / (inv + R * R)
    return np.where(R == 0.0, 1.0, out)


def one_minus_cos2Q(R):
    """1 - cos 2Q = 8R^4/(1+R^4)^2, without cancellation."""
    p = Phi(R)
    return 0.5 * p * p


def cos2Q(R):
    return 1.0 - one_minus_cos2Q(R)


def sin2Q(R):
    return Phi(R) * cosQ(R)


def R_dPhi(R):
    """R Phi'(R) = 8R^2(1-R^4)/(1+R^4)^2."""
    return 2.0 * Phi(R) * cosQ(R)


def Theta(R):
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise DomainError("Theta is singular at R = 0")
    with np.errstate(over="ignore"):
        num = R ** 4 - R ** -4 + 8.0 * np.log(R)
    return num / (4.0 * _sym(R))


def dTheta(R):
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise DomainError("Theta is singular at R = 0")
    a = R ** 4 - R ** -4 + 8.0 * np.log(R)
    da = 4.0 * R ** 3 + 4.0 * R ** -5 + 8.0 / R
    b = 4.0 * _sym(R)
    db = 8.0 * (R - R ** -3)
    return (da * b - a * db) / (b * b)


def phi0(R):
    return np.sqrt(np.asarray(R, dtype=float)) * Phi(R)


def theta0(R):
    return np.sqrt(np.asarray(R, dtype=float)) * Theta(R) / 4.0


_EVAL = {"Q": Q, "Phi": Phi, "Theta": Theta, "phi0": phi0, "theta0": theta0,
         "cos2Q": cos2Q, "sin2Q": sin2Q}


def eval_profile(kind: str, R):
    """Closed-form profile value; Theta and theta0 raise DomainError at R = 0."""
    if kind not in _EVAL:
        raise InputError(f"unknown profile kind {kind!r}")
    R_arr = np.asarray(R, dtype=float)
    if np.any(R_arr < 0.0):
        raise DomainError("profiles are defined for R >= 0")
    out = _EVAL[kind](R_arr)
    return float(out) if np.ndim(out) == 0 else out


def profile_fn(kind: str, grid: RadialGrid) -> RadialFn:
    """Profile sampled on a grid with its (integer) small-R order and decay."""
    orders = {"Q": 2, "Phi": 2, "Theta": -2, "phi0": 2, "theta0": -2,
              "cos2Q": 0, "sin2Q": 2}
    decay = {"Q": 0.0, "Phi": 2.0, "Theta": -2.0, "phi0": 1.5, "theta0": -2.5,
             "cos2Q": 0.0, "sin2Q": 2.0}
    return RadialFn(grid, eval_profile(kind, grid.nodes), orders[kind], decay[kind])


# ----------------------------------------------------------------- operators

@dataclass(frozen=True)
class LinearizedOperator:
    form: str = "L"                 # "L" or "L-tilde"
    sign_convention: str = "elliptic"  # "elliptic" (+d^2) or "spectral" (-d^2)

    def __post_init__(self):
        if self.form not in ("L", "L-tilde"):
            raise InputError(f"unknown operator form {self.form!r}")
        if self.sign_convention not in ("elliptic", "spectral"):
            raise InputError(f"unknown sign convention {self.sign_convention!r}")

    def potential_times_R2(self, R):
        """R^2 times the zeroth-order coefficient in the spectral sign."""
        if self.form == "L":
            return 4.0 * cos2Q(R)
        return 4.0 * cos2Q(R) - 0.25


L_ELLIPTIC = LinearizedOperator("L", "elliptic")
L_SPECTRAL = LinearizedOperator("L", "spectral")
LT_SPECTRAL = LinearizedOperator("L-tilde", "spectral")


def _operator_parts(op: LinearizedOperator, fn: RadialFn, order: int):
    half, fx, fxx = log_derivatives(fn, order)
    R = fn.grid.nodes[half: fn.grid.n - half]
    f = fn.values[half: fn.grid.n - half]
    vr2 = op.potential_times_R2(R)
    # spectral sign, multiplied by R^2; scale sums the magnitudes of the
    # individual terms d_RR f, d_R f / R and V f
    if op.form == "L":
        kinetic = -fxx
        scale = np.abs(fxx - fx) + np.abs(fx) + np.abs(vr2 * f)
    else:
        # d_RR f R^2 = fxx - fx; both pieces count, since theta0 and its
        # second derivative vanish together at R = 1
        kinetic = -(fxx - fx)
        scale = np.abs(fxx) + np.abs(fx) + np.abs(vr2 * f)
    val = (kinetic + vr2 * f) / R ** 2
    if op.sign_convention == "elliptic":
        val = -val
    return half, R, val, scale / R ** 2


def apply_operator(op: LinearizedOperator, fn: RadialFn, order: int = 8) -> RadialFn:
    """Finite-difference application on interior nodes.

    The stencil is centered in x = log R with the given accuracy order;
    the returned function lives on the interior sub-grid (endpoints
    where the stencil does not fit are dropped).
    """
    half, R, val, _ = _operator_parts(op, fn, order)
    g = fn.grid.sub(half, fn.grid.n - half)
    return RadialFn(g, val, fn.zero_order - 2, fn.infinity_decay + 2.0)


def relative_residual(op: LinearizedOperator, fn: RadialFn, order: int = 8):
    """Pointwise |op f| divided by the sum of magnitudes of its terms."""
    _, R, val, scale = _operator_parts(op, fn, order)
    return R, np.abs(val) / scale


def conjugation_defect(grid: RadialGrid, order: int = 8) -> float:
    """sup |L f - R^{-1/2} L~(R^{1/2} f)| / sup |L f| for f = R^2 e^{-R}."""
    R = grid.nodes
    f = R ** 2 * np.exp(-R)
    lf = apply_operator(L_SPECTRAL, RadialFn(grid, f, 2)).values
    g = apply_operator(LT_SPECTRAL, RadialFn(grid, np.sqrt(R) * f, 2))
    back = g.values / np.sqrt(g.grid.nodes)
    return float(np.max(np.abs(lf - back)) / np.max(np.abs(lf)))


def wronskian(R, method: str = "analytic", h: float = 1e-4):
    """W(R) = R[(Phi/4)'(R) Theta(R) - (Phi/4)(R) Theta'(R)]; constant -1."""
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0.0):
        raise DomainError("Wronskian needs R > 0")
    if method == "analytic":
        dphi4 = R_dPhi(R) / (4.0 * R)
        dth = dTheta(R)
    elif method == "fd":
        up, dn = R * math.exp(h), R * math.exp(-h)
        dphi4 = (Phi(up) - Phi(dn)) / (8.0 * h * R)
        dth = (Theta(up) - Theta(dn)) / (2.0 * h * R)
    else:
        raise InputError(f"unknown method {method!r}")
    out = R * (dphi4 * Theta(R) - Phi(R) / 4.0 * dth)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- identities

@dataclass(frozen=True)
class IdentityReport:
    I1: float
    I2: float
    c_star: float
    I1_error: float
    I2_error: float
    stated_I1: float = STATED_I1
    stated_I2: float = STATED_I2

    @property
    def I1_deviation(self) -> float:
        return self.I1 - self.stated_I1

    @property
    def I2_deviation(self) -> float:
        return self.I2 - self.stated_I2

    def as_dict(self) -> dict:
        return {"I1": self.I1, "I2": self.I2, "c_star": self.c_star,
                "I1_error": self.I1_error, "I2_error": self.I2_error,
                "stated_I1": self.stated_I1, "stated_I2": self.stated_I2,
                "I1_deviation": self.I1_deviation, "I2_deviation": self.I2_deviation,
                "stated_c": self.stated_I2 / self.stated_I1}


def compute_identities(tol: float = 1e-12) -> IdentityReport:
    """I1 = int Phi^2 R dR and I2 = 8 int (1 - cos 2Q) Phi R dR by quadrature."""
    if tol > 1e-8:
        raise InputError("identity quadrature needs tol <= 1e-8")
    i1, e1 = integrate_halfline(lambda R: Phi(R) ** 2 * R, tol, with_error=True)
    i2, e2 = integrate_halfline(lambda R: 8.0 * one_minus_cos2Q(R) * Phi(R) * R,
                                tol, with_error=True)
    return IdentityReport(i1, i2, i2 / i1, e1, e2)


_IDENTITIES: IdentityReport | None = None


def identities() -> IdentityReport:
    """Cached default-tolerance identities."""
    global _IDENTITIES
    if _IDENTITIES is None:
        _IDENTITIES = compute_identities()
    return _IDENTITIES


def modulation_constant(c_source: str) -> float:
    """The constant c in lambda1''/lambda1 - 2(lambda1'/lambda1)^2 = -c lambda2^2."""
    if c_source == "paper":
        return 4.0
    if c_source in ("computed", "c_star"):
        return identities().c_star
    raise InputError(f"unknown c_source {c_source!r}")


def projection_normalizer(c_source: str) -> float:
    """Pairing of (cos 2Q - 1) against Phi R dR, times -8: I2 or the stated 12 pi."""
    if c_source == "paper":
        return STATED_I2
    if c_source in ("computed", "c_star"):
        return identities().I2
    raise InputError(f"unknown c_source {c_source!r}")


# ---------------------------------------------------------- Green solution

@dataclass(frozen=True)
class GreenSolution:
    grid: RadialGrid
    h: np.ndarray
    partA: np.ndarray        # -Phi/4 * int_0^R f Theta s ds
    partB: np.ndarray        # Theta/4 * (orthogonal source), rewritten past R_split
    partC: np.ndarray        # Theta/4 * int_0^R (f - f_orth) Phi s ds
    projection: float        # int_0^inf f_orth Phi s ds
    projection_scale: float  # int_0^inf |f_orth| Phi s ds
    growth: bool

    def as_fn(self, zero_order: int = 2) -> RadialFn:
        return RadialFn(self.grid, self.h, zero_order, 0.0)


def _power_end(g, R, end: str):
    """Integral of a power-law continuation of g beyond the grid end."""
    if end == "left":
        g0, g1, r0, r1 = g[0], g[1], R[0], R[1]
        if g0 == 0.0:
            return 0.0
        if g1 == 0.0 or np.sign(g0) != np.sign(g1):
            return 0.0
        p = math.log(g1 / g0) / math.log(r1 / r0)
        return g0 * r0 / (p + 1.0) if p > -0.5 else 0.0
    g0, g1, r0, r1 = g[-1], g[-2], R[-1], R[-2]
    if g0 == 0.0 or g1 == 0.0 or np.sign(g0) != np.sign(g1):
        return 0.0
    q = -math.log(g0 / g1) / math.log(r0 / r1)
    return g0 * r0 / (q - 1.0) if q > 1.5 else 0.0


def green_solve(grid: RadialGrid, f, f_orth=None, R_split: float = 1.0,
                growth_tol: float = 1e-6, strict: bool = False) -> GreenSolution:
    """Solve L h = f (elliptic sign) by variation of constants on a log grid.

    h = Theta/4 int_0^R f Phi s ds - Phi/4 int_0^R f Theta s ds.

    f_orth is the part of f that is orthogonal to Phi (s ds); its Theta
    branch is rewritten with -int_R^inf for R >= R_split so that a tiny
    quadrature defect does not seed R^2 growth. The remainder f - f_orth
    keeps the int_0^R form.
    """
    R = grid.nodes
    f = np.asarray(f, dtype=float)
    fo = np.zeros_like(f) if f_orth is None else np.asarray(f_orth, dtype=float)
    th = Theta(R)
    ph = Phi(R)

    gB = f * th * R
    cumB = _cum(gB, grid) + _power_end(gB, R, "left")
    partA = -0.25 * ph * cumB

    go = fo * ph * R
    cum_o = _cum(go, grid) + _power_end(go, R, "left")
    total_o = cum_o[-1] + _power_end(go, R, "right")
    scale_o = float(_cum(np.abs(go), grid)[-1])
    tail_o = total_o - cum_o
    inner = np.where(R < R_split, cum_o, -tail_o)
    partB = 0.25 * th * inner

    gc = (f - fo) * ph * R
    cum_c = _cum(gc, grid) + _power_end(gc, R, "left")
    partC = 0.25 * th * cum_c

    growth = bool(scale_o > 0.0 and abs(total_o) > growth_tol * scale_o)
    if strict and growth:
        raise OrthogonalityError(
            f"orthogonality defect {total_o:.3e} exceeds {growth_tol:g} x {scale_o:.3e}")
    h = partA + partB + partC
    return GreenSolution(grid, h, partA, partB, partC, float(total_o), scale_o, growth)


def _cum(g, grid: RadialGrid):
    """Running integral of g(R) dR on a log grid."""
    return cumulative_log(g, grid)
