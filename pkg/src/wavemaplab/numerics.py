"""Shared numerical substrate: radial grids, half-line quadrature, finite
differences on log-uniform grids and the scaling field S = t d/dt + r d/dr.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import make_interp_spline

from .errors import DomainError, InputError, QuadratureError, ResolutionError

SPACINGS = ("log-uniform", "graded", "uniform")


@dataclass(frozen=True)
class RadialGrid:
    nodes: np.ndarray
    spacing_kind: str = "log-uniform"
    n: int = field(init=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 16:
            raise InputError("a radial grid needs at least 16 nodes")
        if not np.all(np.isfinite(nodes)) or nodes[0] <= 0.0:
            raise InputError("grid nodes must be finite and positive")
        if np.any(np.diff(nodes) <= 0.0):
            raise InputError("grid nodes must be strictly increasing")
        if self.spacing_kind not in SPACINGS:
            raise InputError(f"unknown spacing kind {self.spacing_kind!r}")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "n", int(nodes.size))

    @property
    def log_step(self) -> float:
        """Spacing in log R (log-uniform grids only)."""
        if self.spacing_kind != "log-uniform":
            raise InputError("log step is defined for log-uniform grids only")
        return float(math.log(self.nodes[-1] / self.nodes[0]) / (self.n - 1))

    @property
    def nodes_per_decade(self) -> float:
        return math.log(10.0) / self.log_step

    def sub(self, lo: int, hi: int) -> "RadialGrid":
        return RadialGrid(self.nodes[lo:hi], self.spacing_kind)


@dataclass(frozen=True)
class RadialFn:
    """Grid values of a radial profile with its small-R order and large-R decay."""

    grid: RadialGrid
    values: np.ndarray
    zero_order: int = 0
    infinity_decay: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.nodes.shape:
            raise InputError("values do not match the grid")
        if not np.all(np.isfinite(vals)):
            raise InputError("radial function values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def series_consistent(self) -> bool:
        """values/R^k at the first two nodes agree within a factor 10."""
        k = self.zero_order
        a = self.values[0] / self.grid.nodes[0] ** k
        b = self.values[1] / self.grid.nodes[1] ** k
        if a == 0.0 or b == 0.0:
            return False
        return bool(np.sign(a) == np.sign(b) and 0.1 <= abs(a / b) <= 10.0)

    def interpolator(self, k: int = 5):
        """Spline of the values in log R."""
        return make_interp_spline(np.log(self.grid.nodes), self.values, k=k)


def make_grid(r_min: float, r_max: float, n: int, kind: str = "log-uniform",
              r_core: float | None = None) -> RadialGrid:
    """Grid on [r_min, r_max] with exact endpoints.

    kind="graded" uses r = r_core*sinh(x) with x uniform, which is
    log-uniform below r_core and uniform above it.
    """
    if not (r_min > 0.0 and r_max > r_min and math.isfinite(r_max)):
        raise InputError(f"invalid grid range [{r_min}, {r_max}]")
    if int(n) != n or n < 16:
        raise InputError("grid needs n >= 16 nodes")
    n = int(n)
    if kind == "log-uniform":
        nodes = np.exp(np.linspace(math.log(r_min), math.log(r_max), n))
    elif kind == "uniform":
        nodes = np.linspace(r_min, r_max, n)
    elif kind == "graded":
        core = math.sqrt(r_min * r_max) if r_core is None else float(r_core)
        x = np.linspace(math.asinh(r_min / core), math.asinh(r_max / core), n)
        nodes = core * np.sinh(x)
    else:
        raise InputError(f"unknown spacing kind {kind!r}")
    nodes[0], nodes[-1] = r_min, r_max
    return RadialGrid(nodes, kind)


def grid_per_decade(r_min: float, r_max: float, per_decade: float) -> RadialGrid:
    decades = math.log10(r_max / r_min)
    n = max(16, int(round(decades * per_decade)) + 1)
    return make_grid(r_min, r_max, n, "log-uniform")


# ---------------------------------------------------------------- quadrature

def integrate_halfline(f: Callable[[float], float], tol: float = 1e-10,
                       scale: float = 1.0, limit: int = 400,
                       with_error: bool = False):
    """Integral of f over (0, inf) through the map R = scale*x/(1-x).

    QUADPACK's adaptive 21-point Gauss-Kronrod rule runs on x in (0, 1).
    Raises QuadratureError carrying the best estimate when the requested
    relative tolerance is not met.
    """
    if tol > 1e-4:
        raise InputError(f"tolerance {tol} outside [1e-14, 1e-4]")
    if not (scale > 0.0):
        raise InputError("scale must be positive")

    def g(x):
        if x >= 1.0:
            return 0.0
        R = scale * x / (1.0 - x)
        val = f(R) * scale / (1.0 - x) ** 2
        return float(val)

    if tol < 1e-14:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            best, err = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=1e-13,
                                       limit=limit)
        raise QuadratureError(f"tolerance {tol} is below double-precision reach",
                              best, err)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=tol, limit=limit,
                             full_output=1)
    val, err = res[0], res[1]
    ier = 0 if len(res) < 4 else 1
    if not math.isfinite(val) or (ier and err > tol * abs(val)):
        raise QuadratureError("adaptive quadrature did not converge", val, err)
    return (val, err) if with_error else val


def integrate_interval(f: Callable[[float], float], a: float, b: float,
                       tol: float = 1e-10, limit: int = 400) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = integrate.quad(f, a, b, epsabs=0.0, epsrel=tol, limit=limit,
                             full_output=1)
    if len(res) >= 4 and res[1] > max(tol * abs(res[0]), 1e-300):
        raise QuadratureError("adaptive quadrature did not converge", res[0], res[1])
    return res[0]


def cumulative_log(values: np.ndarray, grid: RadialGrid, k: int = 5) -> np.ndarray:
    """Running integral of values(R) dR from the first node, on a log grid.

    Integrates values*R in x = log R with a degree-k spline antiderivative.
    """
    x = np.log(grid.nodes)
    spl = make_interp_spline(x, values * grid.nodes, k=k).antiderivative()
    return spl(x) - spl(x[0])


# ------------------------------------------------------- finite differences

def fornberg_weights(offsets: np.ndarray, deriv: int) -> np.ndarray:
    """Finite-difference weights at 0 for the given stencil offsets."""
    z = np.asarray(offsets, dtype=float)
    n = z.size
    c = np.zeros((n, deriv + 1))
    c1, c4 = 1.0, z[0]
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, deriv)
        c2, c5 = 1.0, c4
        c4 = z[i]
        for j in range(i):
            c3 = z[i] - z[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, deriv]


def central_diff(values: np.ndarray, h: float, deriv: int, order: int = 8) -> np.ndarray:
    """Centered derivative of uniform samples on the interior nodes.

    Returns an array shorter by order//2 nodes at each end.
    """
    if order % 2 or order < 2:
        raise InputError("accuracy order must be even and >= 2")
    half = order // 2 + (deriv - 1) // 2
    offs = np.arange(-half, half + 1)
    w = fornberg_weights(offs, deriv) / h ** deriv
    n = values.shape[-1]
    if n <= 2 * half:
        raise ResolutionError("too few nodes for the finite-difference stencil")
    out = np.zeros(values.shape[:-1] + (n - 2 * half,))
    for wk, o in zip(w, offs):
        out = out + wk * values[..., half + o: n - half + o]
    return out


def stencil_half_width(deriv: int, order: int) -> int:
    return order // 2 + (deriv - 1) // 2


def log_derivatives(fn: RadialFn, order: int = 8, min_per_decade: float = 5.0):
    """f_x and f_xx in x = log R on interior nodes of a log-uniform grid."""
    g = fn.grid
    if g.spacing_kind != "log-uniform":
        raise InputError("log-derivatives need a log-uniform grid")
    if g.nodes_per_decade < min_per_decade:
        raise ResolutionError(
            f"grid has {g.nodes_per_decade:.2f} nodes per decade (< {min_per_decade})")
    h = g.log_step
    half = stencil_half_width(2, order)
    fx = central_diff(fn.values, h, 1, order)
    fxx = central_diff(fn.values, h, 2, order)
    h1 = stencil_half_width(1, order)
    if h1 != half:
        fx = fx[half - h1: fx.size - (half - h1)]
    return half, fx, fxx


# ------------------------------------------------------------ scaling field

def apply_scaling_field(f: Callable[[float, float], float], t: float, r: float,
                        h: float = 1e-3) -> float:
    """Second-order centered approximation of (t d/dt + r d/dr) f at (t, r)."""
    if not (0.0 < h <= 0.1):
        raise InputError("relative step must lie in (0, 0.1]")
    try:
        ft = f(t * (1 + h), r) - f(t * (1 - h), r)
        fr = f(t, r * (1 + h)) - f(t, r * (1 - h)) if r != 0.0 else 0.0
    except (DomainError, ValueError, ZeroDivisionError) as exc:
        raise DomainError(f"scaling stencil leaves the domain of f: {exc}") from exc
    val = (ft + fr) / (2.0 * h)
    if not math.isfinite(val):
        raise DomainError("scaling stencil produced a non-finite value")
    return float(val)
