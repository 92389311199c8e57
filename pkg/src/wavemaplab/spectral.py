"""Spectral side of the conjugated operator
L~ = -d_RR + 15/(4R^2) - 32R^2/(1+R^4)^2 on the half-line.

Two pieces: the power series phi(R; z) = sum_j z^j phi_j with
phi_j = R^{-3/2} f_j and L~ phi_j = phi_{j-1}, and a numeric scan of the
spectral density rho(xi) = 1/(pi |a(xi)|^2) read off the oscillatory tail of
the regular solution.

The explicit kernel for f_j carries the Green function of the pair
(Phi, Theta) without the 1/4 from their Wronskian, so applied verbatim it
gives L~ phi_j = 4 phi_{j-1}. normalization="green" (default) divides by 4;
"explicit" keeps the kernel as written. The bound checks only see the
normalization through the fitted constant.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import make_interp_spline

from .bubble import _power_end
from .errors import DomainError, InputError, InstabilityError
from .numerics import RadialFn, RadialGrid, cumulative_log, grid_per_decade

NORMALIZATIONS = {"green": 0.25, "explicit": 1.0}
MAX_J = 8
MIN_OSCILLATIONS = 50.0


def potential(R):
    """15/(4R^2) - 32R^2/(1+R^4)^2."""
    R = np.asarray(R, dtype=float)
    return 15.0 / (4.0 * R * R) - 32.0 * R * R / (1.0 + R ** 4) ** 2


def f0(R):
    R = np.asarray(R, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / (1.0 + R ** -4.0)


def _omega(R):
    """-1 + 8R^4 log R + R^8, the growing branch of the kernel."""
    return -1.0 + 8.0 * R ** 4 * np.log(R) + R ** 8


def default_grid() -> RadialGrid:
    return grid_per_decade(1e-3, 1e3, 400)


# ------------------------------------------------------------------ series

@dataclass(frozen=True)
class SpectralSeries:
    f: tuple                       # RadialFn f_0 .. f_jmax
    normalization: str = "green"

    @property
    def jmax(self) -> int:
        return len(self.f) - 1

    @property
    def grid(self) -> RadialGrid:
        return self.f[0].grid

    def phi(self, j: int) -> np.ndarray:
        """phi_j = R^{-3/2} f_j on the grid."""
        return self.grid.nodes ** -1.5 * self.f[j].values

    def partial_sum(self, z: float, jmax: int | None = None) -> np.ndarray:
        jmax = self.jmax if jmax is None else jmax
        return sum(z ** j * self.phi(j) for j in range(jmax + 1))


def _kernel_step(prev: np.ndarray, grid: RadialGrid, scale: float) -> np.ndarray:
    R = grid.nodes
    with np.errstate(over="ignore"):
        ga = _omega(R) * prev / (R ** 3 * (1.0 + R ** 4))
    gb = prev * R / (1.0 + R ** 4)
    A = cumulative_log(ga, grid) + _power_end(ga, R, "left")
    B = cumulative_log(gb, grid) + _power_end(gb, R, "left")
    return scale * (f0(R) * A - _omega(R) / (1.0 + R ** 4) * B)


def recurse_fj(jmax: int, grid: RadialGrid | None = None, normalization: str = "green",
               seed=None) -> SpectralSeries:
    """f_0 .. f_jmax from the integral recursion, starting at f_0 = R^4/(1+R^4).

    seed replaces f_0 (grid values), used for the linearity check.
    """
    if int(jmax) != jmax or not (0 <= jmax <= MAX_J):
        raise InputError(f"jmax must be an integer in [0, {MAX_J}]")
    if normalization not in NORMALIZATIONS:
        raise InputError(f"unknown normalization {normalization!r}")
    grid = default_grid() if grid is None else grid
    if grid.spacing_kind != "log-uniform":
        raise InputError("the recursion needs a log-uniform grid")
    if grid.nodes[0] > 1e-2 or grid.nodes[-1] < 1e2:
        raise InputError("grid must cover [1e-2, 1e2]")
    R = grid.nodes
    cur = f0(R) if seed is None else np.asarray(seed, dtype=float)
    fns = [RadialFn(grid, cur, 4)]
    for j in range(1, int(jmax) + 1):
        cur = _kernel_step(cur, grid, NORMALIZATIONS[normalization])
        if not np.all(np.isfinite(cur)):
            raise InstabilityError(f"f_{j} is not finite on the grid")
        fns.append(RadialFn(grid, cur, 4 + 2 * j))
    return SpectralSeries(tuple(fns), normalization)


def apply_Ltilde(grid: RadialGrid, values: np.ndarray, z: float = 0.0, k: int = 7) -> np.ndarray:
    """(L~ - z) applied through a degree-k spline in log R."""
    R = grid.nodes
    x = np.log(R)
    spl = make_interp_spline(x, values, k=k)
    d1, d2 = spl(x, 1), spl(x, 2)
    second = (d2 - d1) / (R * R)
    return -second + (potential(R) - z) * values


def recursion_residual(series: SpectralSeries, j: int, R_lo: float = 0.1,
                       R_hi: float = 10.0) -> float:
    """max |L~ phi_j - phi_{j-1}| / max |phi_{j-1}| over R_lo <= R <= R_hi."""
    if not (1 <= j <= series.jmax):
        raise InputError(f"j must lie in [1, {series.jmax}]")
    R = series.grid.nodes
    lhs = apply_Ltilde(series.grid, series.phi(j))
    rhs = series.phi(j - 1)
    if series.normalization == "explicit":
        rhs = 4.0 * rhs
    m = (R >= R_lo) & (R <= R_hi)
    return float(np.max(np.abs(lhs[m] - rhs[m])) / np.max(np.abs(rhs[m])))


def small_R_slope(series: SpectralSeries, j: int = 1, R_hi: float = 3e-2) -> float:
    """Log-log slope of |f_j| over the grid nodes below R_hi."""
    R = series.grid.nodes
    m = R < R_hi
    if m.sum() < 4:
        raise InputError("too few nodes below R_hi")
    return float(np.polyfit(np.log(R[m]), np.log(np.abs(series.f[j].values[m])), 1)[0])


@dataclass(frozen=True)
class BoundTable:
    C: float
    sup_ratio: tuple               # sup_u |f~_j| j! <u> / u^{2+j}, j = 0..jmax
    scaled: tuple                  # sup_ratio[j] / C^j for j >= 1
    flatness: float                # max/min of scaled over j = 1..jmax
    at_one: tuple                  # |f~_j(1)|
    j0_factor: float               # sup_u of the j = 0 ratio <u>/(1+u^2) u^2/u^2

    def rows(self):
        return [(j, self.sup_ratio[j], self.scaled[j] if j else float("nan"), self.at_one[j])
                for j in range(len(self.sup_ratio))]


def check_fj_bounds(series: SpectralSeries, jmax: int = 6, u_range=(1e-4, 1e4)) -> BoundTable:
    """Fit the single constant C in |f~_j(u)| <= C^j/j! |u|^{2+j}/<u>.

    u = R^2 runs over the grid nodes inside u_range. C is the least-squares
    fit of log sup_ratio_j against j, so flatness measures how well one C
    serves every j.
    """
    jmax = min(jmax, series.jmax)
    if jmax < 2:
        raise InputError("need at least f_2 to fit C")
    u = series.grid.nodes ** 2
    m = (u >= u_range[0]) & (u <= u_range[1])
    u = u[m]
    bracket = np.sqrt(1.0 + u * u)
    sup = []
    for j in range(jmax + 1):
        fj = series.f[j].values[m]
        sup.append(float(np.max(np.abs(fj) * math.factorial(j) * bracket / u ** (2 + j))))
    js = np.arange(1, jmax + 1)
    slope, _ = np.polyfit(js, np.log(sup[1:]), 1)
    C = float(math.exp(slope))
    scaled = [float("nan")] + [sup[j] / C ** j for j in js]
    flat = float(max(scaled[1:]) / min(scaled[1:]))
    x1 = np.log(series.grid.nodes)
    at_one = tuple(float(abs(make_interp_spline(x1, series.f[j].values, k=5)(0.0)))
                   for j in range(jmax + 1))
    return BoundTable(C, tuple(sup), tuple(scaled), flat, at_one, sup[0])


def series_ratio_test(series: SpectralSeries, z: float, R_hi: float | None = None):
    """Residuals of (L~ - z) on the partial sums, j = 1..jmax.

    Restricted to |R^2 z| <= 1 and R >= 0.1; returns the list of max residuals.
    """
    R = series.grid.nodes
    R_hi = 1.0 / math.sqrt(abs(z)) if R_hi is None else R_hi
    m = (R >= 0.1) & (R <= R_hi)
    # the explicit kernel scales phi_j by 4^j
    w = z / 4.0 if series.normalization == "explicit" else z
    out = []
    for N in range(1, series.jmax + 1):
        s = sum(w ** j * series.phi(j) for j in range(N + 1))
        res = apply_Ltilde(series.grid, s, z)
        out.append(float(np.max(np.abs(res[m]))))
    return out


# --------------------------------------------------------- spectral density

@dataclass(frozen=True)
class RhoEstimate:
    xi: float
    R_match: float
    a_abs_sq: float
    rho: float
    flatness: float                # (max - min)/mean of |a|^2 over one period

    def __iter__(self):
        return iter((self.a_abs_sq, self.rho))


def frobenius_start(xi: float, R0: float):
    """psi = R^{5/2}(1 + a2 R^2 + a4 R^4 + a6 R^6) and its derivative at R0."""
    a2 = -xi / 12.0
    a4 = (xi * xi / 12.0 - 32.0) / 32.0
    a6 = (-xi * a4 - 32.0 * a2) / 60.0
    c = (1.0, a2, a4, a6)
    psi = sum(ck * R0 ** (2.5 + 2 * k) for k, ck in enumerate(c))
    dpsi = sum(ck * (2.5 + 2 * k) * R0 ** (1.5 + 2 * k) for k, ck in enumerate(c))
    return psi, dpsi


def default_R_match(xi: float) -> float:
    return max(60.0 / math.sqrt(xi), 5.0)


def estimate_rho(xi: float, R_match: float | None = None, samples: int = 401,
                 rtol: float = 1e-11) -> RhoEstimate:
    """|a(xi)|^2 and rho(xi) from the regular solution psi ~ R^{5/2}.

    Integrates (L~ - xi) psi = 0 outward with DOP853 and averages the
    envelope xi^{1/2}(psi^2 + psi'^2/xi)/4 over one period 2pi/sqrt(xi)
    starting at R_match.
    """
    if not (math.isfinite(xi) and xi > 0.0):
        raise InputError(f"xi must be positive, got {xi}")
    k = math.sqrt(xi)
    R_match = default_R_match(xi) if R_match is None else float(R_match)
    if not (R_match * k >= MIN_OSCILLATIONS):
        raise DomainError(f"R_match*sqrt(xi) = {R_match * k:.3g} is below {MIN_OSCILLATIONS}")
    R0 = min(1e-2, 0.05 / k)
    period = 2.0 * math.pi / k

    def rhs(r, y):
        return (y[1], (potential(r) - xi) * y[0])

    ts = np.linspace(R_match, R_match + period, samples)
    sol = solve_ivp(rhs, (R0, ts[-1]), frobenius_start(xi, R0), method="DOP853",
                    rtol=rtol, atol=1e-300, t_eval=ts)
    if not sol.success or not np.all(np.isfinite(sol.y)):
        raise InstabilityError(f"integration failed at xi={xi}: {sol.message}")
    env = k * (sol.y[0] ** 2 + sol.y[1] ** 2 / xi) / 4.0
    # trapezoid over a closed period
    mean = float(np.trapezoid(env, ts) / period)
    flat = float((env.max() - env.min()) / mean)
    return RhoEstimate(float(xi), R_match, mean, 1.0 / (math.pi * mean), flat)


@dataclass(frozen=True)
class SpectralScan:
    xi: tuple
    a_abs_sq: tuple
    rho: tuple
    flatness: tuple = field(default=())

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.xi, self.xi[1:])):
            raise InputError("xi grid must be strictly increasing")
        if any(not (r > 0.0) for r in self.rho):
            raise InputError("rho must be positive")

    def rows(self):
        return [(x, a, r, r / (x * x)) for x, a, r in zip(self.xi, self.a_abs_sq, self.rho)]

    def spread(self, lo: float, hi: float, power: float = 0.0) -> float:
        """max over xi in [lo, hi] of the factor between rho/xi^power and its median."""
        xi = np.asarray(self.xi)
        m = (xi >= lo) & (xi <= hi)
        if not m.any():
            raise InputError(f"no scan points in [{lo}, {hi}]")
        v = np.asarray(self.rho)[m] / xi[m] ** power
        med = float(np.median(v))
        return float(max(v.max() / med, med / v.min()))


def _rho_task(args):
    xi, factor = args
    R_match = None if factor is None else max(factor / math.sqrt(xi), 5.0)
    return estimate_rho(xi, R_match)


def scan(xi_values, R_match_factor: float | None = None, jobs: int = 1) -> SpectralScan:
    """estimate_rho over an increasing xi grid; R_match = factor/sqrt(xi)."""
    xi_values = [float(x) for x in xi_values]
    tasks = [(x, R_match_factor) for x in xi_values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            ests = list(pool.map(_rho_task, tasks))
    else:
        ests = [_rho_task(t) for t in tasks]
    return SpectralScan(tuple(xi_values), tuple(e.a_abs_sq for e in ests),
                        tuple(e.rho for e in ests), tuple(e.flatness for e in ests))


def default_xi_grid(n_per_decade: int = 4):
    return tuple(float(x) for x in np.logspace(-2, 2, 4 * n_per_decade + 1))
