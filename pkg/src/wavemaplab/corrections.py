"""Inner and outer corrections around u = Q(lambda1 r) - Q2~(t, r).

Writing u = Q1 - Q2~ + v with A = Q1 - Q2~, the wave map equation
-u_tt + Delta u - 2 sin(2u)/r^2 = 0 becomes, up to the error N(Q2~) of the
outer profile itself,

    N(u) + N(Q2~) = L_A v - E1(v) - E2 - E3(v),
    L_A v = -v_tt + Delta v - 4 cos(2A)/r^2 v,

with E1 = 2 cos(2A)/r^2 (sin 2v - 2v), E3 = 2 sin(2A)/r^2 (cos 2v - 1) and
E2 = Q1_tt + 2/r^2 (sin 2A - sin 2Q1 + sin 2Q2~). The left side is the
"corrected residual"; it is evaluated structurally (finite differences act
on v only), which keeps round-off far below the residual for large tau.

Inner quantities live on a log grid in R = lambda1 r and are stored in
units of lambda2^2 (sources) or as angles scaled by tau^{-2} (solutions).
Outer corrections are solved for w = h/r^2 on a uniform staggered grid in
r, see linwave.

Conventions fixed here by the algebra above:
  h0:   L_ell h0 = lambda1^{-2} (E2 - B),  B = 8 (2 m lambda2 + m^2)(cos 2Q1 - 1)
  hk0:  -h_tt + Delta h - 4 cos(2Q2~)/r^2 h = -e_{k-1,2}
  hk1:  L_ell hk1 = lambda1^{-2} (W hk0 - m_k (cos 2Q1 - 1)),
        W = 4 (cos 2A - cos 2Q2~)/r^2, m_k = -(8/N) int W hk0 Phi R dR
The residual left after level k is e_k2 + [8(2 m lambda2 + m^2) + sum m_j]
(1 - cos 2Q1); the bracket vanishes on the m-equation solved by
modulation.m_fixed_point, and e_k2 is the box-free part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np
from scipy.interpolate import make_interp_spline

from . import bubble
from .errors import InputError, ResolutionError
from .linwave import (PotentialSpec, TrackingReport, evolve_nonlinear_track, h1_norm,
                      leapfrog_history, staggered_grid)
from .modulation import ZERO_M, ModulationSolution, PerturbationM, solve_modulation
from .numerics import RadialGrid, central_diff, grid_per_decade, integrate_halfline
from .outer import OuterProfile, lambda2, v10, v11

FD_ORDER = 8
_HALF = 4                    # nodes lost at each end by the order-8 stencils


# ------------------------------------------------------------ cone cutoff

def smooth_step(x, lo: float, hi: float):
    """C-infinity step: 1 for x <= lo, 0 for x >= hi."""
    x = np.asarray(x, dtype=float)
    y = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(y < 1.0, np.exp(-1.0 / np.maximum(1.0 - y, 1e-300)), 0.0)
        b = np.where(y > 0.0, np.exp(-1.0 / np.maximum(y, 1e-300)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class ConeProfile(OuterProfile):
    """Outer profile whose v11 is switched off smoothly between lo t and hi t.

    v11 grows like r^2 outside the light cone; the inner constructions only
    need Q2~ for r of order t, and the cut keeps the outer potential bounded.
    """

    lo: float = 1.25
    hi: float = 2.0

    def correction(self, t, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        if self.level >= 1:
            out = out + v10(t, r, self.params)
        if self.level >= 2:
            cut = smooth_step(r / t, self.lo, self.hi)
            out = out + cut * v11(t, lambda2(t, self.params) * r, self.params)
        return out


# ------------------------------------------------------------ background

@dataclass(frozen=True)
class CorrectionSetup:
    modulation: ModulationSolution
    profile: OuterProfile
    m: PerturbationM = ZERO_M
    per_decade: float = 64.0
    R_min: float = 1e-2
    source_cut: tuple = (1.25, 2.0)      # cutoff of outer sources, in units of t

    def __post_init__(self):
        if self.profile.params.beta != self.modulation.params.beta or \
                self.profile.params.t0 != self.modulation.params.t0:
            raise InputError("outer profile and modulation use different (beta, t0)")
        if self.per_decade < 16:
            raise ResolutionError("inner grids need at least 16 nodes per decade")

    @property
    def normalizer(self) -> float:
        return bubble.projection_normalizer(self.modulation.params.c_source)

    def inner_grid(self, R_max: float) -> RadialGrid:
        return grid_per_decade(self.R_min, R_max, self.per_decade)


@dataclass(frozen=True)
class Background:
    """Everything about Q1 and Q2~ needed at one time, on an R-grid."""

    t: float
    R: np.ndarray
    log_lambda1: float
    lam2: float
    log_tau: float
    a1: float                # alpha' = lambda1'/lambda1
    a2: float                # alpha''
    ddot: float              # lambda1''/lambda1
    mu: float                # m/lambda2
    Phi: np.ndarray
    RdPhi: np.ndarray
    omc1: np.ndarray         # 1 - cos 2Q1
    sin2Q1: np.ndarray
    q2: np.ndarray
    s2: np.ndarray           # sin^2 Q2~
    sin2Q2: np.ndarray
    sin2A: np.ndarray
    cos2A: np.ndarray

    @property
    def r(self):
        return self.R * math.exp(-self.log_lambda1)

    @property
    def tau2(self) -> float:
        return math.exp(2.0 * self.log_tau)

    @property
    def inv_r2_hat(self):
        """1/(lambda2 r)^2 = tau^2/R^2."""
        return self.tau2 / self.R ** 2

    @property
    def cos2A_minus_cos2Q1(self):
        return -2.0 * (1.0 - self.omc1) * self.s2 + self.sin2Q1 * self.sin2Q2

    @property
    def cos2A_minus_cos2Q2(self):
        return -(1.0 - 2.0 * self.s2) * self.omc1 + self.sin2Q1 * self.sin2Q2

    @property
    def sinsq_A(self):
        return 0.5 * (1.0 - self.cos2A)


def background(setup: CorrectionSetup, t: float, R: np.ndarray) -> Background:
    mod = setup.modulation
    la1 = float(mod.log_lambda1(t))
    ll2 = float(mod.log_lambda2(t))
    lam2 = math.exp(ll2)
    Z = float(mod.Z(t))
    m = float(setup.m(t))
    K = mod.params.c * (lam2 + m) ** 2
    a1 = 1.0 / Z
    a2 = 1.0 / (Z * Z) - K
    r = R * math.exp(-la1)
    q1 = bubble.Q(R)
    q2 = np.asarray(setup.profile(t, r), dtype=float)
    A = q1 - q2
    return Background(
        t=float(t), R=R, log_lambda1=la1, lam2=lam2, log_tau=la1 - ll2, a1=a1, a2=a2,
        ddot=a2 + a1 * a1, mu=m / lam2, Phi=bubble.Phi(R), RdPhi=bubble.R_dPhi(R),
        omc1=bubble.one_minus_cos2Q(R), sin2Q1=bubble.sin2Q(R), q2=q2,
        s2=np.sin(q2) ** 2, sin2Q2=np.sin(2.0 * q2), sin2A=np.sin(2.0 * A),
        cos2A=np.cos(2.0 * A))


# ------------------------------------------------------------ source terms

@dataclass(frozen=True)
class SourceTerms:
    """E2, its leading part E2~ and the box B, all divided by lambda2^2.

    E2_tilde is lambda1^2/lambda2^2 times the leading-order source
    (lambda1''/lambda1^3) Phi + (lambda1'/lambda1^2)^2 (R Phi' - Phi)
    - 8 (lambda2/lambda1)^2 (cos 2Q - 1).
    """

    E2: np.ndarray
    E2_tilde: np.ndarray
    box: np.ndarray


def source_terms(bg: Background) -> SourceTerms:
    l2sq = bg.lam2 ** 2
    q1tt = (bg.a2 * bg.Phi + bg.a1 ** 2 * bg.RdPhi) / l2sq
    cross = 2.0 * bg.inv_r2_hat * (-2.0 * bg.s2 * bg.sin2Q1 + bg.sin2Q2 * bg.omc1)
    E2 = q1tt + cross
    E2t = (bg.ddot * bg.Phi + bg.a1 ** 2 * (bg.RdPhi - bg.Phi)) / l2sq + 8.0 * bg.omc1
    box = -8.0 * (2.0 * bg.mu + bg.mu ** 2) * bg.omc1
    return SourceTerms(E2, E2t, box)


def E1_hat(bg: Background, v):
    """E1(v)/lambda2^2 with sin 2v - 2v expanded for small v."""
    v = np.asarray(v, dtype=float)
    x = 2.0 * v
    small = np.abs(x) < 1e-2
    x2 = x * x
    ser = -x * x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0))
    return 2.0 * bg.cos2A * bg.inv_r2_hat * np.where(small, ser, np.sin(x) - x)


def E3_hat(bg: Background, v):
    return 2.0 * bg.sin2A * bg.inv_r2_hat * (-2.0 * np.sin(np.asarray(v)) ** 2)


@lru_cache(maxsize=4)
def _pairing_basis(tol: float):
    """int g Phi R dR for g = Phi, R Phi' - Phi and 1 - cos 2Q."""
    fns = (bubble.Phi, lambda R: bubble.R_dPhi(R) - bubble.Phi(R), bubble.one_minus_cos2Q)
    return np.array([integrate_halfline(lambda R, g=g: g(R) * bubble.Phi(R) * R, tol=tol)
                     for g in fns])


def orthogonality_defect(setup: CorrectionSetup, t: float, tol: float = 1e-11):
    """(int f~ Phi R dR, sum of |term|) for f~ = E2~ - B at time t.

    Each of the three profile pairings is evaluated by adaptive quadrature
    on the half-line and the scale is the sum of the term magnitudes; the
    first number
    vanishes when lambda1 follows the modulation law with the same constant
    c = I2/I1 as the pairing.
    """
    mod = setup.modulation
    lam2 = math.exp(float(mod.log_lambda2(t)))
    Z = float(mod.Z(t))
    m = float(setup.m(t))
    mu = m / lam2
    K = mod.params.c * (lam2 + m) ** 2
    a1 = 1.0 / Z
    ddot = 1.0 / (Z * Z) - K + a1 * a1
    coef = np.array([ddot / lam2 ** 2, (a1 / lam2) ** 2, 8.0 * (1.0 + 2.0 * mu + mu ** 2)])
    basis = _pairing_basis(tol)
    terms = coef * basis
    val = float(np.sum(terms))
    scale = float(np.sum(np.abs(terms)))
    return val, scale


# ------------------------------------------------------------ h0

@dataclass(frozen=True)
class H0Solution:
    bg: Background
    green: bubble.GreenSolution

    @property
    def scale(self) -> float:
        """h0 = tau^{-2} green.h."""
        return math.exp(-2.0 * self.bg.log_tau)

    @property
    def h(self):
        return self.scale * self.green.h


def solve_h0(setup: CorrectionSetup, t: float, grid: RadialGrid, bg: Background | None = None
             ) -> H0Solution:
    """L_ell h0 = lambda1^{-2}(E2 - B), with the E2~ - B part treated as orthogonal."""
    bg = bg or background(setup, t, grid.nodes)
    src = source_terms(bg)
    g = bubble.green_solve(grid, src.E2 - src.box, src.E2_tilde - src.box)
    return H0Solution(bg, g)


# ------------------------------------------------------------ residual pieces

def _xderiv(values, h):
    return central_diff(values, h, 1, FD_ORDER), central_diff(values, h, 2, FD_ORDER)


def _time_stencil(vals, dt):
    """First and second derivatives at the centre of five equally spaced samples."""
    f = vals
    d1 = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * dt)
    d2 = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * dt * dt)
    return d1, d2


@dataclass(frozen=True)
class InnerPiece:
    """A correction known on the R-grid at five times t + k dt, k = -2..2."""

    values: np.ndarray        # (5, n)
    dt: float

    def at_r(self, bg: Background, h: float):
        """(v, v_t, v_tt) at fixed r on interior nodes, and the interior slice."""
        v = self.values[2]
        Dt, Dtt = _time_stencil(self.values, self.dt)
        vx, vxx = _xderiv(v, h)
        Dtx = central_diff(Dt, h, 1, FD_ORDER)
        s = slice(_HALF, v.size - _HALF)
        vt = Dt[s] + bg.a1 * vx
        vtt = Dtt[s] + 2.0 * bg.a1 * Dtx + bg.a2 * vx + bg.a1 ** 2 * vxx
        return v[s], vt, vtt, vxx


@dataclass(frozen=True)
class OuterPiece:
    """An outer correction w = h/r^2 on a staggered grid at five times."""

    grid: RadialGrid
    w: np.ndarray             # (5, n_r)
    dt: float

    @cached_property
    def _splines(self):
        r = self.grid.nodes
        x = np.concatenate([-r[::-1], r])
        return [make_interp_spline(x, np.concatenate([wk[::-1], wk]), k=5) for wk in self.w]

    @property
    def r_max(self) -> float:
        return float(self.grid.nodes[-1])

    def eval(self, r, k: int = 2, nu: int = 0):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        inside = r <= self.r_max
        out[inside] = self._splines[k](r[inside], nu)
        return out

    def at_r(self, r):
        """(w, w_r, w_rr, w_t, w_tt) at the given radii."""
        vals = np.stack([self.eval(r, k) for k in range(5)])
        wt, wtt = _time_stencil(vals, self.dt)
        return vals[2], self.eval(r, 2, 1), self.eval(r, 2, 2), wt, wtt


def L_A_inner(bg: Background, piece: InnerPiece, h: float):
    """L_A v / lambda2^2 on interior nodes, and v, v_t there."""
    v, vt, vtt, vxx = piece.at_r(bg, h)
    s = slice(_HALF, bg.R.size - _HALF)
    inv = bg.inv_r2_hat[s]
    lap = inv * (vxx - 4.0 * v + 8.0 * bg.sinsq_A[s] * v)
    return -vtt / bg.lam2 ** 2 + lap, v, vt


def L_A_outer(bg: Background, piece: OuterPiece):
    """L_A (r^2 w) / lambda2^2 on interior nodes, and h, h_t there."""
    s = slice(_HALF, bg.R.size - _HALF)
    r = bg.r[s]
    w, wr, wrr, wt, wtt = piece.at_r(r)
    lap = r * r * wrr + 5.0 * r * wr + 8.0 * bg.sinsq_A[s] * w
    return (-r * r * wtt + lap) / bg.lam2 ** 2, r * r * w, r * r * wt, w


@dataclass(frozen=True)
class ResidualParts:
    """Corrected residual / lambda2^2 on interior R-nodes and its pieces."""

    bg: Background
    corrected: np.ndarray
    box_free: np.ndarray
    v: np.ndarray
    vt: np.ndarray


def corrected_residual(bg: Background, h: float, inner: list, outer: list,
                       box_coef: float) -> ResidualParts:
    """N(u) + N(Q2~) for v = sum of the pieces, divided by lambda2^2.

    box_coef is 8(2 mu + mu^2) + sum of the m_j/lambda2^2 already used; the
    box-free part subtracts box_coef (1 - cos 2Q1).
    """
    s = slice(_HALF, bg.R.size - _HALF)
    n = bg.R.size - 2 * _HALF
    LA = np.zeros(n)
    v = np.zeros(n)
    vt = np.zeros(n)
    for p in inner:
        a, b, c = L_A_inner(bg, p, h)
        LA += a
        v += b
        vt += c
    for p in outer:
        a, b, c, _ = L_A_outer(bg, p)
        LA += a
        v += b
        vt += c
    E2 = source_terms(bg).E2[s]
    sub = replace_slice(bg, s)
    res = LA - E2 - E1_hat(sub, v) - E3_hat(sub, v)
    return ResidualParts(bg, res, res - box_coef * bg.omc1[s], v, vt)


def replace_slice(bg: Background, s: slice) -> Background:
    """The background restricted to a slice of the R-grid."""
    kw = {}
    for f in bg.__dataclass_fields__:
        val = getattr(bg, f)
        kw[f] = val[s] if isinstance(val, np.ndarray) else val
    return Background(**kw)


def residual_norm(bg: Background, values, R_int, r_cut_factor: float = 1.0) -> float:
    """lambda2^{-1} ||N||_{L^2(r dr, r <= t)} for N = lambda2^2 values on R_int."""
    keep = R_int <= r_cut_factor * bg.t * math.exp(bg.log_lambda1)
    Rk = R_int[keep]
    if Rk.size < 16:
        raise ResolutionError("fewer than 16 inner nodes inside r <= t")
    x = np.log(Rk)
    val = np.trapezoid(values[keep] ** 2 * Rk * Rk, x)
    return math.exp(-bg.log_tau) * math.sqrt(val)


def outer_profile_error(setup: CorrectionSetup, bg: Background, h: float):
    """N(Q2~)/lambda2^2 on interior nodes (finite differences in t and log R)."""
    r = bg.r
    q, _, qtt = setup.profile.time_derivatives(bg.t, r)
    qx, qxx = _xderiv(q, h)
    s = slice(_HALF, r.size - _HALF)
    out = -qtt[s] / bg.lam2 ** 2 + bg.inv_r2_hat[s] * (qxx - np.sin(2.0 * q[s]))
    return out


# ------------------------------------------------------------ cell averages

def cell_average_source(bg: Background, values, R_int, outer_grid: RadialGrid,
                        cut: tuple) -> np.ndarray:
    """F_eff on the staggered grid for a source lambda2^2 values(R).

    Returns r_j^2 times the r^5-weighted average of F/r^2 over each cell,
    with F multiplied by the cone cutoff smooth_step(r/t, *cut).
    """
    la1 = bg.log_lambda1
    lam1 = math.exp(la1)
    r_int = R_int / lam1
    g = values * smooth_step(r_int / bg.t, *cut)
    x = np.log(R_int)
    anti = make_interp_spline(x, g * R_int ** 4, k=3).antiderivative()
    rn = outer_grid.nodes
    dr = rn[1] - rn[0]
    faces = np.concatenate([[0.0], rn + 0.5 * dr])
    Rf = faces * lam1
    xf = np.log(np.clip(Rf, R_int[0], R_int[-1]))
    if Rf[-1] > R_int[-1] * (1 + 1e-12):
        raise ResolutionError("inner grid does not cover the outer domain")
    cum = anti(xf) - anti(x[0])
    cum[0] = 0.0
    vol = (faces[1:] ** 6 - faces[:-1] ** 6) / 6.0
    # int F r^3 dr = lambda2^2 lambda1^{-4} int g R^3 dR
    avg = bg.lam2 ** 2 * np.exp(-4.0 * la1) * np.diff(cum) / vol
    return rn * rn * avg


# ------------------------------------------------------------ stack run

@dataclass(frozen=True)
class StackConfig:
    t_min: float
    t_max: float
    levels: int = 1                 # outer/inner pairs h1, h2, ...
    dr_lambda2: float = 0.1         # lambda2(t_min) dr
    cfl: float = 0.4
    r_max_factor: float = 2.5       # r_max = factor * t_max
    sample_every: int = 1

    def __post_init__(self):
        if not (0.0 < self.t_min < self.t_max):
            raise InputError("need 0 < t_min < t_max")
        if not (1 <= self.levels <= 3):
            raise InputError("levels must be 1, 2 or 3")
        if not (0.0 < self.dr_lambda2 <= 0.2):
            raise ResolutionError("lambda2 dr must lie in (0, 0.2]")
        if not (0.0 < self.cfl <= 0.5):
            raise InputError("cfl must lie in (0, 0.5]")


@dataclass(frozen=True)
class StackSample:
    t: float
    log_tau: float
    lam2: float
    residual_empty: float
    residual_h: tuple              # box-free residual after h0, h0+h1, ...
    residual_raw: tuple            # the same without the outer-profile correction
    sup_h0: float
    h_norms: tuple                 # H^1 norms of h1, h2, ... (lambda2 weighting, r <= t)
    m_hat: tuple                   # m_k / lambda2^2, k = 1..levels
    orth_defect: float
    m: float


@dataclass(frozen=True)
class StackFields:
    """Histories of every correction on the shared time grid."""

    grid: RadialGrid               # inner R-grid
    h0: np.ndarray                 # (n_times, n_R)
    levels_w: tuple                # outer w = h_k0/r^2 histories, (n_times, n_r)
    levels_h1: tuple               # inner h_k1 histories, (n_times, n_R)
    levels_m: tuple                # m_k/lambda2^2 histories
    valid: tuple                   # (first, last) usable index per level


@dataclass(frozen=True)
class CorrectionStack:
    setup: CorrectionSetup
    config: StackConfig
    samples: tuple = field(default_factory=tuple)
    outer_grid: RadialGrid | None = None
    times: np.ndarray | None = None
    fields: StackFields | None = None

    def column(self, name: str):
        return np.array([getattr(s, name) for s in self.samples])


def build_stack(setup: CorrectionSetup, config: StackConfig, sample_times=None,
                keep_fields: bool = False) -> CorrectionStack:
    """Run h0 and `levels` outer/inner pairs over [t_min, t_max].

    All levels share one leapfrog time grid t_n = t_min + n dt. Level k
    starts from zero data 2k steps after t_min (its source needs five
    neighbouring times of the level below). Residuals are reported at the
    requested sample times, snapped to the time grid.
    """
    mod = setup.modulation
    outer_params = setup.profile.params
    lam2_min = lambda2(config.t_min, outer_params)
    r_max = config.r_max_factor * config.t_max
    n_r = int(math.ceil(r_max * lam2_min / config.dr_lambda2))
    ogrid = staggered_grid(r_max, n_r)
    dr = r_max / n_r
    dt = config.cfl * dr
    n_steps = int(math.ceil((config.t_max - config.t_min) / dt))
    times = config.t_min + dt * np.arange(n_steps + 1)
    if times[-1] > outer_params.t0:
        raise InputError("t_max exceeds t0")
    la1_max = float(mod.log_lambda1(config.t_min))
    # interior nodes (after the stencil trim) must still cover the outer domain
    grid = setup.inner_grid(math.exp(la1_max) * (r_max + dr) * 10 ** (6.0 / setup.per_decade))
    R = grid.nodes
    hx = grid.log_step
    s_int = slice(_HALF, R.size - _HALF)
    R_int = R[s_int]
    pot = PotentialSpec("outer", setup.profile)
    N = setup.normalizer

    bgs = [background(setup, float(t), R) for t in times]

    # level 0
    h0 = np.stack([solve_h0(setup, float(t), grid, bg).h for t, bg in zip(times, bgs)])
    box0 = [8.0 * (2.0 * bg.mu + bg.mu ** 2) for bg in bgs]

    def inner_piece(arr, n):
        return InnerPiece(arr[n - 2:n + 3], dt)

    levels_w = []          # outer w histories per level
    levels_h1 = []         # inner R-grid histories per level
    levels_m = []          # m_k/lambda2^2 per level, per step
    valid = []
    start = 2
    e_prev = {}
    for n in range(2, n_steps - 1):
        e_prev[n] = corrected_residual(bgs[n], hx, [inner_piece(h0, n)], [], box0[n]).box_free

    for lev in range(config.levels):
        src = {n: -cell_average_source(bgs[n], e, R_int, ogrid, setup.source_cut)
               for n, e in e_prev.items()}
        zero = np.zeros(ogrid.n)
        t_start = float(times[start])
        n_lev = n_steps - 2 - start
        w = leapfrog_history(ogrid, pot, t_start, dt, n_lev,
                             lambda k: src.get(start + k, zero))
        w_full = np.zeros((n_steps + 1, ogrid.n))
        w_full[start:start + n_lev + 1] = w
        h1 = np.zeros((n_steps + 1, R.size))
        mh = np.zeros(n_steps + 1)
        for n in range(start, start + n_lev + 1):
            bg = bgs[n]
            piece = OuterPiece(ogrid, w_full[n][None, :].repeat(5, axis=0), dt)
            wv = piece.eval(bg.r)
            Wh = 4.0 * bg.cos2A_minus_cos2Q2 * wv / bg.lam2 ** 2
            X = _grid_integral(Wh * bg.Phi * R, grid)
            mh[n] = -8.0 * X / N
            F = Wh + mh[n] * bg.omc1
            g = bubble.green_solve(grid, F, F)
            h1[n] = math.exp(-2.0 * bg.log_tau) * g.h
        levels_w.append(w_full)
        levels_h1.append(h1)
        levels_m.append(mh)
        valid.append((start + 2, start + n_lev - 2))
        # box-free residual after this level, for the next level's source
        new_start = start + 2
        e_next = {}
        last = start + n_lev - 2
        for n in range(new_start, last + 1):
            e_next[n] = _stack_residual(setup, bgs[n], hx, n, h0, levels_w, levels_h1,
                                        levels_m, ogrid, dt, box0[n]).box_free
        e_prev = e_next
        start = new_start

    # samples
    if sample_times is None:
        idx = list(range(2 * config.levels + 2, n_steps - 2 * config.levels - 2,
                         config.sample_every))
    else:
        idx = sorted({int(round((float(ts) - config.t_min) / dt)) for ts in sample_times})
    lo_ok = 2 * config.levels + 2
    hi_ok = n_steps - 2 * config.levels - 2
    samples = []
    for n in idx:
        if not (lo_ok <= n <= hi_ok):
            raise InputError(f"sample time {times[n] if 0 <= n <= n_steps else n} is "
                             "too close to the ends of the run")
        samples.append(_sample(setup, bgs[n], hx, n, h0, levels_w, levels_h1, levels_m,
                               ogrid, dt, box0[n], R_int, grid))
    fields = None
    if keep_fields:
        fields = StackFields(grid, h0, tuple(levels_w), tuple(levels_h1), tuple(levels_m),
                             tuple(valid))
    return CorrectionStack(setup, config, tuple(samples), ogrid, times, fields)


def _grid_integral(values, grid: RadialGrid) -> float:
    x = np.log(grid.nodes)
    return float(make_interp_spline(x, values * grid.nodes, k=5).integrate(x[0], x[-1]))


def _pieces(n, h0, levels_w, levels_h1, ogrid, dt, depth):
    inner = [InnerPiece(h0[n - 2:n + 3], dt)]
    outer = []
    for k in range(depth):
        inner.append(InnerPiece(levels_h1[k][n - 2:n + 3], dt))
        outer.append(OuterPiece(ogrid, levels_w[k][n - 2:n + 3], dt))
    return inner, outer


def _stack_residual(setup, bg, hx, n, h0, levels_w, levels_h1, levels_m, ogrid, dt, box0,
                    depth=None):
    depth = len(levels_w) if depth is None else depth
    inner, outer = _pieces(n, h0, levels_w, levels_h1, ogrid, dt, depth)
    coef = box0 + sum(levels_m[k][n] for k in range(depth))
    return corrected_residual(bg, hx, inner, outer, coef)


def _sample(setup, bg, hx, n, h0, levels_w, levels_h1, levels_m, ogrid, dt, box0, R_int, grid):
    s = slice(_HALF, bg.R.size - _HALF)
    src = source_terms(bg)
    eq2 = outer_profile_error(setup, bg, hx)
    empty = -src.E2[s]
    res_h, raw_h = [], []
    for depth in range(len(levels_w) + 1):
        parts = _stack_residual(setup, bg, hx, n, h0, levels_w, levels_h1, levels_m, ogrid,
                                dt, box0, depth)
        res_h.append(residual_norm(bg, parts.box_free, R_int))
        raw_h.append(residual_norm(bg, parts.box_free - eq2, R_int))
    # H^1 norms of h_k = h_k0 + h_k1 with lambda2 weighting on r <= t
    sub = replace_slice(bg, s)
    r = sub.r
    ex = -8.0 * sub.s2 / r ** 2
    norms = []
    for k in range(len(levels_w)):
        a_in = InnerPiece(levels_h1[k][n - 2:n + 3], dt)
        v_in, vt_in, _, _ = a_in.at_r(bg, hx)
        op = OuterPiece(ogrid, levels_w[k][n - 2:n + 3], dt)
        w, _, _, wt, _ = op.at_r(r)
        h = v_in + r * r * w
        ht = vt_in + r * r * wt
        norms.append(h1_norm(r, h, ht, bg.lam2, ex, r_cut=bg.t))
    keep = r <= bg.t
    sup_h0 = float(np.max(np.abs(h0[n][s][keep])))
    val, scale = orthogonality_defect(setup, bg.t)
    return StackSample(
        t=bg.t, log_tau=bg.log_tau, lam2=bg.lam2,
        residual_empty=residual_norm(bg, empty, R_int),
        residual_h=tuple(res_h), residual_raw=(residual_norm(bg, empty - eq2, R_int),)
        + tuple(raw_h[1:]), sup_h0=sup_h0, h_norms=tuple(norms),
        m_hat=tuple(float(levels_m[k][n]) for k in range(len(levels_w))),
        orth_defect=abs(val) / scale, m=float(setup.m(bg.t)))


# ------------------------------------------------------------ u_N and tracking

def _to_r(R_int, values, R):
    """Spline of values(R_int) in log R evaluated at R; zero outside the grid."""
    x = np.log(R_int)
    out = np.zeros_like(R)
    pos = R > 0.0
    xr = np.log(R[pos])
    inside = (xr >= x[0]) & (xr <= x[-1])
    sub = np.zeros_like(xr)
    sub[inside] = make_interp_spline(x, values, k=5)(xr[inside])
    out[pos] = sub
    return out


def uN_data(stack: CorrectionStack, t: float, r, depth: int | None = None):
    """(t_n, u, u_t) of u_N = Q1 - Q2~ + chi (h0 + h1 + ...) at fixed radii r.

    t is snapped to the stack time grid; depth counts the outer/inner
    pairs after h0 (default: all levels). chi switches the corrections off
    between source_cut[0] t and source_cut[1] t; they also vanish outside
    the grids they were computed on.
    """
    if stack.fields is None:
        raise InputError("the stack was built without keep_fields=True")
    f = stack.fields
    depth = len(f.levels_w) if depth is None else int(depth)
    if not (0 <= depth <= len(f.levels_w)):
        raise InputError(f"depth must lie in [0, {len(f.levels_w)}]")
    times = stack.times
    dt = float(times[1] - times[0])
    n = int(round((float(t) - times[0]) / dt))
    lo = max([2] + [f.valid[k][0] for k in range(depth)])
    hi = min([times.size - 3] + [f.valid[k][1] for k in range(depth)])
    if not (lo <= n <= hi):
        raise InputError(f"t={t} is outside the usable part of the stack run")
    tn = float(times[n])
    setup = stack.setup
    r = np.asarray(r, dtype=float)
    grid = f.grid
    hx = grid.log_step
    bg = background(setup, tn, grid.nodes)
    lam1 = math.exp(bg.log_lambda1)
    R = lam1 * r
    q2, q2t, _ = setup.profile.time_derivatives(tn, r)
    u = bubble.Q(R) - q2
    ut = bg.a1 * bubble.Phi(R) - q2t
    R_int = grid.nodes[_HALF:grid.n - _HALF]
    inner = [f.h0] + [f.levels_h1[k] for k in range(depth)]
    h = np.zeros_like(r)
    ht = np.zeros_like(r)
    for hist in inner:
        v, vt, _, _ = InnerPiece(hist[n - 2:n + 3], dt).at_r(bg, hx)
        h += _to_r(R_int, v, R)
        ht += _to_r(R_int, vt, R)
    for k in range(depth):
        w, _, _, wt, _ = OuterPiece(stack.outer_grid, f.levels_w[k][n - 2:n + 3], dt).at_r(r)
        h += r * r * w
        ht += r * r * wt
    # the corrections grow like r^2 outside the cone; fade them out there
    lo, hi = setup.source_cut
    keep = smooth_step(r / tn, lo, hi)
    eps = 1e-6 * tn
    dkeep = (smooth_step(r / (tn + eps), lo, hi) - smooth_step(r / (tn - eps), lo, hi)) / (2 * eps)
    return tn, u + keep * h, ut + keep * ht + dkeep * h


def tracking_grid(lam1_max: float, r_outer: float = 1.0, per_decade: float = 40.0):
    """0 followed by a log grid from 1e-3/lam1_max to r_outer."""
    step = math.log(10.0) / per_decade
    rr = np.exp(np.arange(math.log(1e-3 / lam1_max), math.log(r_outer) + 0.5 * step, step))
    return np.concatenate([[0.0], rr])


def track_nonlinear(stack: CorrectionStack, t_from: float, t_to: float, r=None,
                    n_steps: int = 2000, depth: int | None = None, fit_window: float = 3.0,
                    n_out: int = 10, keep_snapshots: bool = False) -> TrackingReport:
    """Evolve the wave map from u_N data at t_from and fit the inner scale.

    The fit compares u with Q(lam r) - Q2~(t, r) on r <= fit_window/lam and
    reports lam against lambda1 from the modulation solution.
    """
    mod = stack.setup.modulation
    if r is None:
        r = tracking_grid(math.exp(float(mod.log_lambda1(min(t_from, t_to)))))
    tn, u0, ut0 = uN_data(stack, t_from, np.asarray(r)[1:], depth)

    def initial(rr):
        return np.concatenate([[0.0], u0]), np.concatenate([[0.0], ut0])

    profile = stack.setup.profile
    return evolve_nonlinear_track(
        initial, tn, t_to, r, n_steps, lambda t: float(mod.log_lambda1(t)),
        lambda t, rr: profile(t, rr), n_out=n_out, window=fit_window,
        keep_snapshots=keep_snapshots)


# ------------------------------------------------------------ m coupling

def m_hat_history(stack: CorrectionStack):
    """(t, sum_k m_k/lambda2^2) on the part of the run where every level is live."""
    f = stack.fields
    if f is None:
        raise InputError("the stack was built without keep_fields=True")
    lo = max(v[0] for v in f.valid)
    hi = min(v[1] for v in f.valid)
    idx = np.arange(lo, hi + 1)
    return stack.times[idx], sum(m[idx] for m in f.levels_m)


def _power_tail(log_tau, vals, at):
    """Continue vals ~ A tau^p fitted on the given points to log tau = at."""
    p, logA = np.polyfit(log_tau, np.log(np.abs(vals)), 1)
    return np.sign(vals[-1]) * np.exp(logA + p * at)


def coupled_m(stack: CorrectionStack, fit_points: int = 40) -> PerturbationM:
    """m(t) solving 8(2 m lambda2 + m^2) + sum_k m_k = 0 with m_k from the stack.

    The root m = lambda2 (sqrt(1 - mhat/8) - 1), mhat = sum m_k/lambda2^2, is
    the limit of the fixed-point iteration. Outside the run mhat is continued
    as a power of tau fitted on its small-t end and held constant past its
    large-t end (nu is integrated up from t = 0, so that side never feeds
    back into the run).
    """
    t, mh = m_hat_history(stack)
    mod = stack.setup.modulation
    lt = np.asarray(mod.log_tau(t), dtype=float)
    if np.any(np.diff(lt) >= 0.0):
        raise InputError("tau must decrease along the run")
    spl = make_interp_spline(np.log(t), mh, k=3)
    k = min(fit_points, t.size // 4)
    lo_fit = (lt[:k], mh[:k])

    def mhat(tt):
        tt = np.asarray(tt, dtype=float)
        out = np.empty_like(tt)
        below = tt < t[0]
        above = tt > t[-1]
        mid = ~(below | above)
        out[mid] = spl(np.log(tt[mid]))
        if below.any():
            out[below] = _power_tail(*lo_fit, np.asarray(mod.log_tau(tt[below])))
        if above.any():
            out[above] = mh[-1]
        return out

    params = mod.params

    def sampler(tt):
        tt = np.asarray(tt, dtype=float)
        lam2 = np.exp(np.asarray(mod.log_lambda2(np.minimum(tt, params.t0)), dtype=float))
        return lam2 * (np.sqrt(1.0 - mhat(tt) / 8.0) - 1.0)

    return PerturbationM(sampler)


def couple_stack(setup: CorrectionSetup, config: StackConfig, iterations: int = 3,
                 sample_times=None):
    """Alternate stack runs and m updates; returns (setup, stack, changes).

    changes[i] is the sup relative change of mhat between iterations i and i+1.
    """
    if setup.m is not ZERO_M:
        raise InputError("coupling starts from a setup with m = 0")
    base = setup.modulation
    stack = build_stack(setup, config, sample_times, keep_fields=True)
    changes = []
    _, prev = m_hat_history(stack)
    for _ in range(iterations):
        m = coupled_m(stack)
        mod = solve_modulation(base.params, m, base, strict_envelope=False)
        setup = replace(setup, modulation=mod, m=m)
        stack = build_stack(setup, config, sample_times, keep_fields=True)
        _, cur = m_hat_history(stack)
        changes.append(float(np.max(np.abs(cur - prev)) / np.max(np.abs(cur))))
        prev = cur
    return setup, stack, tuple(changes)


# ------------------------------------------------------------ one-time helpers

def compute_m1(setup: CorrectionSetup, t: float, w_of_r, tol: float = 1e-10) -> float:
    """m1/lambda2^2 = -(8/N) int W h10 Phi R dR by adaptive quadrature.

    w_of_r(r) returns h10/r^2 at physical radius r.
    """
    mod = setup.modulation
    lam1 = math.exp(float(mod.log_lambda1(t)))
    lam2 = math.exp(float(mod.log_lambda2(t)))

    def integrand(R):
        R_arr = np.array([R])
        bg = background(setup, t, R_arr)
        return float(4.0 * bg.cos2A_minus_cos2Q2[0] * w_of_r(R / lam1) / lam2 ** 2
                     * bg.Phi[0] * R)

    return -8.0 * integrate_halfline(integrand, tol=tol) / setup.normalizer


def empty_residual(setup: CorrectionSetup, t: float, per_decade: float | None = None):
    """(corrected, raw) residual norms of u = Q1 - Q2~ at one time."""
    la1 = float(setup.modulation.log_lambda1(t))
    grid = setup.inner_grid(math.exp(la1) * t * 1.2) if per_decade is None else \
        grid_per_decade(setup.R_min, math.exp(la1) * t * 1.2, per_decade)
    bg = background(setup, t, grid.nodes)
    s = slice(_HALF, grid.n - _HALF)
    empty = -source_terms(bg).E2[s]
    eq2 = outer_profile_error(setup, bg, grid.log_step)
    R_int = grid.nodes[s]
    return residual_norm(bg, empty, R_int), residual_norm(bg, empty - eq2, R_int)


def direct_residual(setup: CorrectionSetup, t: float, grid: RadialGrid, dt_rel: float = 1e-4):
    """N(Q1 - Q2~) + N(Q2~) by brute finite differences on u itself.

    Only usable at moderate tau (cancellations grow like tau^2); it serves as
    an independent check of the assembled E2.
    """
    mod = setup.modulation
    R = grid.nodes
    la1 = float(mod.log_lambda1(t))
    r = R * math.exp(-la1)
    dt = dt_rel * t

    def u_at(tt):
        return bubble.Q(math.exp(float(mod.log_lambda1(tt))) * r) - setup.profile(tt, r)

    vals = np.stack([u_at(t + k * dt) for k in (-2, -1, 0, 1, 2)])
    _, utt = _time_stencil(vals, dt)
    u = vals[2]
    _, uxx = _xderiv(u, grid.log_step)
    s = slice(_HALF, R.size - _HALF)
    r2 = r[s] ** 2
    n_u = -utt[s] + uxx / r2 - 2.0 * np.sin(2.0 * u[s]) / r2
    q, _, qtt = setup.profile.time_derivatives(t, r)
    _, qxx = _xderiv(q, grid.log_step)
    n_q = -qtt[s] + qxx / r2 - 2.0 * np.sin(2.0 * q[s]) / r2
    return n_u + n_q


H0_EXTENT = 10.0


def h0_residuals(setup: CorrectionSetup, t: float, rel_step: float = 1e-3):
    """(empty, after h0) box-free residual norms at one time, and sup |h0| on r <= t.

    h0 is re-solved at five times t + k dt with dt = rel_step |zeta(t)|, the
    inverse rate at which tau changes.
    """
    mod = setup.modulation
    la1 = float(mod.log_lambda1(t))
    # the Theta-branch tail of h0 feels the grid end until about 10 t lambda1
    grid = setup.inner_grid(math.exp(la1) * t * H0_EXTENT)
    dt = rel_step * abs(float(mod.Z(t)))
    vals = np.stack([solve_h0(setup, t + k * dt, grid).h for k in (-2, -1, 0, 1, 2)])
    bg = background(setup, t, grid.nodes)
    s = slice(_HALF, grid.n - _HALF)
    R_int = grid.nodes[s]
    box = 8.0 * (2.0 * bg.mu + bg.mu ** 2)
    parts = corrected_residual(bg, grid.log_step, [InnerPiece(vals, dt)], [], box)
    empty = -source_terms(bg).E2[s]
    keep = grid.nodes <= t * math.exp(la1)
    return (residual_norm(bg, empty, R_int), residual_norm(bg, parts.box_free, R_int),
            float(np.max(np.abs(vals[2][keep]))))
