"""Scalar dynamics of the inner scale lambda1(t).

With alpha = log lambda1 and alpha' = 1/(zeta + nu) the modulation law

    lambda1''/lambda1 - 2 (lambda1'/lambda1)^2 = -c (lambda2 + m)^2

becomes zeta' = c lambda2^2 zeta^2 - 1 for the unperturbed part and a
Riccati equation for nu driven by m. Writing c = 4 kappa^2 the ansatz is

    zeta = -t/(2 kappa L^b) + t (1 + b/L)/(8 kappa^2 L^{2b}) + w,  L = |log t|,

and w solves w' = -4 lambda2~ w + F(t, w). Everything is tabulated on a grid
uniform in s = log L and integrated from small t (large s) towards t0,
which is the stable direction of the linearized equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import make_interp_spline

from . import bubble
from .errors import DomainError, FixedPointError, InputError, SingularityError
from .outer import OuterParams

MAX_LOG_TAU_NU = 460.0   # below this tau^{-1/2} < 1e-100 and nu is negligible


@dataclass(frozen=True)
class ModulationParams:
    beta: float = 2.0
    t0: float = 0.3
    c_source: str = "computed"
    picard_tol: float = 1e-13
    max_iter: int = 50
    t_min: float = 1e-40
    per_unit: int = 256          # grid nodes per unit of s = log|log t|

    def __post_init__(self):
        OuterParams(self.beta, self.t0)
        if self.c_source not in ("paper", "computed"):
            raise InputError(f"c_source must be 'paper' or 'computed', got {self.c_source!r}")
        if not (0.0 < self.picard_tol <= 1e-10 * self.t0):
            raise InputError("picard_tol must lie in (0, 1e-10 * t0]")
        if self.max_iter < 1:
            raise InputError("max_iter must be positive")
        if not (0.0 < self.t_min < self.t0 * 1e-3):
            raise InputError("t_min must be far below t0")
        if self.per_unit < 16:
            raise InputError("per_unit must be at least 16")

    @property
    def c(self) -> float:
        return bubble.modulation_constant(self.c_source)

    @property
    def kappa(self) -> float:
        return 0.5 * math.sqrt(self.c)

    @property
    def outer(self) -> OuterParams:
        return OuterParams(self.beta, self.t0)


# ------------------------------------------------------------ time grid

def s_of_t(t):
    return np.log(-np.log(np.asarray(t, dtype=float)))


def t_of_s(s):
    return np.exp(-np.exp(np.asarray(s, dtype=float)))


def s_grid(params: ModulationParams) -> np.ndarray:
    s0, s1 = float(s_of_t(params.t0)), float(s_of_t(params.t_min))
    n = int(math.ceil((s1 - s0) * params.per_unit)) + 1
    return np.linspace(s0, s1, n)


def _log_lambda2_L(L, beta):
    return beta * np.log(L) + L


# ------------------------------------------------------------ zeta ansatz

def zeta_ansatz(t, params: ModulationParams):
    """The explicit three-term part A(t) of zeta."""
    t = np.asarray(t, dtype=float)
    L = -np.log(t)
    k, b = params.kappa, params.beta
    return -t / (2 * k * L ** b) + t * (1 + b / L) / (8 * k * k * L ** (2 * b))


def assemble_zeta(w, t, params: ModulationParams):
    """zeta = A(t) + w."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0.0) or np.any(t_arr > params.t0 * (1 + 1e-12)):
        raise DomainError("t must lie in (0, t0]")
    out = zeta_ansatz(t_arr, params) + w
    return float(out) if np.ndim(out) == 0 else out


def _w_coefficients(L, params: ModulationParams):
    """(mu_hat, src_hat) of t d/dt w_hat = mu_hat w_hat - src_hat - 4 kappa^2 w_hat^2,
    with w_hat = w L^{2b}/t."""
    k, b = params.kappa, params.beta
    a = -1.0 + 1.0 / (4 * k * L ** b) + b / (4 * k * L ** (b + 1))
    t_lam2_tilde = -k * a * L ** b            # t * lambda2~
    mu_hat = 4.0 * t_lam2_tilde + 1.0 + 2.0 * b / L
    # L^{2b} (a^2 - 1 - A'), with the L^{-b} terms cancelled exactly
    src_hat = -(1.0 + 4 * b / L + (3 * b * b + 2 * b) / (L * L)) / (16 * k * k)
    return mu_hat, src_hat


_SQ6 = math.sqrt(6.0)
_RADAU_C = np.array([(4 - _SQ6) / 10, (4 + _SQ6) / 10, 1.0])
_RADAU_A = np.array([
    [(88 - 7 * _SQ6) / 360, (296 - 169 * _SQ6) / 1800, (-2 + 3 * _SQ6) / 225],
    [(296 + 169 * _SQ6) / 1800, (88 + 7 * _SQ6) / 360, (-2 - 3 * _SQ6) / 225],
    [(16 - _SQ6) / 36, (16 + _SQ6) / 36, 1.0 / 9.0]])


def stage_points(s: np.ndarray) -> np.ndarray:
    """Radau IIA stage abscissae for steps from s[k+1] down to s[k], shape (n-1, 3)."""
    h = s[:-1] - s[1:]
    return s[1:, None] + _RADAU_C[None, :] * h[:, None]


def linear_backward(p_st: np.ndarray, q_st: np.ndarray, s: np.ndarray,
                    y_end: float) -> np.ndarray:
    """Solve y' = p(s) y + q(s) from s[-1] down to s[0] on the grid s.

    Three-stage Radau IIA (order 5, L-stable) with p, q sampled at the
    stage points. For a linear equation each step is y_k = g_k y_{k+1} + r_k,
    so all stage systems are solved in one batched call.
    """
    h = (s[:-1] - s[1:])[:, None, None]
    M = np.eye(3)[None] - h * _RADAU_A[None] * p_st[:, None, :]
    rhs = np.concatenate([np.ones((s.size - 1, 3, 1)),
                          h * (_RADAU_A[None] @ q_st[:, :, None])], axis=2)
    sol = np.linalg.solve(M, rhs)
    g, r = sol[:, 2, 0], sol[:, 2, 1]
    y = np.empty_like(s)
    y[-1] = y_end
    for k in range(s.size - 2, -1, -1):
        y[k] = g[k] * y[k + 1] + r[k]
    return y


def _picard(step, w0: np.ndarray, tol: float, max_iter: int, scale: np.ndarray):
    """Generic Picard loop; scale converts iterates to the tested quantity."""
    diffs: list[float] = []
    w = w0
    growing = 0
    for _ in range(max_iter):
        w_new = step(w)
        d = float(np.max(np.abs((w_new - w) * scale)))
        diffs.append(d)
        w = w_new
        if d < tol:
            return w, diffs
        if len(diffs) > 1 and d >= diffs[-2]:
            growing += 1
            if growing >= 5:
                raise FixedPointError("Picard differences stopped decreasing")
        else:
            growing = 0
    raise FixedPointError(f"Picard iteration did not reach {tol:g} in {max_iter} steps")


@dataclass(frozen=True)
class WSolution:
    s: np.ndarray
    w_hat: np.ndarray          # w L^{2 beta}/t
    diffs: tuple
    params: ModulationParams

    @property
    def t(self):
        return t_of_s(self.s)

    @property
    def w(self):
        L = np.exp(self.s)
        return self.w_hat * self.t / L ** (2 * self.params.beta)

    def bound_constant(self, t_lo: float = 1e-4) -> float:
        """sup |w| L^{2 beta}/t over [t_lo, t0]."""
        mask = self.t >= t_lo * (1 - 1e-12)
        return float(np.max(np.abs(self.w_hat[mask])))


def solve_w(params: ModulationParams, source_factor: float = 1.0) -> WSolution:
    """Picard iteration for w; each step is a linear stiff solve in s.

    source_factor scales the inhomogeneous part of F (0 gives w = 0).
    """
    s = s_grid(params)
    L = np.exp(s)
    k2 = 4.0 * params.kappa ** 2
    t = t_of_s(s)
    scale = t / L ** (2 * params.beta)

    st = stage_points(s)
    L_st = np.exp(st)
    mu_st, src_st = _w_coefficients(L_st, params)
    mu_end, src_end = _w_coefficients(L[-1], params)

    # d w_hat/ds = L [mu w_hat - src - 4k^2 w_old^2]
    def step(w_hat):
        nl = make_interp_spline(s, w_hat, k=5)(st)
        q = -L_st * (source_factor * src_st + k2 * nl ** 2)
        y0 = (source_factor * src_end + k2 * w_hat[-1] ** 2) / mu_end
        return linear_backward(L_st * mu_st, q, s, y0)

    w_hat, diffs = _picard(step, np.zeros_like(s), params.picard_tol,
                           params.max_iter, scale)
    return WSolution(s, w_hat, tuple(diffs), params)


# ------------------------------------------------------------ perturbation

@dataclass(frozen=True)
class PerturbationM:
    """m(t) as a vectorized callable plus stored seminorms ||m||_{p,l}."""

    sampler: Callable = field(default=lambda t: np.zeros_like(np.asarray(t, dtype=float)))
    seminorms: dict = field(default_factory=dict)

    def __call__(self, t):
        return np.asarray(self.sampler(np.asarray(t, dtype=float)), dtype=float)

    def with_seminorms(self, solution: "ModulationSolution", t_grid,
                       pairs: Sequence[tuple] = ((0, 0), (1, 0), (1, 1), (1, 2))):
        """sup over t_grid of tau^p sum_{j <= l} |(t d_t)^j m|."""
        t_grid = np.sort(np.asarray(t_grid, dtype=float))
        u = np.log(t_grid)
        vals = self(t_grid)
        spl = make_interp_spline(u, vals, k=5)
        derivs = [vals] + [spl.derivative(j)(u) for j in (1, 2)]
        log_tau = solution.log_tau(t_grid)
        out = {}
        for p, l in pairs:
            tot = sum(np.abs(derivs[j]) for j in range(l + 1))
            with np.errstate(over="ignore"):
                out[(p, l)] = float(np.max(np.exp(p * log_tau) * tot))
        return replace(self, seminorms=out)


ZERO_M = PerturbationM()


def tau_power_m(solution: "ModulationSolution", power: float = -1.0,
                amplitude: float = 1.0) -> PerturbationM:
    """m(t) = amplitude * tau(t)^power with tau from the given solution."""
    def sampler(t):
        with np.errstate(over="ignore", under="ignore"):
            return amplitude * np.exp(power * solution.log_tau(t))
    return PerturbationM(sampler)


# ------------------------------------------------------------ nu

@dataclass(frozen=True)
class NuSolution:
    """nu on the grid, also as nu_scaled = nu * exp(log_weight) with
    log_weight = log(lambda2^2 tau0^p), p the fitted decay exponent of m."""

    s: np.ndarray
    nu: np.ndarray
    diffs: tuple
    nu_scaled: np.ndarray = None
    log_weight: np.ndarray = None


def _decay_exponent(m_vals, log_tau) -> float:
    """p with |m| ~ tau^{-p}, fitted where tau > e and m does not vanish."""
    sel = (log_tau > 1.0) & (np.abs(m_vals) > 0.0)
    if np.count_nonzero(sel) < 4:
        return 0.0
    slope = np.polyfit(log_tau[sel], np.log(np.abs(m_vals[sel])), 1)[0]
    return float(np.clip(-slope, 0.0, 3.0))


def solve_nu(m: PerturbationM, params: ModulationParams, base: "ModulationSolution" = None,
             strict_envelope: bool = True) -> NuSolution:
    """Picard iteration for nu with nu -> 0 as t -> 0.

    nu' = c(m^2 + 2 lambda2 m) zeta^2 + 2c(lambda2+m)^2 zeta nu + c(lambda2+m)^2 nu^2.
    The unknown carried through the solver is nu lambda2^2 tau^p with p
    fitted to |m| ~ tau^{-p}, which stays O(1) while nu itself spans
    hundreds of decades. strict_envelope=False skips the |m| <= tau^{-1/2}
    check, for m coupled to desk-scale corrections where tau is small.
    """
    if base is None:
        base = solve_modulation(params)
    s_all = base.s
    t_all = t_of_s(s_all)
    log_tau0 = base.log_tau(t_all)
    m_all = m(t_all)
    # the bound is asymptotic; it is enforced where tau >= 1
    env = np.exp(-0.5 * np.minimum(log_tau0, 700.0))
    inner = log_tau0 >= 0.0
    if strict_envelope and np.any(np.abs(m_all[inner]) > env[inner] * (1 + 1e-9) + 1e-300):
        raise InputError("m violates |m| <= tau^{-1/2}")
    keep = log_tau0 <= MAX_LOG_TAU_NU
    n_keep = max(int(np.count_nonzero(keep)), 16)
    s = s_all[:n_keep]
    c, b = params.c, params.beta
    p_w = _decay_exponent(m_all[:n_keep], log_tau0[:n_keep])
    alpha0 = base._alpha_spline

    def coefficients(si):
        """Coefficients of dy/ds = rate y + src - nl y^2 for y = nu lambda2^2 tau0^p."""
        Li = np.exp(si)
        ti = np.exp(-Li)
        log_l2 = _log_lambda2_L(Li, b)
        l2 = np.exp(log_l2)
        log_tau = alpha0(si) - log_l2
        mi = m(ti)
        z = base._zeta_spline(si) * ti / Li ** b
        K = c * (l2 + mi) ** 2
        mu = -2.0 * K * z
        dlog_tau = -ti * Li / z - (b + Li)
        rate = Li * ti * mu + 2.0 * (b + Li) + p_w * dlog_tau
        # L t lambda2^2 tau^p G0 with G0 = c (m^2 + 2 lambda2 m) zeta^2
        with np.errstate(over="ignore", invalid="ignore"):
            m_w = np.where(mi == 0.0, 0.0, mi * np.exp(p_w * log_tau))
        src = -Li * ti * c * (mi + 2.0 * l2) * m_w * (l2 * z) ** 2
        nl = Li * ti * K / l2 ** 2 * np.exp(-p_w * log_tau)
        return rate, src, nl

    st = stage_points(s)
    rate_st, src_st, nl_st = coefficients(st)
    rate_end, src_end, nl_end = coefficients(s[-1:])
    log_weight = 2.0 * _log_lambda2_L(np.exp(s_all), b) + p_w * log_tau0

    def step(y_old):
        old = make_interp_spline(s, y_old, k=5)(st)
        q = src_st - nl_st * old ** 2
        y0 = -(src_end[0] - nl_end[0] * y_old[-1] ** 2) / rate_end[0]
        return linear_backward(rate_st, q, s, y0)

    y, diffs = _picard(step, np.zeros_like(s), params.picard_tol, params.max_iter,
                       np.exp(-log_weight[:n_keep]))
    scaled = np.empty_like(s_all)
    scaled[:n_keep] = y
    # beyond the cut nu is below 1e-100; continue the scaled value flat
    scaled[n_keep:] = y[-1]
    nu = scaled * np.exp(-log_weight)
    return NuSolution(s_all, nu, tuple(diffs), scaled, log_weight)


# ------------------------------------------------------------ alpha

def alpha_and_lambda1(nu: NuSolution, params: ModulationParams, zeta: np.ndarray,
                      s: np.ndarray):
    """alpha(t) = int_0^t [1/(zeta+nu) - 1/zeta] - int_t^t0 1/zeta on the s grid.

    Returns (alpha, log_lambda1), which coincide since lambda1 = e^alpha.
    Raises SingularityError if zeta + nu changes sign.
    """
    Z = zeta + nu.nu
    if np.any(Z >= 0.0) or np.any(zeta >= 0.0):
        raise SingularityError("zeta + nu must stay negative")
    L = np.exp(s)
    t = t_of_s(s)
    # dt = -t L ds
    g2 = t * L / zeta
    J2 = make_interp_spline(s, g2, k=5).antiderivative()
    second = J2(s) - J2(s[0])                  # = int_t^t0 1/zeta dt'
    g1 = -nu.nu / (zeta * Z) * t * L
    J1 = make_interp_spline(s, g1, k=5).antiderivative()
    first = J1(s[-1]) - J1(s)                  # = int_0^t [...] dt'
    alpha = first - second
    return alpha, alpha.copy()


# ------------------------------------------------------------ solution

@dataclass(frozen=True)
class TimeScales:
    t: float
    log_lambda1: float
    log_lambda2: float
    log_tau: float
    log_tau1: float
    tau2: float
    alpha: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ModulationSolution:
    params: ModulationParams
    s: np.ndarray
    w_sol: WSolution
    zeta_hat: np.ndarray       # zeta L^beta / t
    nu_nodes: np.ndarray
    alpha_nodes: np.ndarray
    m: PerturbationM = ZERO_M
    nu_diffs: tuple = ()
    alpha_shift: float = 0.0
    nu_scaled: np.ndarray = None
    nu_log_weight: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "_alpha_spline", make_interp_spline(self.s, self.alpha_nodes, k=5))
        object.__setattr__(self, "_zeta_spline", make_interp_spline(self.s, self.zeta_hat, k=5))
        object.__setattr__(self, "_w_spline", make_interp_spline(self.s, self.w_sol.w_hat, k=5))
        # nu ~ m/(2 kappa lambda2^2) varies over hundreds of decades; the
        # splines carry nu lambda2^2 tau and its log weight separately
        scaled = np.zeros_like(self.s) if self.nu_scaled is None else self.nu_scaled
        logw = np.zeros_like(self.s) if self.nu_log_weight is None else self.nu_log_weight
        object.__setattr__(self, "_nu_spline", make_interp_spline(self.s, scaled, k=5))
        object.__setattr__(self, "_nu_logw", make_interp_spline(self.s, logw, k=5))

    # -- helpers

    def _s(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.params.t_min * (1 - 1e-12)) or np.any(t > self.params.t0 * (1 + 1e-12)):
            raise DomainError(f"t outside the tabulated range [{self.params.t_min}, {self.params.t0}]")
        return np.clip(s_of_t(t), self.s[0], self.s[-1])

    @staticmethod
    def _out(x):
        return float(x) if np.ndim(x) == 0 else x

    def shifted(self, log_factor: float) -> "ModulationSolution":
        """The same solution with lambda1 multiplied by e^{log_factor}."""
        return replace(self, alpha_shift=self.alpha_shift + log_factor)

    # -- samplers
    @property
    def t_nodes(self):
        return t_of_s(self.s)

    def log_lambda2(self, t):
        s = self._s(t)
        return self._out(_log_lambda2_L(np.exp(s), self.params.beta))

    def w(self, t):
        s = self._s(t)
        L = np.exp(s)
        return self._out(self._w_spline(s) * t_of_s(s) / L ** (2 * self.params.beta))

    def zeta(self, t):
        s = self._s(t)
        return self._out(self._zeta_spline(s) * t_of_s(s) / np.exp(s) ** self.params.beta)

    def nu(self, t):
        s = self._s(t)
        return self._out(self._nu_spline(s) * np.exp(-self._nu_logw(s)))

    def alpha(self, t):
        return self._out(self._alpha_spline(self._s(t)) + self.alpha_shift)

    log_lambda1 = alpha

    def log_tau(self, t):
        s = self._s(t)
        return self._out(self._alpha_spline(s) + self.alpha_shift
                         - _log_lambda2_L(np.exp(s), self.params.beta))

    def log_tau_exp(self, t):
        """Diagnostic exponential time 2 kappa (beta+1)^{-1} |log t|^{beta+1}, in log."""
        L = -np.log(np.asarray(t, dtype=float))
        b = self.params.beta
        return self._out(2 * self.params.kappa * L ** (b + 1) / (b + 1))

    def tau2(self, t):
        """int_t^t0 lambda2 = (L^{b+1} - L0^{b+1})/(b+1)."""
        b = self.params.beta
        L = -np.log(np.asarray(t, dtype=float))
        L0 = -math.log(self.params.t0)
        return self._out((L ** (b + 1) - L0 ** (b + 1)) / (b + 1))

    def log_tau1(self, t: float) -> float:
        """log of int_t^t0 lambda1(t') dt', integrated in s relative to lambda1(t)."""
        s = float(self._s(t))
        if s <= self.s[0]:
            return -math.inf
        a_s = float(self._alpha_spline(s))

        def f(x):
            return math.exp(float(self._alpha_spline(x)) - a_s - math.exp(x) + x)

        val = integrate.quad(f, self.s[0], s, epsabs=0.0, epsrel=1e-11, limit=200)[0]
        return a_s + self.alpha_shift + math.log(val)

    def Z(self, t):
        """zeta + nu."""
        return self._out(np.asarray(self.zeta(t)) + np.asarray(self.nu(t)))

    def dalpha(self, t):
        """alpha' = lambda1'/lambda1 = 1/(zeta + nu)."""
        return self._out(1.0 / np.asarray(self.Z(t)))

    def lambda1_ddot_ratio(self, t):
        """lambda1''/lambda1 = (1 - Z')/Z^2 with Z' taken from its ODE."""
        t = np.asarray(t, dtype=float)
        Z = np.asarray(self.Z(t))
        lam2 = np.exp(np.asarray(self.log_lambda2(t)))
        K = self.params.c * (lam2 + self.m(t)) ** 2
        return self._out((2.0 - K * Z * Z) / (Z * Z))

    def alpha_derivatives_spline(self, t):
        """(alpha', alpha'') from the alpha spline alone (independent of the ODE)."""
        s = self._s(t)
        L = np.exp(s)
        tt = t_of_s(s)
        a1 = self._alpha_spline.derivative(1)(s)
        a2 = self._alpha_spline.derivative(2)(s)
        tl = tt * L
        return self._out(-a1 / tl), self._out((a2 + a1 * (L - 1.0)) / tl ** 2)

    def timescales(self, t: float) -> TimeScales:
        return TimeScales(float(t), float(self.log_lambda1(t)), float(self.log_lambda2(t)),
                          float(self.log_tau(t)), self.log_tau1(t), float(self.tau2(t)),
                          float(self.alpha(t)))

    def t_at_log_tau(self, log_tau: float) -> float:
        """The time at which log tau takes the given value (tau increases as t falls)."""
        lt = self._alpha_spline(self.s) - _log_lambda2_L(np.exp(self.s), self.params.beta) \
            + self.alpha_shift
        if not (lt.min() < log_tau < lt.max()):
            raise DomainError(f"log tau = {log_tau} is outside the tabulated range")
        from scipy.optimize import brentq
        i = int(np.searchsorted(lt, log_tau))
        g = lambda x: float(self._alpha_spline(x) + self.alpha_shift
                            - _log_lambda2_L(math.exp(x), self.params.beta)) - log_tau
        return float(t_of_s(brentq(g, self.s[max(i - 1, 0)], self.s[min(i, self.s.size - 1)],
                                   xtol=1e-15)))

    def zeta_ode_residual(self, t):
        """zeta' - (c lambda2^2 zeta^2 - 1), zeta' from the analytic ansatz plus the w spline."""
        s = self._s(t)
        L = np.exp(s)
        tt = t_of_s(s)
        b, k = self.params.beta, self.params.kappa
        w_hat = self._w_spline(s)
        w_hat_s = self._w_spline.derivative(1)(s)
        w_prime = (-w_hat_s / L + w_hat * (1.0 + 2 * b / L)) / L ** (2 * b)
        A_prime = (-(1 + b / L) / (2 * k * L ** b)
                   + ((1 + 2 * b / L) + (b / L) * (1 + (2 * b + 1) / L)) / (8 * k * k * L ** (2 * b)))
        zeta = zeta_ansatz(tt, self.params) + w_hat * tt / L ** (2 * b)
        lam2 = L ** b / tt
        return self._out(A_prime + w_prime - (self.params.c * (lam2 * zeta) ** 2 - 1.0))


def solve_modulation(params: ModulationParams, m: PerturbationM | None = None,
                     base: ModulationSolution | None = None,
                     strict_envelope: bool = True) -> ModulationSolution:
    """w, zeta, nu and alpha for the given perturbation m (default m = 0).

    base, when given, must be the m = 0 solution for the same params.
    """
    if base is None:
        wsol = solve_w(params)
        s = wsol.s
        L = np.exp(s)
        t = t_of_s(s)
        zeta = zeta_ansatz(t, params) + wsol.w
        if np.any(zeta >= 0.0):
            raise SingularityError("zeta must stay negative")
        zero = NuSolution(s, np.zeros_like(s), ())
        alpha, _ = alpha_and_lambda1(zero, params, zeta, s)
        base = ModulationSolution(params, s, wsol, zeta * L ** params.beta / t,
                                  np.zeros_like(s), alpha)
    if m is None or m is ZERO_M:
        return base
    nu = solve_nu(m, params, base, strict_envelope)
    s = base.s
    t = t_of_s(s)
    zeta = base.zeta_hat * t / np.exp(s) ** params.beta
    alpha, _ = alpha_and_lambda1(nu, params, zeta, s)
    return replace(base, nu_nodes=nu.nu, alpha_nodes=alpha, m=m, nu_diffs=nu.diffs,
                   nu_scaled=nu.nu_scaled, nu_log_weight=nu.log_weight)


def check_modulation_ode(solution: ModulationSolution, m: PerturbationM | None, t):
    """alpha'' - alpha'^2 + c (lambda2 + m)^2, with alpha from its spline.

    This is lambda1^2 times lambda1''/lambda1^3 - 2(lambda1'/lambda1^2)^2
    + c (lambda2 + m)^2/lambda1^2.
    """
    m = ZERO_M if m is None else m
    a1, a2 = solution.alpha_derivatives_spline(t)
    lam2 = np.exp(np.asarray(solution.log_lambda2(t)))
    out = np.asarray(a2) - np.asarray(a1) ** 2 + solution.params.c * (lam2 + m(t)) ** 2
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------ m fixed point

@dataclass(frozen=True)
class MFixedPoint:
    m: PerturbationM
    iterations: int
    defects: tuple            # sup_t |m_n - d - P(m_n)| per iterate
    t_grid: np.ndarray


def m_fixed_point(mk_functionals: Sequence[Callable], params: ModulationParams,
                  t_grid, solution: ModulationSolution | None = None,
                  tol: float = 1e-300, max_iter: int = 12) -> MFixedPoint:
    """Iterate m <- d + P(m), d = -(16 lambda2)^{-1} sum m_k, P(m) = -(2 lambda2)^{-1} m^2.

    The iterate count found on t_grid is reused pointwise by the sampler,
    so m(t) is exact (no interpolation) at every t.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if solution is None:
        solution = solve_modulation(params)

    def d_of(t):
        lam2 = np.exp(np.asarray(solution.log_lambda2(t)))
        tot = sum(np.asarray(f(t), dtype=float) for f in mk_functionals) if mk_functionals \
            else np.zeros_like(np.asarray(t, dtype=float))
        return -tot / (16.0 * lam2), lam2

    d, lam2 = d_of(t_grid)
    env = np.exp(-0.5 * np.asarray(solution.log_tau(t_grid)))
    m = np.zeros_like(t_grid)
    defects = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        m = d - m * m / (2.0 * lam2)
        if np.any(np.abs(m) > env):
            raise FixedPointError("m iterates left the tau^{-1/2} envelope")
        defect = float(np.max(np.abs(m - d + m * m / (2.0 * lam2))))
        defects.append(defect)
        if defect <= tol or (n_iter > 1 and defect >= defects[-2]):
            break
    n_final = n_iter

    def sampler(t):
        dd, l2 = d_of(t)
        mm = np.zeros_like(np.asarray(dd, dtype=float))
        for _ in range(n_final):
            mm = dd - mm * mm / (2.0 * l2)
        return mm

    return MFixedPoint(PerturbationM(sampler), n_final, tuple(defects), t_grid)
