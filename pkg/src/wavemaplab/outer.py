"""The outer profile Q2~(t, r) = Q(lambda2 r) + v10 + v11 with the prescribed
scale lambda2(t) = |log t|^beta / t.

Sign conventions: L below is the spectral-sign operator
-d_RR - (1/R) d_R + 4 cos(2Q)/R^2. With R = lambda2 r the error of the bare
bubble is e0 = -d_t^2 Q(R), and the corrections solve (t lambda2)^2 L v = t^2 e.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.interpolate import make_interp_spline

from . import bubble
from .errors import DomainError, InputError
from .numerics import central_diff, grid_per_decade, stencil_half_width

TRUNCATIONS = ("Q-only", "+v10", "+v10+v11")


@dataclass(frozen=True)
class OuterParams:
    beta: float = 2.0
    t0: float = 0.3

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 1.5):
            raise InputError(f"beta must exceed 3/2, got {self.beta}")
        if not (0.0 < self.t0 < 1.0):
            raise InputError(f"t0 must lie in (0, 1), got {self.t0}")


def _check_t(t, params: OuterParams):
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0.0)) or np.any(t_arr > params.t0 * (1 + 1e-12)):
        raise DomainError(f"t must lie in (0, t0={params.t0}]")
    return t_arr


def log_abs_log(t):
    """log|log t|, the internal time coordinate."""
    return np.log(-np.log(np.asarray(t, dtype=float)))


def log_lambda2(t, params: OuterParams):
    """log lambda2 = beta log|log t| - log t."""
    t = _check_t(t, params)
    out = params.beta * np.log(-np.log(t)) - np.log(t)
    return float(out) if out.ndim == 0 else out


def lambda2(t, params: OuterParams):
    return np.exp(log_lambda2(t, params))


def t_lambda2(t, params: OuterParams):
    """t lambda2 = |log t|^beta."""
    t = _check_t(t, params)
    out = (-np.log(t)) ** params.beta
    return float(out) if out.ndim == 0 else out


def bubble_fraction(R):
    """R^4/(1+R^4), the profile of v10."""
    R = np.asarray(R, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / (1.0 + R ** -4.0)


def v10(t, r, params: OuterParams):
    """(t lambda2)^{-2} R^4/(1+R^4) with R = lambda2 r."""
    R = lambda2(t, params) * np.asarray(r, dtype=float)
    out = bubble_fraction(R) / t_lambda2(t, params) ** 2
    return float(out) if np.ndim(out) == 0 else out


def S_v10(t, r, params: OuterParams):
    """Closed form of (t d_t + r d_r) v10.

    S(t lambda2) = -beta |log t|^{beta-1} and S R = -beta R/|log t|, so
    S v10 = (t lambda2)^{-2} (beta/|log t|) (2f - R f') with f = R^4/(1+R^4).
    """
    L = -math.log(t)
    R = lambda2(t, params) * np.asarray(r, dtype=float)
    f = bubble_fraction(R)
    Rf = 4.0 * f * (1.0 - f)
    out = (params.beta / L) * (2.0 * f - Rf) / t_lambda2(t, params) ** 2
    return float(out) if np.ndim(out) == 0 else out


def e0_coefficients(t, params: OuterParams):
    """(a, b) with t^2 e0~ = a R Phi' + b Phi."""
    t = float(_check_t(t, params))
    L = -math.log(t)
    eps = params.beta / L
    a = 1.0 - (1.0 + eps) ** 2
    b = -(eps - params.beta / L ** 2)
    return a, b


def e0_tilde(t, R, params: OuterParams):
    """t^2 e0 + R Phi' + Phi: the source left after v10 removes the leading part."""
    a, b = e0_coefficients(t, params)
    out = a * bubble.R_dPhi(R) + b * bubble.Phi(R)
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------- v11

@dataclass(frozen=True)
class _GreenTable:
    """Solutions G of L G = R Phi' and L G = Phi, vanishing like R^4 at 0."""

    x: np.ndarray
    values: tuple
    splines: tuple = field(repr=False)
    far: tuple = field(repr=False)     # (A, C) with G ~ A R^2 + C at large R

    def eval(self, which: int, R):
        R = np.asarray(R, dtype=float)
        out = np.zeros_like(R)
        pos = R > 0.0
        x = np.log(R[pos])
        lo, hi = self.x[0], self.x[-1]
        vals = np.empty_like(x)
        mid = (x >= lo) & (x <= hi)
        vals[mid] = self.splines[which](x[mid])
        small = x < lo
        vals[small] = self.values[which][0] * np.exp(4.0 * (x[small] - lo))
        big = x > hi
        A, C = self.far[which]
        vals[big] = A * np.exp(2.0 * x[big]) + C
        out[pos] = vals
        return out


@lru_cache(maxsize=4)
def green_table(per_decade: int = 96, R_min: float = 1e-4, R_max: float = 1e5) -> _GreenTable:
    """Tabulate the two t-independent pieces of v11 once.

    L G = g in the spectral sign is L_ell G = -g, solved by the Green
    formula with the pair (Phi/4, Theta).
    """
    grid = grid_per_decade(R_min, R_max, per_decade)
    R = grid.nodes
    vals, spl, far = [], [], []
    for g in (bubble.R_dPhi(R), bubble.Phi(R)):
        sol = bubble.green_solve(grid, -g)
        h = sol.h
        vals.append(h)
        spl.append(make_interp_spline(np.log(R), h, k=5))
        # match A R^2 + C on the last two nodes
        r1, r2 = R[-2], R[-1]
        A = (h[-1] - h[-2]) / (r2 ** 2 - r1 ** 2)
        far.append((A, h[-1] - A * r2 ** 2))
    return _GreenTable(np.log(R), tuple(vals), tuple(spl), tuple(far))


def v11_scaled(t, R, params: OuterParams):
    """(t lambda2)^2 v11 as a function of R."""
    a, b = e0_coefficients(t, params)
    tab = green_table()
    out = a * tab.eval(0, R) + b * tab.eval(1, R)
    return float(out) if np.ndim(out) == 0 else out


def v11(t, R, params: OuterParams):
    """Second outer correction at R = lambda2 r."""
    out = v11_scaled(t, R, params) / t_lambda2(t, params) ** 2
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------- profile

@dataclass(frozen=True)
class OuterProfile:
    params: OuterParams = OuterParams()
    truncation: str = "+v10+v11"

    def __post_init__(self):
        if self.truncation not in TRUNCATIONS:
            raise InputError(f"unknown truncation {self.truncation!r}")

    @property
    def level(self) -> int:
        return TRUNCATIONS.index(self.truncation)

    def correction(self, t, r):
        """v = Q2~ - Q(lambda2 r) for the selected truncation."""
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        if self.level >= 1:
            out = out + v10(t, r, self.params)
        if self.level >= 2:
            out = out + v11(t, lambda2(t, self.params) * r, self.params)
        return out

    def __call__(self, t, r):
        return eval_Q2tilde(t, r, self)

    def time_derivatives(self, t, r, rel_step: float = 1e-3):
        """(Q2~, d_t Q2~, d_t^2 Q2~) at fixed r by fourth-order differences in t."""
        r = np.asarray(r, dtype=float)
        _check_t(t, self.params)
        h = rel_step * t
        # the stencil may step slightly past t0
        loose = replace(self, params=OuterParams(
            self.params.beta, min(0.5 * (1.0 + self.params.t0), t + 3 * h)))
        vals = [eval_Q2tilde(t + k * h, r, loose) for k in (-2, -1, 0, 1, 2)]
        d1 = (vals[0] - 8 * vals[1] + 8 * vals[3] - vals[4]) / (12 * h)
        d2 = (-vals[0] + 16 * vals[1] - 30 * vals[2] + 16 * vals[3] - vals[4]) / (12 * h * h)
        return vals[2], d1, d2


def eval_Q2tilde(t, r, profile: OuterProfile):
    """Q(lambda2 r) plus the corrections selected by the truncation."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise DomainError("r must be non-negative")
    R = lambda2(t, profile.params) * r_arr
    out = bubble.Q(R) + profile.correction(t, r_arr)
    return float(out) if np.ndim(out) == 0 else out


def pde_residual(profile: OuterProfile, t: float, r_grid, order: int = 8):
    """-u_tt + u_rr + u_r/r - 2 sin(2u)/r^2 for u = Q2~ on a log-uniform r-grid.

    Returns (r, residual) on the interior nodes where the x = log r stencil fits.
    """
    r = np.asarray(r_grid, dtype=float)
    x = np.log(r)
    h = float(x[1] - x[0])
    if not np.allclose(np.diff(x), h, rtol=1e-9, atol=0.0):
        raise InputError("pde_residual needs a log-uniform grid")
    u, _, utt = profile.time_derivatives(t, r)
    half = stencil_half_width(2, order)
    uxx = central_diff(u, h, 2, order)
    s = slice(half, r.size - half)
    rs = r[s]
    return rs, -utt[s] + (uxx - 2.0 * np.sin(2.0 * u[s])) / rs ** 2
