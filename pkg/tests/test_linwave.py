import math

import numpy as np
import pytest

from wavemaplab import bubble, outer
from wavemaplab.errors import InputError, ResolutionError
from wavemaplab.linwave import (PotentialSpec, WaveField, discrete_energy, evolve,
                                evolve_nonlinear_track, fit_inner_scale, h1_norm,
                                staggered_grid, wave_map_energy)


def _mms_error(n):
    # u* = sin(t) r^2 e^{-r^2} with V = 4/r^2; F = -u*_tt + Delta u* - 4u*/r^2
    g = staggered_grid(6.0, n)
    r = g.nodes

    def F(t, rr):
        w = np.exp(-rr * rr)
        wr = -2 * rr * w
        wrr = (4 * rr * rr - 2) * w
        return rr * rr * (math.sin(t) * w + math.sin(t) * (wrr + 5 * wr / rr))

    f0 = WaveField(0.0, g, np.zeros(n), r * r * np.exp(-r * r))
    res = evolve(f0, PotentialSpec(), F, 1.0, cfl=0.4)
    exact = math.sin(1.0) * r * r * np.exp(-r * r)
    return math.sqrt(np.sum((res.field.u - exact) ** 2 * r) * (r[1] - r[0]))


def test_mms_second_order():
    errs = [_mms_error(n) for n in (200, 400, 800)]
    assert math.log2(errs[0] / errs[1]) >= 1.9
    assert math.log2(errs[1] / errs[2]) >= 1.9


@pytest.mark.parametrize("pot", [PotentialSpec(), PotentialSpec("inner-static", lam=3.0)])
def test_static_energy_drift(pot):
    g = staggered_grid(10.0, 500)
    r = g.nodes
    f0 = WaveField(0.0, g, r * r * np.exp(-(r - 3) ** 2), np.zeros(500))
    E = evolve(f0, pot, None, 5.0, cfl=0.5).energies
    assert np.max(np.abs(E - E[0])) / E[0] < 1e-6
    assert discrete_energy(f0, pot) == pytest.approx(E[0], rel=1e-3)


def test_time_reversal():
    g = staggered_grid(8.0, 400)
    r = g.nodes
    f0 = WaveField(0.0, g, r * r * np.exp(-(r - 2) ** 2), np.zeros(400))
    fwd = evolve(f0, PotentialSpec(), None, 1.0).field
    back = evolve(WaveField(1.0, g, fwd.u, -fwd.ut), PotentialSpec(), None, 2.0).field
    assert np.max(np.abs(back.u - f0.u)) < 1e-3 * np.max(np.abs(f0.u))


def test_evolve_guards():
    g = staggered_grid(1.0, 32)
    f0 = WaveField(0.0, g, np.zeros(32), np.zeros(32))
    with pytest.raises(InputError):
        evolve(f0, PotentialSpec(), None, 1.0, cfl=0.9)
    with pytest.raises(InputError):
        evolve(f0, PotentialSpec("nonlinear"), None, 1.0)
    with pytest.raises(InputError):
        PotentialSpec("outer")
    with pytest.raises(InputError):
        WaveField(0.0, g, np.zeros(10), np.zeros(32))


def test_outer_potential_excess_bounded():
    prof = outer.OuterProfile()
    pot = PotentialSpec("outer", prof)
    r = np.logspace(-6, -1, 50)
    ex = pot.excess(0.1, r)
    assert np.all(np.isfinite(ex)) and np.all(ex <= 0)


def test_h1_norm_of_zero_and_scaling():
    r = np.linspace(0.01, 1.0, 200)
    z = np.zeros_like(r)
    assert h1_norm(r, z, z, 3.0) == 0.0
    h = r * r * np.exp(-r)
    assert h1_norm(r, 2 * h, 2 * h, 1.0) == pytest.approx(2 * h1_norm(r, h, h, 1.0))


def test_wave_map_energy_of_bubble():
    # E(Q) = 4 for the k = 2 bubble: 1/2 int (Q_r^2 + 4 sin^2 Q / r^2) r dr = 2 int Phi^2/r dr
    r = np.logspace(-4, 4, 20001)
    q = bubble.Q(r)
    assert wave_map_energy(r, q, np.zeros_like(r)) == pytest.approx(4.0, rel=1e-6)


def test_fit_inner_scale_recovers_bubble_scale():
    r = np.linspace(1e-4, 1.0, 4000)
    lam = 37.0
    u = bubble.Q(lam * r)
    log_lam, res = fit_inner_scale(r, u, np.zeros_like(r), 40.0)
    assert math.exp(log_lam) == pytest.approx(lam, rel=1e-8)
    assert res < 1e-8
    with pytest.raises(ResolutionError):
        fit_inner_scale(r[:5], u[:5], np.zeros(5), 40.0)


def test_nonlinear_static_bubble_stays_put():
    lam = 20.0
    r = np.concatenate([[0.0], np.logspace(-3, 0.5, 500)])
    rep = evolve_nonlinear_track(lambda rr: (bubble.Q(lam * rr), np.zeros_like(rr)), 0.0, 0.2,
                                 r, 400, lambda t: math.log(lam), lambda t, rr: np.zeros_like(rr),
                                 n_out=4)
    assert rep.energy_drift < 1e-6
    assert rep.max_ratio_error < 1e-3
