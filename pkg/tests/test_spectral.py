import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavemaplab import spectral
from wavemaplab.errors import DomainError, InputError


@pytest.fixture(scope="module")
def series():
    return spectral.recurse_fj(8)


def test_f0_and_phi0(series):
    R = series.grid.nodes
    np.testing.assert_allclose(series.f[0].values, R ** 4 / (1 + R ** 4), rtol=1e-12)
    # phi0 is annihilated by L~
    lhs = spectral.apply_Ltilde(series.grid, series.phi(0))
    m = (R > 0.1) & (R < 10)
    assert np.max(np.abs(lhs[m])) < 1e-8 * np.max(np.abs(series.phi(0)[m]))


@pytest.mark.parametrize("j", [1, 2, 3, 4])
def test_recursion_satisfied(series, j):
    assert spectral.recursion_residual(series, j) < 1e-5


def test_explicit_kernel_is_four_times_green():
    g = spectral.recurse_fj(3, normalization="green")
    e = spectral.recurse_fj(3, normalization="explicit")
    for j in range(4):
        np.testing.assert_allclose(e.f[j].values, 4.0 ** j * g.f[j].values, rtol=1e-12)
    assert spectral.recursion_residual(e, 2) < 1e-5


def test_unknown_normalization():
    with pytest.raises(InputError):
        spectral.recurse_fj(2, normalization="other")


def test_small_R_behaviour(series):
    assert spectral.small_R_slope(series, 1) == pytest.approx(6.0, abs=0.02)
    assert spectral.small_R_slope(series, 2) == pytest.approx(8.0, abs=0.05)


def test_factorial_bounds(series):
    tab = spectral.check_fj_bounds(series, 6)
    # frozen from the oracle run on the default grid
    assert tab.C == pytest.approx(0.0726035807436039, rel=1e-6)
    assert tab.flatness < 3.0
    # |f_j(1)| decays geometrically once scaled by C^j, from j = 1 on
    scaled = [tab.at_one[j] / tab.C ** j for j in range(1, 6)]
    assert all(b < a for a, b in zip(scaled, scaled[1:]))


def test_linearity_in_seed():
    a = spectral.recurse_fj(3)
    b = spectral.recurse_fj(3, seed=2.0 * a.f[0].values)
    for j in range(4):
        np.testing.assert_array_equal(b.f[j].values, 2.0 * a.f[j].values)


@given(st.floats(-2.0, 2.0))
@settings(max_examples=10, deadline=None)
def test_partial_sum_solves_shifted_equation(z):
    s = spectral.recurse_fj(8)
    psi = s.partial_sum(z)
    R = s.grid.nodes
    m = (R > 0.1) & (R < 3)
    res = spectral.apply_Ltilde(s.grid, psi, z)
    # the truncation leaves z^{J+1} phi_J behind
    tail = abs(z) ** 9 * np.abs(s.phi(8)[m])
    assert np.max(np.abs(res[m]) - tail) < 1e-6 * np.max(np.abs(psi[m]))


def test_frobenius_start_satisfies_ode():
    xi, R0 = 2.0, 1e-2
    psi, dpsi = spectral.frobenius_start(xi, R0)
    h = 1e-5
    p1 = spectral.frobenius_start(xi, R0 + h)[0]
    p0 = spectral.frobenius_start(xi, R0 - h)[0]
    d2 = (p1 - 2 * psi + p0) / h ** 2
    assert d2 == pytest.approx((spectral.potential(R0) - xi) * psi, rel=1e-4)


def test_rho_frozen_and_stable():
    est = spectral.estimate_rho(1.0)
    assert est.rho == pytest.approx(2.480168375975383, rel=1e-7)
    assert est.flatness < 0.05
    again = spectral.estimate_rho(1.0, R_match=120.0)
    assert again.rho == pytest.approx(est.rho, rel=1e-4)
    a, rho = est
    assert rho == pytest.approx(1.0 / (math.pi * a))


def test_rho_needs_oscillatory_region():
    with pytest.raises(DomainError):
        spectral.estimate_rho(1.0, R_match=10.0)


def test_scan_plateau_and_growth():
    sc = spectral.scan(spectral.default_xi_grid(), jobs=2)
    assert sc.spread(0.01, 0.5) <= 4.0
    assert sc.spread(10.0, 100.0, 2.0) <= 4.0
    assert max(sc.flatness) < 0.05
    serial = spectral.scan(spectral.default_xi_grid()[:3])
    np.testing.assert_array_equal(serial.rho, sc.rho[:3])
