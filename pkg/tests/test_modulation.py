import math

import numpy as np
import pytest

from wavemaplab import outer
from wavemaplab.errors import FixedPointError, InputError
from wavemaplab.modulation import (ZERO_M, ModulationParams, PerturbationM,
                                   check_modulation_ode, m_fixed_point, solve_modulation,
                                   solve_w, tau_power_m)


def test_params_validation():
    with pytest.raises(InputError):
        ModulationParams(c_source="x")
    with pytest.raises(InputError):
        ModulationParams(beta=1.2)
    with pytest.raises(InputError):
        ModulationParams(per_unit=4)


def test_w_frozen_values(mod_stated, mod_computed):
    # frozen from the oracle run at 256 nodes per unit of log|log t|
    assert mod_stated.w_sol.bound_constant(1e-4) == pytest.approx(0.11804836643319763, rel=1e-7)
    assert mod_computed.w_sol.bound_constant(1e-4) == pytest.approx(0.08599525861020381, rel=1e-7)
    t = 0.1
    L = -math.log(t)
    assert float(mod_stated.w(t)) * L ** 4 / t == pytest.approx(-0.019967755834169147, rel=1e-7)
    assert float(mod_computed.w(t)) * L ** 4 / t == pytest.approx(-0.014049006631617032,
                                                                  rel=1e-7)


def test_w_bound_grid_stable(mod_computed):
    fine = solve_modulation(ModulationParams(per_unit=512))
    b1 = mod_computed.w_sol.bound_constant(1e-4)
    assert abs(fine.w_sol.bound_constant(1e-4) / b1 - 1) < 0.10


def test_w_vanishes_without_source():
    sol = solve_w(ModulationParams(), source_factor=0.0)
    assert np.max(np.abs(sol.w_hat)) == 0.0


def test_zeta_ode_residual(mod_computed, mod_stated):
    t = np.exp(np.linspace(math.log(1e-4), math.log(0.3), 200))
    assert np.max(np.abs(mod_computed.zeta_ode_residual(t))) < 1e-8
    assert np.max(np.abs(mod_stated.zeta_ode_residual(t))) < 1e-8


def test_picard_contracts(mod_computed):
    d = mod_computed.w_sol.diffs
    assert d[-1] < 1e-13
    assert all(b < a for a, b in zip(d[1:4], d[2:5]))


def test_nu_identically_zero_for_zero_m(mod_computed):
    t = np.logspace(-30, math.log10(0.3), 100)
    assert np.all(mod_computed.nu(t) == 0.0)


def test_alpha_asymptotics(mod_computed):
    ratio = float(mod_computed.alpha(1e-6) / mod_computed.log_tau_exp(1e-6))
    assert 0.9 <= ratio <= 1.1
    assert ratio == pytest.approx(1.0037335368646498, rel=1e-7)


def test_log_lambda2_matches_outer(mod_computed):
    t = np.array([1e-6, 1e-3, 0.1])
    np.testing.assert_allclose(mod_computed.log_lambda2(t),
                               outer.log_lambda2(t, outer.OuterParams()), rtol=1e-12)


def test_lambda1_ode_from_spline(mod_computed):
    t = np.exp(np.linspace(math.log(1e-4), math.log(0.2), 50))
    res = check_modulation_ode(mod_computed, None, t)
    lam2 = np.exp(mod_computed.log_lambda2(t))
    assert np.max(np.abs(res) / (mod_computed.params.c * lam2 ** 2)) < 1e-6


def test_tau_grows_as_t_decreases(mod_computed):
    t = np.logspace(-10, -1, 30)
    assert np.all(np.diff(mod_computed.log_tau(t)) < 0)
    assert float(mod_computed.log_tau(1e-3)) == pytest.approx(240.43834557837226, rel=1e-8)


def test_t_at_log_tau_inverts(mod_computed):
    for tau in (10.0, 1e3, 1e7):
        t = mod_computed.t_at_log_tau(math.log(tau))
        assert float(mod_computed.log_tau(t)) == pytest.approx(math.log(tau), rel=1e-9)


def test_small_perturbation_changes_nu(mod_computed):
    m = tau_power_m(mod_computed, -1.0, 1e-3)
    sol = solve_modulation(mod_computed.params, m, mod_computed)
    t = np.logspace(-6, -2, 20)
    assert np.any(sol.nu(t) != 0.0)
    res = check_modulation_ode(sol, m, t)
    lam2 = np.exp(sol.log_lambda2(t))
    assert np.max(np.abs(res) / (sol.params.c * lam2 ** 2)) < 1e-5


def test_m_fixed_point_matches_closed_form(mod_computed):
    t = np.linspace(0.05, 0.12, 30)
    lam2 = np.exp(mod_computed.log_lambda2(t))
    mk = [lambda tt: 1e-3 * np.exp(mod_computed.log_lambda2(tt))
          * np.exp(-mod_computed.log_tau(tt))]
    fp = m_fixed_point(mk, mod_computed.params, t, mod_computed)
    d = -mk[0](t) / (16 * lam2)
    exact = 2 * d / (1 + np.sqrt(1 + 2 * d / lam2))
    np.testing.assert_allclose(fp.m(t), exact, rtol=1e-12)


def test_m_fixed_point_envelope_violation(mod_computed):
    t = np.logspace(-3, -1, 10)
    with pytest.raises(FixedPointError):
        m_fixed_point([lambda tt: 1e3 * np.exp(mod_computed.log_lambda2(tt))],
                      mod_computed.params, t, mod_computed)


def test_zero_m_is_zero():
    assert np.all(ZERO_M(np.array([1e-3, 0.1])) == 0.0)
    assert isinstance(ZERO_M, PerturbationM)
