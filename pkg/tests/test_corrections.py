import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavemaplab import bubble, corrections
from wavemaplab.errors import InputError, ResolutionError
from wavemaplab.modulation import ZERO_M

from conftest import t_at_tau


@given(st.floats(-10.0, 10.0))
@settings(max_examples=60, deadline=None)
def test_smooth_step_is_monotone_cutoff(x):
    v = corrections.smooth_step(x, 1.25, 2.0)
    assert 0.0 <= v <= 1.0
    if x <= 1.25:
        assert v == 1.0
    if x >= 2.0:
        assert v == 0.0
    assert corrections.smooth_step(x + 0.01, 1.25, 2.0) <= v


def test_stack_config_guards():
    with pytest.raises(InputError):
        corrections.StackConfig(0.2, 0.1)
    with pytest.raises(InputError):
        corrections.StackConfig(0.1, 0.2, levels=4)
    with pytest.raises(ResolutionError):
        corrections.StackConfig(0.1, 0.2, dr_lambda2=0.5)


def test_orthogonality_computed_vs_stated_constants(setup_computed, setup_stated):
    for tau in (10.0, 100.0, 1e4):
        val, scale = corrections.orthogonality_defect(
            setup_computed, t_at_tau(setup_computed.modulation, tau))
        assert abs(val) < 1e-8 * scale
    val, scale = corrections.orthogonality_defect(setup_stated,
                                                  t_at_tau(setup_stated.modulation, 100.0))
    assert abs(val) > 1e-3 * scale


def test_h0_one_time_residuals(setup_computed):
    t = t_at_tau(setup_computed.modulation, 50.0)
    empty, with_h0, sup_h0 = corrections.h0_residuals(setup_computed, t)
    # frozen from the oracle run at tau = 50
    assert empty == pytest.approx(0.3942388802796808, rel=1e-6)
    assert with_h0 == pytest.approx(5.003568154364354, rel=1e-3)
    assert sup_h0 == pytest.approx(0.47555131269202966, rel=1e-3)
    # second route on a shorter grid: only the cone region enters the norm
    assert corrections.empty_residual(setup_computed, t)[0] == pytest.approx(empty, rel=1e-5)


def test_assembled_residual_matches_brute_force(setup_computed):
    # E2 assembled from the modulation identities against direct differencing of u
    t = t_at_tau(setup_computed.modulation, 20.0)
    la1 = float(setup_computed.modulation.log_lambda1(t))
    grid = setup_computed.inner_grid(math.exp(la1) * t)
    direct = corrections.direct_residual(setup_computed, t, grid)
    bg = corrections.background(setup_computed, t, grid.nodes)
    s = slice(corrections._HALF, grid.n - corrections._HALF)
    assembled = -corrections.source_terms(bg).E2[s] * bg.lam2 ** 2
    m = (grid.nodes[s] > 0.05) & (grid.nodes[s] < 20)
    rel = np.max(np.abs(direct[m] - assembled[m])) / np.max(np.abs(assembled[m]))
    assert rel < 1e-4


@pytest.fixture(scope="module")
def small_stack(setup_computed):
    mod = setup_computed.modulation
    times = sorted(t_at_tau(mod, x) for x in (30.0, 100.0, 300.0))
    cfg = corrections.StackConfig(t_at_tau(mod, 1e6), max(times) + 0.01, levels=1)
    return corrections.build_stack(setup_computed, cfg, times, keep_fields=True)


def test_stack_samples_ordered_and_finite(small_stack):
    s = small_stack.samples
    assert len(s) == 3
    for smp in s:
        assert all(math.isfinite(v) for v in smp.residual_h)
        assert smp.orth_defect < 1e-8
        assert smp.m == 0.0


def test_stack_h0_agrees_with_one_time_solve(small_stack, setup_computed):
    grid = small_stack.fields.grid
    dt = small_stack.times[1] - small_stack.times[0]
    for smp in small_stack.samples:
        n = int(round((smp.t - small_stack.config.t_min) / dt))
        direct = corrections.solve_h0(setup_computed, smp.t, grid).h
        np.testing.assert_array_equal(small_stack.fields.h0[n], direct)
        # different node placement: the sup sits at the steep cone edge
        _, _, sup = corrections.h0_residuals(setup_computed, smp.t)
        assert smp.sup_h0 == pytest.approx(sup, rel=0.05)


def test_h1_reduces_residual(small_stack):
    for smp in small_stack.samples:
        assert smp.residual_h[1] <= 0.3 * smp.residual_h[0]


def test_uN_data_has_bubble_core(small_stack):
    t = small_stack.samples[1].t
    mod = small_stack.setup.modulation
    lam1 = math.exp(float(mod.log_lambda1(t)))
    r = np.array([1e-3, 0.5, 1.0, 2.0]) / lam1
    tn, u, ut = corrections.uN_data(small_stack, t, r, depth=0)
    q = bubble.Q(lam1 * r) - small_stack.setup.profile(tn, r)
    np.testing.assert_allclose(u, q, rtol=1e-2, atol=1e-3)
    assert np.all(np.isfinite(ut))


def test_couple_requires_zero_m(setup_computed):
    from dataclasses import replace
    from wavemaplab.modulation import tau_power_m
    mod = setup_computed.modulation
    bad = replace(setup_computed, m=tau_power_m(mod, -1.0, 1e-3))
    cfg = corrections.StackConfig(t_at_tau(mod, 1e6), 0.12)
    with pytest.raises(InputError):
        corrections.couple_stack(bad, cfg)
    assert setup_computed.m is ZERO_M


def test_m1_decay_slope(setup_computed):
    # the part of the decay ladder met at desk scale: |m1| falls faster than tau^{-0.9}
    mod = setup_computed.modulation
    times = sorted(t_at_tau(mod, x) for x in np.logspace(1, 4, 7))
    cfg = corrections.StackConfig(t_at_tau(mod, 1e7), max(times) + 0.01, levels=1)
    stack = corrections.build_stack(setup_computed, cfg, times)
    m1 = [s.m_hat[0] * s.lam2 ** 2 for s in stack.samples]
    slope = np.polyfit(stack.column("log_tau"), np.log(np.abs(m1)), 1)[0]
    assert slope <= -0.9
