import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavemaplab import bubble
from wavemaplab.errors import InputError, OrthogonalityError
from wavemaplab.numerics import grid_per_decade, integrate_halfline

GRID = grid_per_decade(1e-2, 1e2, 64)


def test_profile_values_at_one():
    assert bubble.Q(1.0) == pytest.approx(math.pi / 2)
    assert bubble.Phi(1.0) == pytest.approx(2.0)
    assert bubble.Theta(1.0) == pytest.approx(0.0, abs=1e-15)


@given(st.floats(1e-2, 1e2))
@settings(max_examples=80, deadline=None)
def test_Phi_is_R_dQ(R):
    h = 1e-6 * R
    dQ = (bubble.Q(R + h) - bubble.Q(R - h)) / (2 * h)
    assert bubble.Phi(R) == pytest.approx(R * dQ, rel=1e-6)


@given(st.floats(1e-3, 1e3))
@settings(max_examples=80, deadline=None)
def test_trig_identities(R):
    q = bubble.Q(R)
    assert bubble.sin2Q(R) == pytest.approx(math.sin(2 * q), abs=1e-12)
    assert bubble.cos2Q(R) == pytest.approx(math.cos(2 * q), abs=1e-12)
    assert bubble.one_minus_cos2Q(R) == pytest.approx(1 - math.cos(2 * q), abs=1e-12)


def test_identity_oracles_by_substitution():
    # with u = R^2: I1 = 8 int u^2/(1+u^2)^2 du = 2 pi and I2 = 32 (closed form)
    rep = bubble.compute_identities()
    assert rep.I1 == pytest.approx(2 * math.pi, rel=1e-10)
    assert rep.I2 == pytest.approx(32.0, rel=1e-10)
    assert rep.c_star == pytest.approx(16 / math.pi, rel=1e-10)
    d = rep.as_dict()
    assert d["stated_I1"] == pytest.approx(3 * math.pi)
    assert d["stated_I2"] == pytest.approx(12 * math.pi)
    assert d["I1_deviation"] == pytest.approx(-math.pi, rel=1e-9)


def test_identity_second_route_in_u_variable():
    i1 = integrate_halfline(lambda u: 8 * u * u / (1 + u * u) ** 2, 1e-12)
    assert i1 == pytest.approx(bubble.identities().I1, rel=1e-11)


def test_identity_tolerance_guard():
    with pytest.raises(InputError):
        bubble.compute_identities(1e-6)


def test_modulation_constant_sources():
    assert bubble.modulation_constant("paper") == 4.0
    assert bubble.modulation_constant("computed") == pytest.approx(16 / math.pi)
    with pytest.raises(InputError):
        bubble.modulation_constant("other")


@pytest.mark.parametrize("op,kind", [(bubble.L_SPECTRAL, "Phi"), (bubble.L_SPECTRAL, "Theta"),
                                     (bubble.LT_SPECTRAL, "phi0"),
                                     (bubble.LT_SPECTRAL, "theta0")])
def test_kernel_residuals_and_refinement(op, kind):
    res = []
    for pd in (32, 64):
        g = grid_per_decade(1e-2, 1e2, pd)
        res.append(float(np.max(bubble.relative_residual(op, bubble.profile_fn(kind, g))[1])))
    assert res[1] < 1e-6
    assert math.log2(res[0] / res[1]) >= 1.9


def test_wronskian_two_routes():
    R = np.logspace(-2, 2, 41)
    np.testing.assert_allclose(bubble.wronskian(R), -1.0, atol=1e-12)
    np.testing.assert_allclose(bubble.wronskian(R, "fd"), -1.0, atol=1e-6)


def test_conjugation_defect_small():
    assert bubble.conjugation_defect(GRID) < 1e-9


def test_green_solve_recovers_manufactured_solution():
    # h = R^2 e^{-R}: apply L, solve back; orthogonal part handled inside
    g = grid_per_decade(1e-4, 1e3, 96)
    R = g.nodes
    from wavemaplab.numerics import RadialFn
    h_true = R ** 2 * np.exp(-R)
    f_fn = bubble.apply_operator(bubble.L_ELLIPTIC, RadialFn(g, h_true, 2))
    sub = f_fn.grid
    sol = bubble.green_solve(sub, f_fn.values)
    Rs = sub.nodes
    # solution differs from h_true by a multiple of Phi (the kernel element)
    diff = sol.h - h_true[(R >= Rs[0]) & (R <= Rs[-1])]
    mid = (Rs > 0.05) & (Rs < 20)
    coef = diff[mid] / bubble.Phi(Rs[mid])
    assert np.ptp(coef) < 1e-5


def test_green_solve_strict_orthogonality():
    g = grid_per_decade(1e-4, 1e3, 64)
    R = g.nodes
    f = bubble.Phi(R) * np.exp(-R)
    with pytest.raises(OrthogonalityError):
        bubble.green_solve(g, f, f_orth=f, strict=True)
