import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavemaplab.errors import InputError, QuadratureError, ResolutionError
from wavemaplab.numerics import (RadialFn, RadialGrid, apply_scaling_field, central_diff,
                                 cumulative_log, fornberg_weights, grid_per_decade,
                                 integrate_halfline, integrate_interval, log_derivatives,
                                 make_grid)


@given(st.floats(1e-6, 1.0), st.floats(2.0, 1e4), st.integers(16, 400),
       st.sampled_from(["log-uniform", "uniform", "graded"]))
@settings(max_examples=60, deadline=None)
def test_make_grid_has_exact_endpoints_and_increases(r_min, factor, n, kind):
    g = make_grid(r_min, r_min * factor, n, kind)
    assert g.n == n
    assert g.nodes[0] == r_min and g.nodes[-1] == r_min * factor
    assert np.all(np.diff(g.nodes) > 0)


def test_grid_rejects_bad_input():
    with pytest.raises(InputError):
        make_grid(1.0, 0.5, 32)
    with pytest.raises(InputError):
        make_grid(1e-3, 1.0, 8)
    with pytest.raises(InputError):
        RadialGrid(np.linspace(-1, 1, 32))
    with pytest.raises(InputError):
        make_grid(1.0, 2.0, 32, "uniform").log_step


def test_grid_per_decade_density():
    g = grid_per_decade(1e-2, 1e2, 64)
    assert g.n == 257
    assert g.nodes_per_decade == pytest.approx(64.0)


def test_fornberg_classic_weights():
    np.testing.assert_allclose(fornberg_weights(np.array([-1, 0, 1]), 2), [1, -2, 1])
    np.testing.assert_allclose(fornberg_weights(np.array([-2, -1, 0, 1, 2]), 1),
                               [1 / 12, -2 / 3, 0, 2 / 3, -1 / 12], atol=1e-15)


@pytest.mark.parametrize("order", [2, 4, 6, 8])
def test_central_diff_exact_on_polynomials(order):
    h = 0.1
    x = np.arange(40) * h
    f = x ** order
    d2 = central_diff(f, h, 2, order)
    half = order // 2
    np.testing.assert_allclose(d2, order * (order - 1) * x[half:-half] ** (order - 2),
                               rtol=1e-8, atol=1e-8)


def test_central_diff_order_on_smooth_function():
    errs = []
    for n in (50, 100):
        x = np.linspace(0, 1, n)
        h = x[1] - x[0]
        d = central_diff(np.sin(x), h, 1, 4)
        errs.append(np.max(np.abs(d - np.cos(x[2:-2]))))
    assert math.log2(errs[0] / errs[1]) > 3.8


def test_central_diff_too_few_nodes():
    with pytest.raises(ResolutionError):
        central_diff(np.ones(5), 0.1, 2, 8)


def test_halfline_quadrature_against_closed_forms():
    assert integrate_halfline(lambda R: math.exp(-R)) == pytest.approx(1.0, rel=1e-12)
    val = integrate_halfline(lambda R: 1.0 / (1.0 + R * R), 1e-12)
    assert val == pytest.approx(math.pi / 2, rel=1e-12)


def test_halfline_quadrature_rejects_unreachable_tolerance():
    with pytest.raises(QuadratureError) as info:
        integrate_halfline(lambda R: math.exp(-R), 1e-20)
    assert info.value.exit_code == 4
    with pytest.raises(InputError):
        integrate_halfline(lambda R: math.exp(-R), 1e-2)


def test_integrate_interval():
    assert integrate_interval(math.sin, 0.0, math.pi) == pytest.approx(2.0, rel=1e-12)


def test_cumulative_log_matches_antiderivative():
    g = grid_per_decade(1e-3, 10.0, 100)
    R = g.nodes
    cum = cumulative_log(np.exp(-R), g)
    np.testing.assert_allclose(cum, np.exp(-R[0]) - np.exp(-R), rtol=1e-8, atol=1e-12)


def test_log_derivatives_of_power():
    g = grid_per_decade(1e-2, 1e2, 64)
    fn = RadialFn(g, g.nodes ** 3, 3)
    half, fx, fxx = log_derivatives(fn)
    R = g.nodes[half:-half]
    np.testing.assert_allclose(fx, 3 * R ** 3, rtol=1e-9)
    np.testing.assert_allclose(fxx, 9 * R ** 3, rtol=1e-9)


def test_log_derivatives_coarse_grid_is_resolution_error():
    g = make_grid(1e-2, 1e2, 18)
    with pytest.raises(ResolutionError):
        log_derivatives(RadialFn(g, g.nodes), min_per_decade=5.0)


@given(st.floats(0.01, 0.5), st.floats(0.01, 5.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
@settings(max_examples=40, deadline=None)
def test_scaling_field_on_homogeneous_functions(t, r, a, b):
    # S (t^a r^b) = (a + b) t^a r^b
    val = apply_scaling_field(lambda tt, rr: tt ** a * rr ** b, t, r, 1e-4)
    assert val == pytest.approx((a + b) * t ** a * r ** b, rel=1e-6, abs=1e-12)


def test_radialfn_series_consistency():
    g = grid_per_decade(1e-4, 1.0, 32)
    assert RadialFn(g, g.nodes ** 2, 2).series_consistent()
    flip = g.nodes ** 2 * np.where(np.arange(g.n) % 2, -1.0, 1.0)
    assert not RadialFn(g, flip, 2).series_consistent()
