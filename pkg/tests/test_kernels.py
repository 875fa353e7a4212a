import numpy as np
import pytest

from mfg_tracking.exceptions import DomainError, GridMismatchError
from mfg_tracking.solver.kernels import (
    KernelWeights,
    build_kernel_table,
    deriv_v_r,
    deriv_v_rr,
    dual_quadrature,
    kernel_G,
    kernel_H,
    phi_time_integrals,
    value_v,
    varphi_bar,
)
from mfg_tracking.solver.mfe import closed_form_drift
from mfg_tracking.solver.util import Curve, nodes_from
from mfg_tracking.stochastic import TimeGrid


@pytest.fixture(scope="module")
def drift(params, constants, mc):
    return closed_form_drift(params, constants, 20.0, mc.curve_grid(params.horizon))


def test_kernels_weights(params, constants):
    w = KernelWeights.from_params(params, constants)
    assert w.g == pytest.approx(0.2)
    assert w.exponent == pytest.approx(0.9)
    assert w.h_quadrature == pytest.approx(0.08)
    assert w.h_varphi == pytest.approx(0.008)
    assert w.h_index == pytest.approx(0.08)


def test_kernels_exact_cases(params, constants, mc):
    assert kernel_G(params, constants, 1.0, 0.5, 0.5, mc).value == 0
    zero = params.replace(lambda_=0.0)
    assert kernel_G(zero, constants, 1.0, 0.8, 0.2, mc).value == 0
    with pytest.raises(DomainError):
        kernel_G(params, constants, 1.0, 0.2, 0.8, mc)
    with pytest.raises(DomainError):
        kernel_G(params, constants, -1.0, 0.8, 0.2, mc)

    at_end = kernel_H(params, constants, 1.0, 20.0, 1.0, mc)
    assert at_end.value == pytest.approx(1.95424, abs=1e-5)
    assert at_end.std_error == 0
    full = params.replace(lambda_=1.0)
    assert kernel_H(full, constants, 1.0, 20.0, 0.3, mc).value == 0
    assert varphi_bar(params, constants, 0.2, 0.0, 20.0, mc).value == 0


def test_kernels_value_boundaries(params, constants, mc, drift):
    assert value_v(params, constants, 1.0, 1.0, 20.0, drift, mc).value == 0
    assert deriv_v_r(params, constants, 0.3, 0.0, 20.0, drift, mc).value == 0
    v = value_v(params, constants, 0.0, 1.0, 20.0, drift, mc)
    assert v.value < 0
    with pytest.raises(DomainError):
        value_v(params, constants, 1.2, 1.0, 20.0, drift, mc)


@pytest.mark.parametrize(
    "t,r,z",
    [
        (0.0, 0.5, 20.0),
        (0.5, 1.0, 20.0),
        (0.0, 2.0, 10.0),
        (0.25, 0.3, 20.0),
        (0.0, 1.0, 0.0),
    ],
)
def test_kernels_derivative_agreement(params, constants, mc, drift, t, r, z):
    h = 0.05
    up = value_v(params, constants, t, r + h, z, drift, mc)
    down = value_v(params, constants, t, r - h, z, drift, mc)
    difference = (up.value - down.value) / (2 * h)
    difference_se = np.hypot(up.std_error, down.std_error) / (2 * h)
    deriv = deriv_v_r(params, constants, t, r, z, drift, mc)
    assert deriv.value > 0
    assert abs(deriv.value - difference) <= 3 * np.hypot(deriv.std_error, difference_se)


def test_kernels_second_derivative(params, constants, mc, drift):
    for t, r, z in ((0.0, 0.5, 20.0), (0.5, 2.0, 20.0), (0.0, 0.0, 20.0)):
        quadrature = dual_quadrature(params, constants, t, r, z, drift)
        assert quadrature >= 0
        v_r = deriv_v_r(params, constants, t, r, z, drift, mc)
        v_rr = deriv_v_rr(params, constants, t, r, z, drift, mc)
        assert v_rr.value + v_r.value == pytest.approx(quadrature)

    # e^{rho t + r} times the quadrature is the phi part of the strategy
    t, r, z = 0.25, 0.7, 20.0
    s_nodes = nodes_from(drift.grid, t)
    q1, q2 = phi_time_integrals(
        params, constants, s_nodes, np.array([r]), drift(s_nodes)
    )
    expected = params.lambda_ * q1[0] + (1 - params.lambda_) * constants.eta * z * q2[0]
    quadrature = dual_quadrature(params, constants, t, r, z, drift)
    scaled = np.exp(params.rho * t + r) * quadrature
    assert scaled == pytest.approx(expected, rel=1e-10)


def test_kernels_table(params, constants, mc):
    table = build_kernel_table(params, 1.0, 20.0, mc)
    size = mc.curve_steps + 1
    assert table.G_values.shape == (size, size)
    assert np.all(np.isnan(table.G_values[np.tril_indices(size, -1)]))
    assert np.all(table.G_values[np.triu_indices(size)] >= 0)
    assert np.allclose(np.diag(table.G_values), 0)
    assert np.allclose(np.tril(table.operator), 0)
    assert table.H_values[-1] == pytest.approx(1.95424, abs=1e-5)
    assert np.all(table.H_values > 0)
    assert 0 < table.contraction_modulus() < 1
    assert build_kernel_table(params, 1.0, 20.0, mc) is table

    table.check(mc.curve_grid(1.0), 1.0, 20.0)
    with pytest.raises(GridMismatchError):
        table.check(TimeGrid(t_end=1.0, n_steps=10), 1.0, 20.0)
    with pytest.raises(DomainError):
        table.check(mc.curve_grid(1.0), 2.0, 20.0)

    rows = list(table.to_rows())
    assert len(rows) == size * (size + 1) // 2
    assert all(row["t"] <= row["s"] for row in rows)
    assert rows[-1]["H"] == table.H_values[-1]
    assert rows[1]["G"] == table.G_values[0, 1]


def test_kernels_table_matches_pointwise(params, constants, mc):
    table = build_kernel_table(params, 1.0, 20.0, mc)
    i = 10
    t = float(table.grid.nodes[i])
    H = kernel_H(params, constants, 1.0, 20.0, t, mc)
    assert abs(H.value - table.H_values[i]) <= 4 * np.hypot(H.std_error, table.H_se[i])

    j = 15
    s = float(table.grid.nodes[j])
    G = kernel_G(params, constants, 1.0, s, t, mc)
    assert abs(G.value - table.G_values[i, j]) <= 4 * np.hypot(
        G.std_error, table.G_se[i, j]
    ) + 1e-12


def test_kernels_lambda_limits(params, mc):
    zero = build_kernel_table(params.replace(lambda_=0.0), 1.0, 20.0, mc)
    assert np.allclose(zero.operator, 0)
    full = build_kernel_table(params.replace(lambda_=1.0), 1.0, 20.0, mc)
    assert np.allclose(full.H_values, 0)


def test_kernels_curve(mc):
    grid = mc.curve_grid(1.0)
    curve = Curve.from_function(grid, lambda t: 2 * t)
    assert curve.integral() == pytest.approx(1.0)
    assert curve.integral(0.5) == pytest.approx(0.75)
    assert curve(0.25) == pytest.approx(0.5)
    assert curve.cumulative()[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Curve(grid=grid, values=np.zeros(3))
    with pytest.raises(GridMismatchError):
        curve.distance(Curve.constant(TimeGrid(t_end=1.0, n_steps=5), 0.0))
