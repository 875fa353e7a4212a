import numpy as np
import pytest

from mfg_tracking.config import RunConfig
from mfg_tracking.exceptions import DomainError
from mfg_tracking.params import boundary_x0
from mfg_tracking.solver.mfe import Region, SolveConfig, closed_form_drift, solve_mfe
from mfg_tracking.solver.strategy import (
    StrategyContext,
    dual_curve,
    simulate_equilibrium_wealth,
    sweep_x,
    theta_feedback,
    theta_outperforming,
    theta_underperforming,
    value_u,
    value_w,
    verify_consistency,
)


@pytest.fixture(scope="module")
def outperforming(params, mc):
    mfe = solve_mfe(params, 3.0, 20.0, SolveConfig(mc=mc))
    return StrategyContext.from_mfe(params, mfe)


@pytest.fixture(scope="module")
def underperforming(params, constants, mc):
    f = closed_form_drift(params, constants, 20.0, mc.curve_grid(1.0))
    return StrategyContext.build(
        params, f, 1.0, 20.0, mc, r_grid_size=16, strategy_paths=500
    )


def test_strategy_outperforming_closed_form(params, constants):
    assert theta_outperforming(params, constants, 0.0, 20.0) == pytest.approx(
        17.6827, abs=1e-4
    )
    assert theta_outperforming(params, constants, 1.0, 20.0) == pytest.approx(16.0)
    full = params.replace(lambda_=1.0)
    assert theta_outperforming(full, constants, 0.3, 20.0) == 0


def test_strategy_outperforming_context(outperforming, params, constants):
    ctx = outperforming
    assert ctx.region == Region.OUTPERFORMING
    t = np.array([0.0, 0.5, 1.0])
    z = np.array([20.0, 25.0, 10.0])
    expected = theta_outperforming(params, constants, t, z)
    assert np.allclose(ctx.theta(t, 3.0, z), expected)
    assert value_u(ctx, 0.0, 3.0, 20.0) == 0
    assert value_w(ctx, 23.75, 20.0) == 0
    assert theta_feedback(ctx, 0.0, 3.0, 20.0) == pytest.approx(17.6827, abs=1e-4)
    with pytest.raises(DomainError):
        theta_underperforming(ctx, 0.0, 1.0, 20.0)


def test_strategy_outperforming_consistency(outperforming, params, mc):
    ctx = outperforming
    report = verify_consistency(ctx, 23.75, 20.0, mc)
    assert report.passed
    assert report.residual[0] == pytest.approx(0, abs=1e-9)
    assert np.all(report.residual <= 4 * report.residual_se + 1e-9)
    rows = list(report.rows())
    assert len(rows) == mc.curve_steps + 1
    assert rows[0]["mean_V"] == pytest.approx(23.75)


def test_strategy_underperforming_consistency(underperforming_config):
    config = RunConfig.from_uri(underperforming_config)
    p, state = config.params, config.state
    mfe = solve_mfe(p, state.x0, state.z0, config.solve_config())
    assert mfe.region == Region.UNDERPERFORMING
    ctx = StrategyContext.from_mfe(p, mfe, strategy_paths=2_000)
    assert ctx.region == Region.UNDERPERFORMING
    assert ctx.r0 == mfe.r_star
    # the tabulated A + z B branch drives the wealth, not the closed form
    theta = ctx.theta(0.0, ctx.r0, state.z0)
    closed = theta_outperforming(p, ctx.constants, 0.0, state.z0)
    assert not np.isclose(theta, closed, rtol=1e-6)

    report = verify_consistency(ctx, state.v0, state.z0, config.mc(), threshold=0.02)
    assert report.passed
    f_sup = np.abs(report.f_star).max()
    assert report.sup_residual <= max(3 * report.residual_se.max(), 0.02 * f_sup)
    assert report.residual_se.max() > 0
    assert report.mean_gain[0] == pytest.approx(0, abs=1e-9)


def test_strategy_outperforming_wealth(outperforming, mc):
    ensemble = simulate_equilibrium_wealth(
        outperforming, 23.75, 20.0, mc.grid(1.0), mc
    )
    assert ensemble.shortfall.value < 1e-6
    assert ensemble.region_violations <= 0.01
    assert ensemble.min_X >= 0
    assert ensemble.L_monotone
    assert 0 < ensemble.min_Y <= ensemble.max_Y <= 1
    assert ensemble.sample_paths["V"].shape[1] == mc.steps + 1


def test_strategy_fault_detected(outperforming, mc):
    faulty = outperforming.perturbed(1.1)
    report = verify_consistency(faulty, 23.75, 20.0, mc)
    assert not report.passed
    assert 0.08 < report.relative < 0.11


def test_strategy_underperforming_tables(underperforming, params, constants):
    ctx = underperforming
    assert ctx.region == Region.UNDERPERFORMING
    assert ctx.r0 is not None and ctx.r0 > 0
    assert ctx.r_nodes is not None
    i = 10
    t = float(ctx.f_star.grid.nodes[i])
    for m in (2, 5):
        r = float(ctx.r_nodes[m])
        direct = theta_underperforming(ctx, t, r, 20.0)
        tabulated = float(ctx.theta(t, r, 20.0))
        assert tabulated == pytest.approx(direct.value, rel=2e-2)
        assert tabulated >= 0
    with pytest.raises(DomainError):
        theta_underperforming(ctx, 1.5, 1.0, 20.0)
    with pytest.raises(DomainError):
        theta_underperforming(ctx, 0.5, -1.0, 20.0)

    # beyond the tabulated levels the amount is clamped
    far = float(ctx.r_nodes[-1])
    assert float(ctx.theta(0.2, 10 * far, 20.0)) == pytest.approx(
        float(ctx.theta(0.2, far, 20.0))
    )


def test_strategy_value_properties(underperforming, params):
    ctx = underperforming
    t, z = 0.0, 20.0
    dual = dual_curve(ctx, t, z)
    boundary = boundary_x0(params, ctx.f_star, t, z)
    xs = np.linspace(0.0, boundary, 6)
    values = [value_u(ctx, t, float(x), z, dual) for x in xs]
    assert all(u <= 0 for u in values)
    assert np.all(np.diff(values) >= -1e-12)
    for (x1, u1), (x2, u2) in zip(zip(xs, values), zip(xs[1:], values[1:])):
        assert abs(u1 - u2) <= abs(x1 - x2) + 1e-12
    assert value_u(ctx, t, boundary + 0.1, z, dual) == 0
    assert value_w(ctx, 23.75, 20.0) == 0
    assert value_w(ctx, 19.0, 20.0) >= 0.8 * 1.0
    with pytest.raises(DomainError):
        value_u(ctx, t, -1.0, z, dual)


def test_strategy_feedback_sweep(underperforming, params, constants):
    ctx = underperforming
    t, z = 0.5, 20.0
    boundary = boundary_x0(params, ctx.f_star, t, z)
    points = sweep_x(ctx, t, z, [0.2, 0.6, boundary + 0.5])
    assert [p.region for p in points] == [
        Region.UNDERPERFORMING,
        Region.UNDERPERFORMING,
        Region.OUTPERFORMING,
    ]
    assert points[-1].theta == pytest.approx(
        float(theta_outperforming(params, constants, t, z))
    )
    assert points[-1].shortfall == 0
    assert all(p.theta >= 0 and p.shortfall >= 0 for p in points)


def test_strategy_underperforming_wealth(underperforming, mc):
    v0 = 20.0 + 1.0 / 0.8
    ensemble = simulate_equilibrium_wealth(underperforming, v0, 20.0, mc.grid(1.0), mc)
    assert ensemble.region == Region.UNDERPERFORMING
    assert ensemble.min_X >= 0
    assert ensemble.L_monotone
    assert ensemble.x_gap < 0.05
    assert ensemble.shortfall.value > 0
    assert 0 < ensemble.min_Y <= ensemble.max_Y <= 1
