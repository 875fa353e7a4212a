import numpy as np
import pytest

from mfg_tracking.exceptions import DomainError
from mfg_tracking.params import threshold_hat_x0
from mfg_tracking.solver.mfe import (
    MfeResult,
    Region,
    SolveConfig,
    closed_form_drift,
    solve_mfe,
)
from mfg_tracking.solver.nplayer import (
    Deviation,
    agent_contexts,
    estimate_gap,
    make_agents,
    objective_samples,
    objective_value,
    simulate_nplayer,
    stieltjes_samples,
)
from mfg_tracking.solver.strategy import StrategyContext
from mfg_tracking.stochastic import TimeGrid


@pytest.fixture(scope="module")
def small_mc(mc):
    return mc.replace(paths=200, chunk_size=200)


@pytest.fixture(scope="module")
def underperforming(params, constants, small_mc):
    f = closed_form_drift(params, constants, 20.0, small_mc.curve_grid(1.0))
    ctx = StrategyContext.build(
        params, f, 1.0, 20.0, small_mc, r_grid_size=16, strategy_paths=500
    )
    mfe = MfeResult(
        f_star=f,
        region=Region.UNDERPERFORMING,
        r_star=ctx.r0,
        x0=1.0,
        z0=20.0,
        x_hat0=threshold_hat_x0(params, 20.0),
        mc=small_mc,
    )
    return mfe, ctx


def test_nplayer_agents(params):
    agents = make_agents(params, 4, delta=0.5, types=5, seed=1)
    assert len(agents) == 4
    assert [a.level for a in agents] == pytest.approx([-1, -1 / 3, 1 / 3, 1])
    first = agents[0].params
    assert first.mu == pytest.approx(0.1 * 0.75)
    assert first.lambda_ == pytest.approx(0.2 * 0.75)
    # Sharpe ratios are kept
    assert first.mu / first.sigma == pytest.approx(1.0)
    assert agents[0].row(4)["lambda"] == pytest.approx(0.15)
    assert agents[0].stream != agents[1].stream

    many = make_agents(params, 12, delta=0.5, types=3)
    assert len({a.params for a in many}) == 3
    assert many[0].params == many[3].params

    capped = make_agents(params.replace(lambda_=1.0), 3, delta=0.5)
    assert all(a.params.lambda_ <= 1 for a in capped)
    assert capped[-1].params.lambda_ == 1

    single = make_agents(params, 1)
    assert single[0].params == params

    with pytest.raises(DomainError):
        make_agents(params, 0)
    with pytest.raises(DomainError):
        make_agents(params, 3, delta=1.0)
    with pytest.raises(ValueError):
        Deviation(name="negative", scale=-1)


def test_nplayer_objective():
    grid = TimeGrid(t_end=1.0, n_steps=50)
    zero = np.zeros((3, 51))
    assert np.all(objective_samples(zero, grid, 1.0) == 0)

    rng = np.random.default_rng(1)
    L = np.zeros((100, 51))
    L[:, 1:] = np.cumsum(rng.exponential(0.1, (100, 50)), axis=1)
    by_parts = objective_samples(L, grid, 1.0)
    assert np.all(by_parts <= 0)
    assert np.allclose(by_parts, stieltjes_samples(L, grid, 1.0), atol=1e-10)

    # a single unit push at T is discounted by e^{-rho T}
    push = np.zeros((1, 51))
    push[0, -1] = 1.0
    assert objective_value(push, grid, 1.0).value == pytest.approx(-np.exp(-1.0))


def test_nplayer_single_agent_exact(params, small_mc):
    alone = params.replace(lambda_=0.0)
    mfe = solve_mfe(alone, 3.0, 20.0, SolveConfig(mc=small_mc))
    agents = make_agents(alone, 1)
    report = estimate_gap(agents, mfe, 3.0, 20.0, small_mc)
    assert len(report.rows) == 5
    assert all(row.gap_bound == 0 for row in report.rows)
    assert all(row.admissible for row in report.rows)
    assert report.drift_error <= 5 * report.drift_se + 1e-9

    eq = next(row for row in report.rows if row.deviation_id == "equilibrium")
    assert eq.objective_gap == 0
    assert eq.objective == 0


def test_nplayer_simulation(params, underperforming, small_mc):
    mfe, ctx = underperforming
    agents = make_agents(params, 5, delta=0.0)
    contexts = agent_contexts(agents, mfe, 1.0, 20.0, small_mc, base=ctx)
    assert all(c is ctx for c in contexts.values())
    ensemble = simulate_nplayer(
        agents,
        mfe,
        1.0,
        20.0,
        small_mc.grid(1.0),
        small_mc,
        contexts=contexts,
        deviators=2,
    )
    assert set(ensemble.local_time_gap) == {0, 1}
    assert ensemble.L_monotone
    assert ensemble.min_X >= 0
    assert ensemble.drift_mean.shape == (small_mc.steps + 1,)
    assert all(gap >= 0 for gap in ensemble.local_time_gap.values())


def test_nplayer_drift_converges(params, small_mc):
    mfe = solve_mfe(params, 3.0, 20.0, SolveConfig(mc=small_mc))
    ctx = StrategyContext.from_mfe(params, mfe)
    counts = (2, 10, 50)
    errors = []
    for n in counts:
        agents = make_agents(params, n, delta=0.0)
        contexts = agent_contexts(agents, mfe, 3.0, 20.0, small_mc, base=ctx)
        ensemble = simulate_nplayer(
            agents,
            mfe,
            3.0,
            20.0,
            small_mc.grid(1.0),
            small_mc,
            contexts=contexts,
            deviators=1,
        )
        errors.append(ensemble.drift_rmse)
    assert errors[0] > errors[1] > errors[2] > 0
    # 1 / sqrt(n) rate
    scaled = [e * np.sqrt(n) for e, n in zip(errors, counts)]
    assert max(scaled) < 1.5 * min(scaled)

    f_values = mfe.f_star(ensemble.grid.nodes)
    worst = int(np.abs(ensemble.drift_mean - f_values).argmax())
    assert ensemble.drift_error <= 4 * ensemble.drift_se[worst] + 1e-9
    bias = np.abs(ensemble.drift_mean - f_values)
    assert np.all(bias <= 4 * ensemble.drift_se + 1e-9)


def test_nplayer_gap_decreases(params, underperforming, small_mc):
    mfe, ctx = underperforming
    bounds = []
    for n in (2, 10, 50):
        agents = make_agents(params, n, delta=0.0)
        contexts = agent_contexts(agents, mfe, 1.0, 20.0, small_mc, base=ctx)
        report = estimate_gap(agents, mfe, 1.0, 20.0, small_mc, contexts=contexts)
        assert report.n == n
        assert len(report.rows) == min(n, 3) * 5
        assert all(row.admissible for row in report.rows)
        for row in report.rows:
            if row.deviation_id == "equilibrium":
                assert row.objective_gap == 0
            if row.deviation_id == "zero":
                assert row.objective_gap <= row.gap_bound + 3 * row.gap_se
        assert report.gap_bound >= report.equilibrium_bound > 0
        assert report.c0 > 0
        bounds.append(report.equilibrium_bound)
    assert bounds[0] > bounds[1] > bounds[2]


def test_nplayer_needs_equilibrium(params, underperforming, small_mc):
    mfe, ctx = underperforming
    agents = make_agents(params, 2, delta=0.0)
    contexts = agent_contexts(agents, mfe, 1.0, 20.0, small_mc, base=ctx)
    with pytest.raises(DomainError):
        estimate_gap(
            agents,
            mfe,
            1.0,
            20.0,
            small_mc,
            deviations=[Deviation(name="zero", scale=0.0)],
            contexts=contexts,
        )
