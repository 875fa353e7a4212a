import numpy as np
import pytest
from anystore.io import smart_stream_csv

from mfg_tracking.exceptions import DomainError, GridMismatchError
from mfg_tracking.solver.util import McEstimate
from mfg_tracking.stochastic import (
    NEVER,
    RngStream,
    Stream,
    TimeGrid,
    bridge_survival,
    chunk_sizes,
    dump_paths,
    hitting_time_tau,
    simulate_gbm,
    simulate_paths,
    simulate_reflected,
    skorokhod,
)

GRID = TimeGrid(t_end=1.0, n_steps=500)
RNG = RngStream(seed=42, stream_id=int(Stream.ORACLE))


def test_stochastic_grid():
    assert GRID.dt == pytest.approx(0.002)
    assert len(GRID.nodes) == 501
    assert GRID.index(0.5) == 250
    with pytest.raises(GridMismatchError):
        GRID.index(0.5001)
    coarse = GRID.coarsen(10)
    assert coarse.n_steps == 50
    assert np.allclose(coarse.nodes, GRID.nodes[::10])
    with pytest.raises(GridMismatchError):
        GRID.coarsen(7)
    with pytest.raises(ValueError):
        TimeGrid(t_start=1.0, t_end=1.0, n_steps=10)


def test_stochastic_reflection(constants):
    bundle = simulate_reflected(constants, GRID, 1.0, RNG, 10_000)
    R, L, D = bundle.R, bundle.L, bundle.D
    assert R.shape == (10_000, 501)
    assert np.all(R >= 0)
    assert np.all(L[:, 0] == 0)
    assert np.all(np.diff(L, axis=1) >= 0)
    # the regulator only moves when the level sits on the boundary
    moves = np.diff(L, axis=1) > 0
    assert np.all(R[:, 1:][moves] == 0)
    assert np.array_equal(R, D + L)
    assert np.all(bundle.Y > 0) and np.all(bundle.Y <= 1)
    assert np.allclose(bundle.Y, np.exp(-R))

    again = simulate_reflected(constants, GRID, 1.0, RNG, 10_000)
    assert np.array_equal(again.R, R)
    other = simulate_reflected(constants, GRID, 1.0, RNG, 10_000, chunk=1)
    assert not np.array_equal(other.R, R)
    sub = simulate_reflected(constants, GRID, 1.0, RNG.substream(1), 10_000)
    assert not np.array_equal(sub.R, R)


def test_stochastic_reflection_start_levels(constants):
    levels = np.array([0.0, 0.5, 2.0])
    bundle = simulate_reflected(constants, GRID, levels, RNG, 3)
    assert np.allclose(bundle.R[:, 0], levels)
    assert bundle.tau_idx[0] == 0
    with pytest.raises(DomainError):
        simulate_reflected(constants, GRID, -0.1, RNG, 3)


def test_stochastic_skorokhod():
    driver = np.array([[1.0, 0.5, -0.5, 0.2, -1.0, 0.0]])
    X, L = skorokhod(driver)
    assert np.allclose(L, [[0, 0, 0.5, 0.5, 1.0, 1.0]])
    assert np.allclose(X, [[1.0, 0.5, 0.0, 0.7, 0.0, 1.0]])


def test_stochastic_hitting_time(constants):
    bundle = simulate_reflected(constants, GRID, 1.0, RNG, 2_000)
    tau = hitting_time_tau(bundle, GRID)
    never = bundle.tau_idx == NEVER
    assert np.all(tau[never] == 1.0)
    assert np.all(tau[~never] < 1.0 + 1e-12)
    hit = bundle.tau_idx[~never]
    assert np.all(bundle.D[~never, hit] <= 0)
    with pytest.raises(GridMismatchError):
        hitting_time_tau(bundle, GRID.coarsen(10))


def test_stochastic_gbm(params):
    Z = simulate_gbm(params, GRID, 20.0, RNG, 20_000)
    assert np.all(Z[:, 0] == 20)
    assert np.all(Z > 0)
    est = McEstimate.from_samples(Z[:, -1])
    assert est.within(20 * np.exp(0.2))
    with pytest.raises(DomainError):
        simulate_gbm(params, GRID, -1.0, RNG, 10)


def test_stochastic_gbm_degenerate(params, constants):
    Z = simulate_gbm(params, GRID, 0.0, RNG, 100)
    assert np.all(Z == 0)
    bundle = simulate_paths(params, constants, GRID, 1.0, 0.0, RNG, 50)
    assert np.all(bundle.Z == 0)

    # a vanishing index volatility leaves the deterministic growth z e^{mu_z t}
    quiet = params.replace(sigma_z=1e-8)
    Z = simulate_gbm(quiet, GRID, 20.0, RNG, 100)
    expected = 20 * np.exp(0.2 * GRID.nodes)
    assert np.allclose(Z, expected[None, :], rtol=1e-6, atol=0)
    assert Z[:, -1].std() < 1e-5


def test_stochastic_common_noise(params, constants):
    bundle = simulate_paths(params, constants, GRID, 1.0, 20.0, RNG, 100)
    assert bundle.Z is not None
    expected = simulate_gbm(params, GRID, 20.0, RNG, 100)
    assert np.allclose(bundle.Z, expected)


def test_stochastic_bridge_survival(constants):
    bundle = simulate_reflected(constants, GRID, 0.5, RNG, 1_000)
    survival = bridge_survival(bundle, constants, GRID)
    assert np.all(survival >= 0) and np.all(survival <= 1)
    assert np.all(np.diff(survival, axis=1) <= 1e-15)
    hit = bundle.tau_idx != NEVER
    rows = np.flatnonzero(hit)
    assert np.all(survival[rows, bundle.tau_idx[rows]] == 0)


def test_stochastic_chunks():
    chunks = list(chunk_sizes(12_345, 5_000))
    assert chunks == [(0, 5_000), (1, 5_000), (2, 2_345)]


def test_stochastic_dump(tmp_path, params, constants):
    grid = TimeGrid(t_end=1.0, n_steps=20)
    bundle = simulate_paths(params, constants, grid, 1.0, 20.0, RNG, 3)
    uri = str(tmp_path / "paths.csv")
    dump_paths(bundle, grid, uri, path=1)
    rows = list(smart_stream_csv(uri))
    assert len(rows) == 21
    assert set(rows[0]) == {"k", "t", "D", "L", "R", "Y", "Z"}
    assert float(rows[-1]["R"]) == pytest.approx(bundle.R[1, -1])
    with pytest.raises(GridMismatchError):
        dump_paths(bundle, GRID, uri)
