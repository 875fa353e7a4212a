"""
n-player benchmark tracking game under the mean-field strategy: heterogeneous
agent schedules, coupled and decoupled state simulation and the estimate of
the approximate Nash gap.
"""

from typing import Any, Iterable, Self

import numpy as np
from anystore.io import logged_items
from anystore.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field

from mfg_tracking.exceptions import DomainError
from mfg_tracking.params import DerivedConstants, ModelParams, derive_constants
from mfg_tracking.settings import Settings
from mfg_tracking.solver.mfe import MfeResult
from mfg_tracking.solver.strategy import StrategyContext
from mfg_tracking.solver.util import McConfig, McEstimate, SampleStats
from mfg_tracking.stochastic import (
    RngStream,
    Stream,
    TimeGrid,
    cumulate,
    simulate_paths,
    skorokhod,
)

settings = Settings()
log = get_logger(__name__)


class AgentSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: int
    params: ModelParams
    constants: DerivedConstants
    level: float = Field(ge=-1, le=1)
    """Position in the heterogeneity schedule"""
    stream: RngStream

    @classmethod
    def create(
        cls, agent_id: int, params: ModelParams, level: float, seed: int
    ) -> Self:
        return cls(
            agent_id=agent_id,
            params=params,
            constants=derive_constants(params),
            level=level,
            stream=RngStream(seed=seed, stream_id=int(Stream.NPLAYER)).substream(
                agent_id
            ),
        )

    def row(self, n: int) -> dict[str, Any]:
        p = self.params
        return {
            "n": n,
            "agent_id": self.agent_id,
            "mu": p.mu,
            "sigma": p.sigma,
            "mu_z": p.mu_z,
            "sigma_z": p.sigma_z,
            "lambda": p.lambda_,
        }


def make_agents(
    p: ModelParams,
    n: int,
    delta: float = settings.nplayer_delta,
    types: int = settings.nplayer_types,
    seed: int = settings.seed,
) -> list[AgentSpec]:
    """
    Agent i of n gets the limit parameters scaled by 1 + delta * u_i / sqrt(n),
    lambda capped at 1. The levels u_i are spread over [-1, 1] and assigned
    round robin to at most `types` classes. Scaling mu with sigma and mu_z
    with sigma_z keeps every agent's Sharpe ratios valid.
    """
    if n < 1:
        raise DomainError(f"Need at least one player: {n}")
    if not 0 <= delta < 1:
        raise DomainError(f"Heterogeneity amplitude must be in [0, 1): {delta}")
    classes = min(n, max(types, 1))
    levels = np.linspace(-1.0, 1.0, classes) if classes > 1 else np.zeros(1)
    agents = []
    for i in range(n):
        u = float(levels[i % classes])
        factor = 1 + delta * u / np.sqrt(n)
        params = p.replace(
            mu=p.mu * factor,
            sigma=p.sigma * factor,
            mu_z=p.mu_z * factor,
            sigma_z=p.sigma_z * factor,
            lambda_=min(1.0, p.lambda_ * factor),
        )
        agents.append(AgentSpec.create(i, params, u, seed))
    return agents


class Deviation(BaseModel):
    """A unilateral strategy: the agent's own equilibrium amount times `scale`"""

    model_config = ConfigDict(frozen=True)

    name: str
    scale: float = Field(ge=0)

    def apply(self, theta: np.ndarray) -> np.ndarray:
        return self.scale * theta


DEFAULT_DEVIATIONS = (
    Deviation(name="equilibrium", scale=1.0),
    Deviation(name="zero", scale=0.0),
    Deviation(name="scale_0.5", scale=0.5),
    Deviation(name="scale_1.5", scale=1.5),
    Deviation(name="scale_2", scale=2.0),
)


def objective_samples(
    L: np.ndarray, grid: TimeGrid, rho: float, t: float | None = None
) -> np.ndarray:
    """
    Per path -int e^{-rho (s - t)} dL_s by summation by parts:
    -(w_K L_K - sum_k L_k (w_{k+1} - w_k)).
    """
    t = grid.t_start if t is None else t
    weights = np.exp(-rho * (grid.nodes - t))
    return -(weights[-1] * L[:, -1] - L[:, :-1] @ np.diff(weights))


def stieltjes_samples(
    L: np.ndarray, grid: TimeGrid, rho: float, t: float | None = None
) -> np.ndarray:
    """Per path right-point Stieltjes sum of -e^{-rho (s - t)} dL_s"""
    t = grid.t_start if t is None else t
    weights = np.exp(-rho * (grid.nodes - t))
    return -(np.diff(L, axis=1) @ weights[1:])


def objective_value(
    L: np.ndarray, grid: TimeGrid, rho: float, t: float | None = None
) -> McEstimate:
    return McEstimate.from_samples(objective_samples(L, grid, rho, t))


def _state(
    p: ModelParams,
    x0: float,
    theta: np.ndarray,
    Z: np.ndarray,
    dW: np.ndarray,
    population: np.ndarray,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Reflected state of one agent given the population increments"""
    increments = (
        theta[:, :-1] * (p.mu * dt + p.sigma * dW)
        - population
        - (1 - p.lambda_) * Z[:, :-1] * (p.mu_z * dt + p.sigma_z * dW)
    )
    return skorokhod(x0 + cumulate(increments))


class _Chunk(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    drift: np.ndarray
    """sum_j mu^j theta^j per node"""
    noise: np.ndarray
    """sum_j sigma^j theta^j dW^j per step"""
    theta: dict[int, np.ndarray]
    Z: dict[int, np.ndarray]
    dW: dict[int, np.ndarray]


def _simulate_chunk(
    agents: list[AgentSpec],
    contexts: dict[int, StrategyContext],
    z0: float,
    grid: TimeGrid,
    chunk: int,
    size: int,
    deviators: set[int],
) -> _Chunk:
    t = grid.nodes
    drift = np.zeros((size, grid.n_steps + 1))
    noise = np.zeros((size, grid.n_steps))
    data = _Chunk(drift=drift, noise=noise, theta={}, Z={}, dW={})
    for agent in agents:
        p, c = agent.params, agent.constants
        ctx = contexts[agent.agent_id]
        r0 = ctx.r0 or 0.0
        bundle = simulate_paths(p, c, grid, r0, z0, agent.stream, size, chunk)
        theta = ctx.theta(t[None, :], bundle.R, bundle.Z)
        data.drift += p.mu * theta
        data.noise += p.sigma * theta[:, :-1] * bundle.dW
        if agent.agent_id in deviators:
            data.theta[agent.agent_id] = np.asarray(theta)
            data.Z[agent.agent_id] = bundle.Z
            data.dW[agent.agent_id] = bundle.dW
    return data


def agent_contexts(
    agents: list[AgentSpec],
    mfe: MfeResult,
    x0: float,
    z0: float,
    mc: McConfig,
    base: StrategyContext | None = None,
) -> dict[int, StrategyContext]:
    """One strategy context per distinct parameter class"""
    by_params: dict[ModelParams, StrategyContext] = {}
    if base is not None:
        by_params[base.params] = base
    contexts = {}
    for agent in agents:
        if agent.params not in by_params:
            by_params[agent.params] = StrategyContext.build(
                agent.params, mfe.f_star, x0, z0, mc
            )
        contexts[agent.agent_id] = by_params[agent.params]
    return contexts


class NPlayerEnsemble(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n: int
    grid: TimeGrid
    drift_mean: np.ndarray
    """E[(1/n) sum_j mu^j theta^j] per node"""
    drift_se: np.ndarray
    drift_error: float
    """Sup distance of the empirical population drift to f*"""
    drift_rmse: float
    """sup_t E[|(1/n) sum_j mu^j theta^j_t - f*(t)|^2]^(1/2)"""
    local_time_gap: dict[int, float]
    """sup_s E|L^{*,i} - Lbar^{*,i}| per deviating agent"""
    mean_L: dict[int, np.ndarray]
    L_monotone: bool
    min_X: float


def simulate_nplayer(
    agents: list[AgentSpec],
    mfe: MfeResult,
    x0: float,
    z0: float,
    grid: TimeGrid,
    mc: McConfig,
    contexts: dict[int, StrategyContext] | None = None,
    deviators: int = settings.deviating_agents,
) -> NPlayerEnsemble:
    """
    Every agent follows its mean-field strategy on its own noise; the deviating
    agents' states are simulated coupled to the empirical population drift
    and decoupled against f*.
    """
    n = len(agents)
    contexts = contexts or agent_contexts(agents, mfe, x0, z0, mc)
    deviator_ids = {a.agent_id for a in agents[:deviators]}
    f_values = mfe.f_star(grid.nodes)
    dt = grid.dt
    drift_stats = SampleStats()
    square_stats = SampleStats()
    gap_stats = {i: SampleStats() for i in deviator_ids}
    L_stats = {i: SampleStats() for i in deviator_ids}
    monotone, min_X = True, np.inf
    for chunk, size in mc.chunks():
        data = _simulate_chunk(agents, contexts, z0, grid, chunk, size, deviator_ids)
        drift_stats.add(data.drift / n)
        square_stats.add((data.drift / n - f_values) ** 2)
        for agent in agents:
            i = agent.agent_id
            if i not in deviator_ids:
                continue
            p = agent.params
            theta, Z, dW = data.theta[i], data.Z[i], data.dW[i]
            coupled = p.lambda_ / n * (data.drift[:, :-1] * dt + data.noise)
            X, L = _state(p, x0, theta, Z, dW, coupled, dt)
            _, L_bar = _state(p, x0, theta, Z, dW, p.lambda_ * f_values[:-1] * dt, dt)
            gap_stats[i].add(np.abs(L - L_bar))
            L_stats[i].add(L)
            monotone = monotone and bool(np.all(np.diff(L, axis=1) >= 0))
            min_X = min(min_X, float(X.min()))
    drift_mean = drift_stats.mean
    log.info("Simulated n-player system", n=n, paths=drift_stats.n)
    return NPlayerEnsemble(
        n=n,
        grid=grid,
        drift_mean=drift_mean,
        drift_se=drift_stats.std_error,
        drift_error=float(np.abs(drift_mean - f_values).max()),
        drift_rmse=float(np.sqrt(square_stats.mean.max())),
        local_time_gap={i: float(s.mean.max()) for i, s in gap_stats.items()},
        mean_L={i: s.mean for i, s in L_stats.items()},
        L_monotone=monotone,
        min_X=min_X,
    )


class NashGapRow(BaseModel):
    n: int
    agent_id: int
    deviation_id: str
    objective: float
    se: float
    objective_gap: float
    """J(deviation) - J(equilibrium) in the coupled system"""
    gap_se: float
    gap_bound: float
    second_moment: float
    """sup_s E|theta_s|^2 of the deviation"""
    admissible: bool


class NashGapReport(BaseModel):
    n: int
    rows: list[NashGapRow]
    drift_error: float
    drift_se: float
    """Standard error at the node of the largest drift error"""
    drift_rmse: float
    """sup_t E[|(1/n) sum_j mu^j theta^j_t - f*(t)|^2]^(1/2)"""
    c0: float
    """Admissibility constant"""

    @property
    def gap_bound(self) -> float:
        return max(row.gap_bound for row in self.rows)

    @property
    def equilibrium_bound(self) -> float:
        return max(
            row.gap_bound for row in self.rows if row.deviation_id == "equilibrium"
        )

    def csv_rows(self) -> Iterable[dict[str, Any]]:
        for row in self.rows:
            yield row.model_dump(
                include={
                    "n",
                    "agent_id",
                    "deviation_id",
                    "objective",
                    "se",
                    "objective_gap",
                    "gap_se",
                    "gap_bound",
                    "admissible",
                }
            )


def estimate_gap(
    agents: list[AgentSpec],
    mfe: MfeResult,
    x0: float,
    z0: float,
    mc: McConfig,
    deviations: Iterable[Deviation] = DEFAULT_DEVIATIONS,
    contexts: dict[int, StrategyContext] | None = None,
    deviators: int = settings.deviating_agents,
    grid: TimeGrid | None = None,
) -> NashGapReport:
    """
    For every deviating agent and deviation, simulate the coupled system (the
    other agents keep their mean-field strategy) and the decoupled system
    against f* on common noise. The local-time bound is
    (1 + rho T) (sup_s E|L^{-i} - Lbar^i| + sup_s E|L^{*,i} - Lbar^{*,i}|);
    the direct objective gaps on the deviation set are a lower-bound witness.
    """
    deviations = list(deviations)
    n = len(agents)
    grid = grid or mc.grid(mfe.f_star.grid.t_end)
    contexts = contexts or agent_contexts(agents, mfe, x0, z0, mc)
    deviating = agents[:deviators]
    deviator_ids = {a.agent_id for a in deviating}
    f_values = mfe.f_star(grid.nodes)
    dt = grid.dt
    keys = [(a.agent_id, d.name) for a in deviating for d in deviations]
    dev_gap = {k: SampleStats() for k in keys}
    objective = {k: SampleStats() for k in keys}
    difference = {k: SampleStats() for k in keys}
    moment = {k: SampleStats() for k in keys}
    eq_gap = {i: SampleStats() for i in deviator_ids}
    drift_stats = SampleStats()
    square_stats = SampleStats()

    chunks = logged_items(mc.chunks(), "Simulate", 1, item_name="Chunk", logger=log)
    for chunk, size in chunks:
        data = _simulate_chunk(agents, contexts, z0, grid, chunk, size, deviator_ids)
        drift_stats.add(data.drift / n)
        square_stats.add((data.drift / n - f_values) ** 2)
        for agent in deviating:
            i, p = agent.agent_id, agent.params
            theta, Z, dW = data.theta[i], data.Z[i], data.dW[i]
            decoupled = p.lambda_ * f_values[:-1] * dt

            def coupled(dev_theta: np.ndarray) -> np.ndarray:
                drift = data.drift - p.mu * theta + p.mu * dev_theta
                noise = data.noise + p.sigma * (dev_theta - theta)[:, :-1] * dW
                return p.lambda_ / n * (drift[:, :-1] * dt + noise)

            _, L_eq = _state(p, x0, theta, Z, dW, coupled(theta), dt)
            _, L_eq_bar = _state(p, x0, theta, Z, dW, decoupled, dt)
            eq_gap[i].add(np.abs(L_eq - L_eq_bar))
            J_eq = objective_samples(L_eq, grid, p.rho)
            for dev in deviations:
                key = (i, dev.name)
                dev_theta = dev.apply(theta)
                _, L_dev = _state(p, x0, dev_theta, Z, dW, coupled(dev_theta), dt)
                _, L_bar = _state(p, x0, dev_theta, Z, dW, decoupled, dt)
                J_dev = objective_samples(L_dev, grid, p.rho)
                dev_gap[key].add(np.abs(L_dev - L_bar))
                objective[key].add(J_dev)
                difference[key].add(J_dev - J_eq)
                moment[key].add(dev_theta**2)

    c0 = 10 * max(
        float(moment[(i, dev.name)].mean.max())
        for i, dev in _equilibria(deviating, deviations)
    )
    budget = c0 * (1 + x0**2 + z0**2)
    horizon = grid.t_end - grid.t_start
    rows = []
    for agent in deviating:
        i, rho = agent.agent_id, agent.params.rho
        for dev in deviations:
            key = (i, dev.name)
            bound = (1 + rho * horizon) * (
                float(dev_gap[key].mean.max()) + float(eq_gap[i].mean.max())
            )
            second = float(moment[key].mean.max())
            rows.append(
                NashGapRow(
                    n=n,
                    agent_id=i,
                    deviation_id=dev.name,
                    objective=float(objective[key].mean),
                    se=float(objective[key].std_error),
                    objective_gap=float(difference[key].mean),
                    gap_se=float(difference[key].std_error),
                    gap_bound=bound,
                    second_moment=second,
                    admissible=second <= budget,
                )
            )
    error = np.abs(drift_stats.mean - f_values)
    worst = int(error.argmax())
    log.info("Nash gap estimate", n=n, bound=max(r.gap_bound for r in rows), c0=c0)
    return NashGapReport(
        n=n,
        rows=rows,
        drift_error=float(error[worst]),
        drift_se=float(drift_stats.std_error[worst]),
        drift_rmse=float(np.sqrt(square_stats.mean.max())),
        c0=c0,
    )


def _equilibria(
    agents: list[AgentSpec], deviations: list[Deviation]
) -> list[tuple[int, Deviation]]:
    own = [dev for dev in deviations if dev.scale == 1.0]
    if not own:
        raise DomainError("The deviation set must contain the equilibrium strategy")
    return [(agent.agent_id, own[0]) for agent in agents]
