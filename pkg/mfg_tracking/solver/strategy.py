"""
Optimal strategy and value of the representative agent given a population
drift, equilibrium wealth simulation and the consistency check.

On the underperforming region the strategy is a function of the dual state
(t, R_t, Z_t): it is affine in the index level,

    theta(t, r, z) = A(t, r) + z B(t, r),

and both coefficients are tabulated on (curve nodes x dual levels) once per
context.
"""

from typing import Any, Iterable, Self

import numpy as np
from anystore.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import RegularGridInterpolator

from mfg_tracking.exceptions import DomainError
from mfg_tracking.params import (
    DerivedConstants,
    ModelParams,
    boundary_x0,
    derive_constants,
)
from mfg_tracking.settings import Settings
from mfg_tracking.solver.kernels import (
    dual_integrals,
    phi_time_integrals,
    varphi_bar,
)
from mfg_tracking.solver.mfe import MfeResult, Region
from mfg_tracking.solver.util import (
    Curve,
    McConfig,
    McEstimate,
    SampleStats,
    bisect_level,
    check_same_grid,
    nodes_from,
)
from mfg_tracking.stochastic import (
    RngStream,
    Stream,
    TimeGrid,
    bridge_survival,
    chunk_sizes,
    cumulate,
    simulate_paths,
    skorokhod,
)

settings = Settings()
log = get_logger(__name__)

TAIL_SIGMAS = 8.0
DUAL_GRID_MAX = 12.0


def theta_outperforming(
    p: ModelParams, c: DerivedConstants, t: float | np.ndarray, z: float | np.ndarray
) -> np.ndarray:
    """Amount invested in the risky asset on the outperforming region"""
    return (1 - p.lambda_) * p.sigma_z * np.exp(c.eta * (p.horizon - t)) * z / p.sigma


def dual_level(
    p: ModelParams,
    f: Curve,
    x0: float,
    z0: float,
    mc: McConfig,
    tol_x: float = settings.tol_x,
    bracket_max: int = settings.bracket_max,
) -> float:
    """Initial dual level matching x0 for a fixed population drift"""
    c = derive_constants(p)

    def evaluate(r: float) -> McEstimate:
        _, stopped = dual_integrals(p, c, 0.0, r, z0, f, mc, shift=r)
        return stopped

    r, _ = bisect_level(evaluate, x0, tol_x, bracket_max)
    return r


def stationary_varphi(
    p: ModelParams,
    c: DerivedConstants,
    mc: McConfig,
    r_nodes: np.ndarray,
    n_paths: int,
) -> np.ndarray:
    """
    varphi per unit index level, psi(T - t_i, r_m), for every curve node t_i
    and dual level r_m. The dynamics are time homogeneous, so one ensemble
    from time 0 per level serves all remaining horizons. All levels share
    the same Brownian increments.
    """
    grid = mc.grid(p.horizon)
    curve = mc.curve_grid(p.horizon)
    rng = mc.stream(Stream.STRATEGY)
    remaining = (curve.n_steps - np.arange(curve.n_steps + 1)) * mc.stride
    psi = np.zeros((curve.n_steps + 1, len(r_nodes)))
    for m, r in enumerate(r_nodes):
        stats = SampleStats()
        for chunk, size in chunk_sizes(n_paths, mc.chunk_size):
            bundle = simulate_paths(p, c, grid, r, 1.0, rng, size, chunk)
            integrand = np.exp(-p.rho * grid.nodes - (bundle.R - r)) * bundle.Z
            if mc.bridge:
                integrand = integrand * bridge_survival(bundle, c, grid)
                stop = np.broadcast_to(remaining, (size, len(remaining)))
            else:
                stop = np.minimum(bundle.stop_idx[:, None], remaining[None, :])
            running = cumulative_trapezoid(integrand, dx=grid.dt, axis=1, initial=0.0)
            stats.add(np.take_along_axis(running, stop, axis=1))
        psi[:, m] = stats.mean
    return psi


class StrategyContext(BaseModel):
    """
    Everything needed to evaluate the optimal strategy of an agent with
    parameters `params` facing the population drift `f_star`.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    params: ModelParams
    constants: DerivedConstants
    f_star: Curve
    region: Region
    x0: float
    z0: float
    r0: float | None = None
    mc: McConfig
    r_nodes: np.ndarray | None = None
    theta_base: np.ndarray | None = None
    """f-driven coefficient A(t_i, r_m)"""
    theta_index: np.ndarray | None = None
    """Per unit index coefficient B(t_i, r_m)"""
    psi: np.ndarray | None = None

    @classmethod
    def build(
        cls,
        p: ModelParams,
        f_star: Curve,
        x0: float,
        z0: float,
        mc: McConfig,
        r0: float | None = None,
        region: Region | None = None,
        r_grid_size: int = settings.r_grid_size,
        strategy_paths: int = settings.strategy_paths,
    ) -> Self:
        check_same_grid(f_star.grid, mc.curve_grid(p.horizon))
        c = derive_constants(p)
        if region is None:
            if x0 >= boundary_x0(p, f_star, 0.0, z0):
                region = Region.OUTPERFORMING
            else:
                region = Region.UNDERPERFORMING
        if region == Region.OUTPERFORMING:
            return cls(
                params=p, constants=c, f_star=f_star, region=region, x0=x0, z0=z0, mc=mc
            )
        if r0 is None:
            r0 = dual_level(p, f_star, x0, z0, mc)
        r_hi = max(r0, 1.0) + (max(c.r_drift, 0.0) + TAIL_SIGMAS * c.r_vol) * np.sqrt(
            p.horizon
        )
        r_nodes = np.linspace(0.0, r_hi, r_grid_size)
        log.info(
            "Tabulating strategy",
            r0=r0,
            r_hi=r_hi,
            levels=r_grid_size,
            paths=strategy_paths,
        )
        psi = stationary_varphi(p, c, mc, r_nodes, strategy_paths)
        ctx = cls(
            params=p,
            constants=c,
            f_star=f_star,
            region=region,
            x0=x0,
            z0=z0,
            r0=r0,
            mc=mc,
            r_nodes=r_nodes,
            psi=psi,
        )
        return ctx._tabulate(f_star)

    @classmethod
    def from_mfe(
        cls,
        p: ModelParams,
        mfe: MfeResult,
        mc: McConfig | None = None,
        r_grid_size: int = settings.r_grid_size,
        strategy_paths: int = settings.strategy_paths,
    ) -> Self:
        return cls.build(
            p,
            mfe.f_star,
            mfe.x0,
            mfe.z0,
            mc or mfe.mc,
            r0=mfe.r_star,
            region=mfe.region,
            r_grid_size=r_grid_size,
            strategy_paths=strategy_paths,
        )

    def _tabulate(self, f: Curve) -> Self:
        p, c = self.params, self.constants
        if self.r_nodes is None or self.psi is None:
            raise DomainError("Strategy tables need dual levels")
        curve = f.grid
        size = curve.n_steps + 1
        base = np.zeros((size, len(self.r_nodes)))
        index = np.zeros((size, len(self.r_nodes)))
        sharpe = p.mu / p.sigma**2
        rest = 1 - p.lambda_
        for i in range(size):
            s_nodes = curve.nodes[i:]
            q1, q2 = phi_time_integrals(p, c, s_nodes, self.r_nodes, f.values[i:])
            base[i] = p.lambda_ * sharpe * q1
            index[i] = rest * c.eta * sharpe * q2
        index += rest * c.eta * p.sigma_z / p.sigma * self.psi
        index += rest * p.sigma_z / p.sigma
        return self.model_copy(
            update={"f_star": f, "theta_base": base, "theta_index": index}
        )

    def perturbed(self, factor: float) -> "StrategyContext":
        """The same agent facing the population drift f* * factor"""
        f = self.f_star.scaled(factor)
        if self.region == Region.OUTPERFORMING:
            return self.model_copy(update={"f_star": f})
        return self._tabulate(f)

    def theta(
        self, t: float | np.ndarray, r: float | np.ndarray, z: float | np.ndarray
    ) -> np.ndarray:
        """
        Optimal amount at dual state (t, r, z), vectorised. Levels beyond the
        tabulated range are clamped.
        """
        p, c = self.params, self.constants
        if self.region == Region.OUTPERFORMING:
            shape = np.broadcast(t, r, z).shape
            return np.broadcast_to(theta_outperforming(p, c, t, z), shape)
        if self.r_nodes is None or self.theta_base is None or self.theta_index is None:
            raise DomainError("Strategy context has no tables")
        t, r, z = np.broadcast_arrays(
            np.asarray(t, dtype=float),
            np.asarray(r, dtype=float),
            np.asarray(z, dtype=float),
        )
        points = np.stack(
            [np.clip(t, 0.0, p.horizon), np.clip(r, 0.0, self.r_nodes[-1])], axis=-1
        )
        axes = (self.f_star.grid.nodes, self.r_nodes)
        base = RegularGridInterpolator(axes, self.theta_base)(points)
        index = RegularGridInterpolator(axes, self.theta_index)(points)
        return np.maximum(base + z * index, 0.0)


def _theta_direct(ctx: StrategyContext, t: float, r: float, z: float) -> McEstimate:
    p, c = ctx.params, ctx.constants
    s_nodes = nodes_from(ctx.f_star.grid, t)
    q1, q2 = phi_time_integrals(p, c, s_nodes, np.array([r]), ctx.f_star(s_nodes))
    sharpe = p.mu / p.sigma**2
    rest = 1 - p.lambda_
    quadrature = p.lambda_ * sharpe * q1[0] + rest * c.eta * sharpe * z * q2[0]
    varphi = varphi_bar(p, c, t, r, z, ctx.mc)
    scale = rest * c.eta * p.sigma_z / p.sigma
    value = quadrature + scale * varphi.value + rest * p.sigma_z * z / p.sigma
    return McEstimate(
        value=max(value, 0.0),
        std_error=scale * varphi.std_error,
        n_paths=varphi.n_paths,
    )


def theta_underperforming(
    ctx: StrategyContext, t: float, r: float, z: float
) -> McEstimate:
    """
    Optimal amount at dual state (t, r, z) from the four-term representation,
    with the stopped index integral estimated afresh.
    """
    if ctx.region != Region.UNDERPERFORMING:
        raise DomainError("Context is not on the underperforming branch")
    if r < 0 or z < 0:
        raise DomainError(f"Levels must be nonnegative: r={r}, z={z}")
    if not 0 <= t <= ctx.params.horizon:
        raise DomainError(f"Time {t} outside [0, {ctx.params.horizon}]")
    return _theta_direct(ctx, t, r, z)


class DualCurve(BaseModel):
    """x(r) and v(r) at fixed (t, z) on a grid of dual levels, common paths"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    t: float
    z: float
    r: np.ndarray
    x: np.ndarray
    x_se: np.ndarray
    v: np.ndarray
    v_se: np.ndarray

    def level_for(self, x: float) -> float:
        """Dual level of primal state x by monotone interpolation"""
        envelope = np.maximum.accumulate(self.x)
        return float(np.interp(x, envelope, self.r))


def dual_curve(
    ctx: StrategyContext,
    t: float,
    z: float,
    r_nodes: np.ndarray | None = None,
    paths: int = settings.strategy_paths,
) -> DualCurve:
    """x(r) and v(r) at (t, z) from one ensemble of `paths` paths per level"""
    p, c = ctx.params, ctx.constants
    mc = ctx.mc.replace(paths=min(ctx.mc.paths, paths))
    if r_nodes is None:
        r_hi = DUAL_GRID_MAX
        if ctx.r_nodes is not None:
            r_hi = max(ctx.r_nodes[-1], DUAL_GRID_MAX)
        r_nodes = np.linspace(0.0, r_hi, settings.r_grid_size)
    x, x_se, v, v_se = (np.zeros(len(r_nodes)) for _ in range(4))
    for m, r in enumerate(r_nodes):
        full, stopped = dual_integrals(p, c, t, float(r), z, ctx.f_star, mc)
        scale = np.exp(p.rho * t + r)
        x[m], x_se[m] = scale * stopped.value, scale * stopped.std_error
        v[m], v_se[m] = -full.value, full.std_error
    return DualCurve(
        t=t, z=z, r=np.asarray(r_nodes, dtype=float), x=x, x_se=x_se, v=v, v_se=v_se
    )


def value_u(
    ctx: StrategyContext,
    t: float,
    x: float,
    z: float,
    dual: DualCurve | None = None,
) -> float:
    """
    Primal value at (t, x, z): the infimum over dual levels of
    e^{rho t} v(t, r, z) + x e^{-r} on the underperforming region, 0 otherwise.
    """
    if x < 0:
        raise DomainError(f"State must be nonnegative: {x}")
    p = ctx.params
    if x >= boundary_x0(p, ctx.f_star, t, z):
        return 0.0
    if dual is None or dual.t != t or dual.z != z:
        dual = dual_curve(ctx, t, z)
    candidates = np.exp(p.rho * t) * dual.v + x * np.exp(-dual.r)
    return float(min(0.0, candidates.min()))


def theta_feedback(
    ctx: StrategyContext,
    t: float,
    x: float,
    z: float,
    dual: DualCurve | None = None,
) -> float:
    """Optimal amount as a function of the primal state (t, x, z)"""
    p, c = ctx.params, ctx.constants
    if x >= boundary_x0(p, ctx.f_star, t, z):
        return float(theta_outperforming(p, c, t, z))
    if dual is None or dual.t != t or dual.z != z:
        dual = dual_curve(ctx, t, z)
    return _theta_direct(ctx, t, dual.level_for(x), z).value


def value_w(ctx: StrategyContext, v0: float, z0: float) -> float:
    """Expected discounted largest shortfall of the agent from (v0, z0)"""
    rest = 1 - ctx.params.lambda_
    if v0 >= z0:
        return -value_u(ctx, 0.0, rest * (v0 - z0), z0)
    return -value_u(ctx, 0.0, 0.0, z0) + rest * (z0 - v0)


class SweepPoint(BaseModel):
    t: float
    z: float
    x: float
    theta: float
    shortfall: float
    """-u(t, x, z)"""
    region: Region


def sweep_x(
    ctx: StrategyContext, t: float, z: float, xs: Iterable[float]
) -> list[SweepPoint]:
    """Strategy and shortfall value over primal states at fixed (t, z)"""
    dual = dual_curve(ctx, t, z)
    boundary = boundary_x0(ctx.params, ctx.f_star, t, z)
    points = []
    for x in xs:
        region = Region.OUTPERFORMING if x >= boundary else Region.UNDERPERFORMING
        points.append(
            SweepPoint(
                t=t,
                z=z,
                x=x,
                theta=theta_feedback(ctx, t, x, z, dual),
                shortfall=-value_u(ctx, t, x, z, dual),
                region=region,
            )
        )
    return points


class WealthEnsemble(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: TimeGrid
    region: Region
    n_paths: int
    mean_gain: np.ndarray
    """E[V_t] - v0 per node"""
    se_gain: np.ndarray
    mean_theta: np.ndarray
    se_theta: np.ndarray
    shortfall: McEstimate
    """Largest shortfall at T"""
    x_gap: float
    """Largest mean gap between the reconstructed and the simulated state"""
    region_violations: float
    """Share of paths leaving their initial region beyond one grid cell"""
    min_X: float
    min_Y: float
    max_Y: float
    L_monotone: bool
    sample_paths: dict[str, np.ndarray] = Field(default_factory=dict)


def simulate_equilibrium_wealth(
    ctx: StrategyContext,
    v0: float,
    z0: float,
    grid: TimeGrid,
    mc: McConfig,
    keep: int = 100,
) -> WealthEnsemble:
    """
    Simulate the optimal wealth V, the state X from the path-dependent
    representation and from the reflected Euler scheme, and track the
    region of every path.
    """
    p, c = ctx.params, ctx.constants
    lam = p.lambda_
    t = grid.nodes
    dt = grid.dt
    drift = ctx.f_star(t)
    accumulated = cumulative_trapezoid(drift, dx=dt, initial=0.0)
    population = v0 + accumulated
    tail = accumulated[-1] - accumulated
    growth = np.expm1(c.eta * (p.horizon - t))
    r_start = ctx.r0 if ctx.region == Region.UNDERPERFORMING and ctx.r0 else 0.0
    x0 = max(0.0, (1 - lam) * (v0 - z0))
    rng: RngStream = mc.stream(Stream.WEALTH)

    gain, theta_stats, shortfall, gap = (SampleStats() for _ in range(4))
    violations = 0
    min_X, min_Y, max_Y = np.inf, np.inf, -np.inf
    monotone = True
    samples: dict[str, np.ndarray] = {}
    for chunk, size in mc.chunks():
        bundle = simulate_paths(p, c, grid, r_start, z0, rng, size, chunk)
        Z = bundle.Z
        theta = ctx.theta(t[None, :], bundle.R, Z)
        dW = bundle.dW
        dV = theta[:, :-1] * (p.mu * dt + p.sigma * dW)
        V = v0 + cumulate(dV)
        U = V - lam * population - (1 - lam) * Z
        shortfall_path = np.maximum.accumulate(np.maximum(-U, 0.0), axis=1)
        X = U + shortfall_path
        L = shortfall_path - shortfall_path[:, :1]
        driver = x0 + cumulate(
            dV
            - lam * drift[:-1] * dt
            - (1 - lam) * (p.mu_z * Z[:, :-1] * dt + p.sigma_z * Z[:, :-1] * dW)
        )
        X_euler, _ = skorokhod(driver)

        boundary = lam * tail + (1 - lam) * growth * Z
        slack = np.zeros_like(X)
        slack[:, 1:] = np.abs(np.diff(X, axis=1)) + np.abs(np.diff(boundary, axis=1))
        under = X[:, :1] < boundary[:, :1]
        left = np.where(under, X >= boundary + slack, X < boundary - slack)
        violations += int(left.any(axis=1).sum())

        gain.add(V - v0)
        theta_stats.add(theta)
        shortfall.add(shortfall_path[:, -1])
        gap.add(np.abs(X - X_euler))
        min_X = min(min_X, float(X.min()))
        min_Y = min(min_Y, float(bundle.Y.min()))
        max_Y = max(max_Y, float(bundle.Y.max()))
        monotone = monotone and bool(np.all(np.diff(L, axis=1) >= 0))
        if not samples:
            rows = slice(0, min(keep, size))
            samples = {
                "V": V[rows],
                "X": X[rows],
                "Z": Z[rows],
                "L": L[rows],
                "Y": bundle.Y[rows],
            }

    log.info(
        "Simulated equilibrium wealth",
        region=str(ctx.region),
        paths=gain.n,
        violations=violations,
    )
    return WealthEnsemble(
        grid=grid,
        region=ctx.region,
        n_paths=gain.n,
        mean_gain=gain.mean,
        se_gain=gain.std_error,
        mean_theta=theta_stats.mean,
        se_theta=theta_stats.std_error,
        shortfall=shortfall.estimate(),
        x_gap=float(gap.mean.max()),
        region_violations=violations / gain.n,
        min_X=min_X,
        min_Y=min_Y,
        max_Y=max_Y,
        L_monotone=monotone,
        sample_paths=samples,
    )


class ConsistencyReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: TimeGrid
    v0: float
    mean_gain: np.ndarray
    se_gain: np.ndarray
    mean_theta: np.ndarray
    se_theta: np.ndarray
    f_star: np.ndarray
    residual: np.ndarray
    """|mu E[theta_t] - f*(t)| per curve node"""
    residual_se: np.ndarray
    integrated_residual: np.ndarray
    """|E[V_t] - v0 - int_0^t f*| per curve node"""
    sup_residual: float
    tolerance: float
    passed: bool

    @property
    def relative(self) -> float:
        return self.sup_residual / max(np.abs(self.f_star).max(), 1e-300)

    def rows(self) -> Iterable[dict[str, Any]]:
        for i, t in enumerate(self.grid.nodes):
            yield {
                "t": float(t),
                "mean_V": float(self.v0 + self.mean_gain[i]),
                "se_V": float(self.se_gain[i]),
                "mean_theta": float(self.mean_theta[i]),
                "se_theta": float(self.se_theta[i]),
                "f_star": float(self.f_star[i]),
                "residual": float(self.residual[i]),
                "residual_se": float(self.residual_se[i]),
                "integrated_residual": float(self.integrated_residual[i]),
            }


def verify_consistency(
    ctx: StrategyContext,
    v0: float,
    z0: float,
    mc: McConfig,
    threshold: float = settings.verify_threshold,
    ensemble: WealthEnsemble | None = None,
) -> ConsistencyReport:
    """
    Compare mu E[theta_t] and E[V_t] - v0 with f* and its integral on the
    curve nodes. Passes iff the sup residual is below
    max(3 standard errors, threshold * |f*|).
    """
    p = ctx.params
    if ensemble is None:
        ensemble = simulate_equilibrium_wealth(ctx, v0, z0, mc.grid(p.horizon), mc)
    curve = ctx.f_star.grid
    idx = np.array([ensemble.grid.index(t) for t in curve.nodes])
    f_values = ctx.f_star.values
    mean_theta = ensemble.mean_theta[idx]
    se_theta = ensemble.se_theta[idx]
    residual = np.abs(p.mu * mean_theta - f_values)
    residual_se = p.mu * se_theta
    integrated = np.abs(ensemble.mean_gain[idx] - ctx.f_star.cumulative())
    sup = float(residual.max())
    tolerance = max(3 * float(residual_se.max()), threshold * ctx.f_star.sup_norm())
    passed = sup <= tolerance
    log.info(
        "Consistency check",
        region=str(ctx.region),
        sup_residual=sup,
        tolerance=tolerance,
        passed=passed,
    )
    return ConsistencyReport(
        grid=curve,
        v0=v0,
        mean_gain=ensemble.mean_gain[idx],
        se_gain=ensemble.se_gain[idx],
        mean_theta=mean_theta,
        se_theta=se_theta,
        f_star=f_values,
        residual=residual,
        residual_se=residual_se,
        integrated_residual=integrated,
        sup_residual=sup,
        tolerance=tolerance,
        passed=passed,
    )
