from typing import Any, Iterable, Literal

import numpy as np
from anystore.decorators import error_handler
from anystore.io import logged_items
from anystore.logging import get_logger
from banal import ensure_list
from pydantic import BaseModel

from mfg_tracking.config import RunConfig
from mfg_tracking.exceptions import DomainError, VerificationError
from mfg_tracking.io import RunMetadata, write_table
from mfg_tracking.params import initial_auxiliary_state, threshold_hat_x0
from mfg_tracking.settings import Settings
from mfg_tracking.solver.kernels import build_kernel_table
from mfg_tracking.solver.mfe import (
    MfeResult,
    Region,
    solve_fixed_point,
    solve_mfe,
    x_of_r,
)
from mfg_tracking.solver.nplayer import (
    NashGapReport,
    agent_contexts,
    estimate_gap,
    make_agents,
)
from mfg_tracking.solver.strategy import (
    ConsistencyReport,
    StrategyContext,
    simulate_equilibrium_wealth,
    sweep_x,
    value_w,
    verify_consistency,
)
from mfg_tracking.solver.util import McEstimate

log = get_logger(__name__)
settings = Settings()

SweepParam = Literal["lambda", "sigma_z"]

DEFAULT_R_LIST = (1e-3, 0.01, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0)
DEFAULT_N_LIST = (2, 10, 50, 200)


def solve(config: RunConfig) -> MfeResult:
    return solve_mfe(
        config.params, config.state.x0, config.state.z0, config.solve_config()
    )


def run_solve(config: RunConfig) -> MfeResult:
    """
    Solve the equilibrium and write `f_star.csv` and, on the underperforming
    branch, the dual level search trace `bisection.csv` and the kernel table
    at r* `kernels.csv`.
    """
    mfe = solve(config)
    meta = RunMetadata.from_config("solve", config, **mfe.meta)
    rows = (
        {"t": float(t), "f_star": float(f)}
        for t, f in zip(mfe.f_star.grid.nodes, mfe.f_star.values)
    )
    write_table(config.out_dir, "f_star.csv", rows, meta)
    if mfe.region == Region.UNDERPERFORMING:
        write_table(
            config.out_dir, "bisection.csv", (s.model_dump() for s in mfe.trace), meta
        )
        table = build_kernel_table(config.params, mfe.r_star, mfe.z0, mfe.mc)
        write_table(config.out_dir, "kernels.csv", table.to_rows(), meta)
    return mfe


def dual_level_curve(config: RunConfig, r_list: Iterable[float]) -> list[McEstimate]:
    """x(r) at the configured index level, one fixed point per level"""
    p, z0 = config.params, config.state.z0
    mc = config.mc()
    levels = sorted(float(r) for r in r_list)
    if any(r < 0 for r in levels):
        raise DomainError(f"Dual levels must be nonnegative: {levels}")
    estimates = []
    for r in logged_items(levels, "Solve", 1, item_name="Level", logger=log):
        fixed = solve_fixed_point(p, r, z0, mc, config.tol, config.max_iter)
        estimates.append(x_of_r(p, r, z0, fixed.curve, mc))
    return estimates


def run_curve(
    config: RunConfig, r_list: Iterable[float] = DEFAULT_R_LIST
) -> list[dict[str, float]]:
    levels = sorted(float(r) for r in r_list)
    estimates = dual_level_curve(config, levels)
    rows = [
        {"r": r, "x": est.value, "se": est.std_error}
        for r, est in zip(levels, estimates)
    ]
    x_hat = threshold_hat_x0(config.params, config.state.z0)
    meta = RunMetadata.from_config("curve", config, x_hat0=x_hat)
    write_table(config.out_dir, "x_of_r.csv", rows, meta)
    return rows


def run_verify(
    config: RunConfig,
    perturb: float = 1.0,
    threshold: float = settings.verify_threshold,
) -> ConsistencyReport:
    """
    Solve, simulate the equilibrium wealth and compare with f* (optionally
    the strategy responds to f* * perturb). Raises after writing the report
    if the check fails.
    """
    p = config.params
    mfe = solve(config)
    mc = config.mc()
    ctx = StrategyContext.from_mfe(p, mfe)
    if perturb != 1.0:
        ctx = ctx.perturbed(perturb)
    ensemble = simulate_equilibrium_wealth(
        ctx, config.state.v0, config.state.z0, mc.grid(p.horizon), mc
    )
    report = verify_consistency(
        ctx, config.state.v0, config.state.z0, mc, threshold, ensemble
    )
    meta = RunMetadata.from_config(
        "verify",
        config,
        perturb=perturb,
        sup_residual=report.sup_residual,
        tolerance=report.tolerance,
        passed=report.passed,
        region_violations=ensemble.region_violations,
        shortfall=ensemble.shortfall.value,
        **mfe.meta,
    )
    write_table(config.out_dir, "consistency.csv", report.rows(), meta)
    if not report.passed:
        raise VerificationError(
            f"Consistency residual {report.sup_residual:.4g} exceeds "
            f"{report.tolerance:.4g}",
            residual=report.sup_residual,
        )
    return report


def nplayer_study(
    config: RunConfig,
    n_list: Iterable[int] = DEFAULT_N_LIST,
    delta: float = settings.nplayer_delta,
    paths: int = settings.nplayer_paths,
    deviators: int = settings.deviating_agents,
    mfe: MfeResult | None = None,
) -> list[tuple[NashGapReport, list[dict[str, Any]]]]:
    p, x0, z0 = config.params, config.state.x0, config.state.z0
    mfe = mfe or solve(config)
    mc = config.mc().replace(paths=paths)
    base = StrategyContext.from_mfe(p, mfe, mc=mc)
    results = []
    for n in ensure_list(n_list):
        agents = make_agents(p, int(n), delta, seed=config.seed)
        contexts = agent_contexts(agents, mfe, x0, z0, mc, base=base)
        report = estimate_gap(
            agents, mfe, x0, z0, mc, contexts=contexts, deviators=deviators
        )
        results.append((report, [a.row(int(n)) for a in agents]))
    return results


def run_nplayer(
    config: RunConfig,
    n_list: Iterable[int] = DEFAULT_N_LIST,
    delta: float = settings.nplayer_delta,
    paths: int = settings.nplayer_paths,
    deviators: int = settings.deviating_agents,
) -> list[NashGapReport]:
    """
    Nash gap study over player counts; writes `nplayer.csv`, the agent
    parameter table `agents.csv` and one summary row per n in
    `nplayer_summary.csv`.
    """
    results = nplayer_study(config, n_list, delta, paths, deviators)
    reports = [r for r, _ in results]
    meta = RunMetadata.from_config(
        "nplayer", config, delta=delta, nplayer_paths=paths, deviators=deviators
    )
    write_table(
        config.out_dir,
        "nplayer.csv",
        (row for report in reports for row in report.csv_rows()),
        meta,
    )
    write_table(
        config.out_dir, "agents.csv", (row for _, rows in results for row in rows), meta
    )
    summary = [
        {
            "n": report.n,
            "gap_bound": report.gap_bound,
            "equilibrium_bound": report.equilibrium_bound,
            "drift_error": report.drift_error,
            "drift_se": report.drift_se,
            "drift_rmse": report.drift_rmse,
            "c0": report.c0,
        }
        for report in reports
    ]
    write_table(config.out_dir, "nplayer_summary.csv", summary, meta)
    bounds = [report.gap_bound for report in reports]
    if any(b > a for a, b in zip(bounds, bounds[1:])):
        log.warning("Gap bounds are not decreasing in n", bounds=bounds)
    errors = [report.drift_rmse for report in reports]
    if any(b > a for a, b in zip(errors, errors[1:])):
        log.warning("Population drift is not converging in n", errors=errors)
    return reports


class SweepRow(BaseModel):
    param: str
    value: float
    t: float
    z: float
    x: float
    theta: float
    shortfall: float
    w: float
    region: Region
    r_star: float | None


@error_handler(logger=log)
def sweep_value(
    config: RunConfig,
    param: SweepParam,
    value: float,
    t: float,
    z: float,
    xs: list[float],
) -> list[SweepRow]:
    p = config.params.replace(**{param: value})
    state = initial_auxiliary_state(p, config.state.v0, config.state.z0)
    mfe = solve_mfe(p, state.x0, state.z0, config.solve_config())
    ctx = StrategyContext.from_mfe(p, mfe)
    w = value_w(ctx, state.v0, state.z0)
    return [
        SweepRow(
            param=param,
            value=value,
            t=point.t,
            z=point.z,
            x=point.x,
            theta=point.theta,
            shortfall=point.shortfall,
            w=w,
            region=point.region,
            r_star=mfe.r_star,
        )
        for point in sweep_x(ctx, t, z, xs)
    ]


def sweep_parameter(
    config: RunConfig,
    param: SweepParam,
    values: Iterable[float],
    t: float = 0.5,
    z: float | None = None,
    xs: Iterable[float] | None = None,
) -> list[SweepRow]:
    """
    Re-solve the equilibrium for every value of `param` (the initial wealth
    is kept) and evaluate strategy and shortfall on an x grid at (t, z).
    Monotonicity in the parameter is logged, not enforced.
    """
    if param not in ("lambda", "sigma_z"):
        raise DomainError(f"Cannot sweep `{param}`")
    z = config.state.z0 if z is None else z
    xs = [float(x) for x in xs] if xs is not None else [config.state.x0]
    rows: list[SweepRow] = []
    for value in sorted(float(v) for v in values):
        result = sweep_value(config, param, value, t, z, xs)
        if result is None:
            log.error("Sweep value failed", param=param, value=value)
            continue
        rows.extend(result)
    for x in xs:
        thetas = [row.theta for row in rows if row.x == x]
        if np.any(np.diff(thetas) > 0):
            log.warning(
                "Strategy is not nonincreasing in the parameter", param=param, x=x
            )
        shortfalls = [row.shortfall for row in rows if row.x == x]
        if np.any(np.diff(shortfalls) > 0):
            log.warning(
                "Expected shortfall is not decreasing in the parameter",
                param=param,
                x=x,
            )
    return rows


def run_sweep(
    config: RunConfig,
    param: SweepParam,
    values: Iterable[float],
    t: float = 0.5,
    z: float | None = None,
    xs: Iterable[float] | None = None,
) -> list[SweepRow]:
    rows = sweep_parameter(config, param, values, t, z, xs)
    meta = RunMetadata.from_config("sweep", config, param=param, t=t)
    write_table(
        config.out_dir, "sweep.csv", (row.model_dump(mode="json") for row in rows), meta
    )
    return rows
