"""
Fixed point of the consistency map and the dual-primal inversion that yield
the mean-field equilibrium drift f*.
"""

from enum import StrEnum
from typing import Self

import numpy as np
from anystore.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mfg_tracking.exceptions import ConvergenceError, DomainError
from mfg_tracking.params import (
    DerivedConstants,
    ModelParams,
    derive_constants,
    threshold_hat_x0,
)
from mfg_tracking.settings import Settings
from mfg_tracking.solver.kernels import KernelTable, build_kernel_table, dual_integrals
from mfg_tracking.solver.util import (
    BisectionStep,
    Curve,
    McConfig,
    McEstimate,
    bisect_level,
    check_same_grid,
)
from mfg_tracking.stochastic import Stream, TimeGrid

settings = Settings()
log = get_logger(__name__)


class Region(StrEnum):
    OUTPERFORMING = "outperforming"
    UNDERPERFORMING = "underperforming"


class SolveConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mc: McConfig = McConfig()
    tol: float = Field(default=settings.tol, gt=0)
    tol_x: float = Field(default=settings.tol_x, gt=0)
    max_iter: int = Field(default=settings.max_iter, ge=1)
    bracket_max: int = Field(default=settings.bracket_max, ge=0)


class FixedPoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    curve: Curve
    residuals: list[float]
    """Sup-norm distance of successive iterates"""
    scheme: str
    """`picard` or `backward`"""
    modulus: float
    """Row-sum norm of the weighted kernel"""


class MfeResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    f_star: Curve
    region: Region
    r_star: float | None = None
    x0: float
    z0: float
    x_hat0: float
    residual: float = 0.0
    """Sup-norm of J f* - f* with freshly resampled kernels"""
    residual_se: float = 0.0
    """Standard error of the resampled residual, both ensembles"""
    in_sample_residual: float = 0.0
    certified: bool = True
    degenerate: bool = False
    """f* vanishes identically (lambda = 1 or z0 = 0)"""
    trace: list[BisectionStep] = []
    mc: McConfig

    @model_validator(mode="after")
    def check_branch(self) -> Self:
        outperforming = self.x0 >= self.x_hat0
        if outperforming != (self.region == Region.OUTPERFORMING):
            raise ValueError(
                f"Region {self.region} inconsistent with x0={self.x0}, "
                f"x_hat0={self.x_hat0}"
            )
        if (self.r_star is not None) != (self.region == Region.UNDERPERFORMING):
            raise ValueError("A dual level is present iff underperforming")
        if not self.degenerate and not np.all(self.f_star.values > 0):
            raise ValueError("Equilibrium drift must be positive")
        return self

    @property
    def meta(self) -> dict[str, float | str | bool | None]:
        return {
            "region": str(self.region),
            "r_star": self.r_star,
            "x0": self.x0,
            "z0": self.z0,
            "x_hat0": self.x_hat0,
            "residual": self.residual,
            "residual_se": self.residual_se,
            "in_sample_residual": self.in_sample_residual,
            "certified": self.certified,
            "degenerate": self.degenerate,
        }


def closed_form_drift(
    p: ModelParams, c: DerivedConstants, z0: float, grid: TimeGrid
) -> Curve:
    """Equilibrium drift on the outperforming branch"""
    coef = (1 - p.lambda_) * p.sigma_z * p.mu / p.sigma
    return Curve.from_function(
        grid,
        lambda t: coef * np.exp(c.eta * (p.horizon - t) + p.mu_z * t) * z0,
    )


def apply_J(f: Curve, r: float, z: float, kt: KernelTable) -> Curve:
    kt.check(f.grid, r, z)
    return Curve(grid=f.grid, values=kt.operator @ f.values + kt.H_values)


def _se_at(kt: KernelTable, f: Curve, node: int) -> float:
    return float(
        np.sqrt(kt.H_se[node] ** 2 + np.sum((kt.operator_se[node] * f.values) ** 2))
    )


def residual_of(
    f: Curve, kt: KernelTable, reference: KernelTable | None = None
) -> tuple[float, float]:
    """
    Sup-norm of J f - f and the standard error of J f at the worst node. If f
    was solved on `reference`, that table's noise is added to the error.
    """
    values = kt.operator @ f.values + kt.H_values
    diff = np.abs(values - f.values)
    worst = int(diff.argmax())
    se = _se_at(kt, f, worst)
    if reference is not None:
        se = float(np.hypot(se, _se_at(reference, f, worst)))
    return float(diff[worst]), se


def _picard(
    kt: KernelTable, init: np.ndarray, tol: float, max_iter: int
) -> tuple[np.ndarray, list[float], bool]:
    operator = kt.operator
    values = init
    residuals: list[float] = []
    for _ in range(max_iter):
        update = operator @ values + kt.H_values
        diff = float(np.abs(update - values).max())
        residuals.append(diff)
        values = update
        log.debug("Picard iteration", iteration=len(residuals), residual=diff)
        if diff < tol * (1 + np.abs(values).max()):
            return values, residuals, True
    return values, residuals, False


def _blocks(operator: np.ndarray, bound: float = 0.5) -> list[tuple[int, int]]:
    """Partition nodes backwards into blocks on which the kernel contracts"""
    size = len(operator)
    blocks = []
    end = size
    while end > 0:
        start = end - 1
        while start > 0:
            block = operator[start - 1 : end, start - 1 : end]
            if block.sum(axis=1).max() >= bound:
                break
            start -= 1
        blocks.append((start, end))
        end = start
    return blocks


def _backward(
    kt: KernelTable, tol: float, max_iter: int
) -> tuple[np.ndarray, list[float], bool]:
    """
    Solve block by block from T backwards, each block a contraction given the
    already solved later values.
    """
    operator = kt.operator
    values = kt.H_values.copy()
    residuals: list[float] = []
    converged = True
    for start, end in _blocks(operator):
        block = operator[start:end, start:end]
        known = operator[start:end, end:] @ values[end:] + kt.H_values[start:end]
        local = values[start:end]
        for _ in range(max_iter):
            update = block @ local + known
            diff = float(np.abs(update - local).max())
            local = update
            if diff < tol * (1 + np.abs(local).max()):
                break
        else:
            converged = False
        residuals.append(diff)
        values[start:end] = local
    return values, residuals, converged


def solve_fixed_point(
    p: ModelParams,
    r: float,
    z: float,
    mc: McConfig,
    tol: float = settings.tol,
    max_iter: int = settings.max_iter,
    kt: KernelTable | None = None,
    init: Curve | None = None,
) -> FixedPoint:
    """
    Picard iteration of the consistency map started at H (or `init`), with
    the backward block scheme as fallback.
    """
    if r < 0 or z < 0:
        raise DomainError(f"Levels must be nonnegative: r={r}, z={z}")
    kt = kt or build_kernel_table(p, r, z, mc)
    if init is not None:
        check_same_grid(init.grid, kt.grid)
    start = init.values if init is not None else kt.H_values
    modulus = kt.contraction_modulus()
    values, residuals, converged = _picard(kt, start, tol, max_iter)
    scheme = "picard"
    if not converged:
        log.warning(
            "Picard iteration stalled, switching to backward scheme",
            r=r,
            z=z,
            residual=residuals[-1],
            modulus=modulus,
        )
        values, residuals, converged = _backward(kt, tol, max_iter)
        scheme = "backward"
    curve = Curve(grid=kt.grid, values=values)
    residual, _ = residual_of(curve, kt)
    if not converged or residual >= tol * (1 + curve.sup_norm()):
        raise ConvergenceError(
            f"Fixed point did not converge at r={r}, z={z}", residual=residual
        )
    log.debug(
        "Fixed point",
        r=r,
        z=z,
        scheme=scheme,
        iterations=len(residuals),
        modulus=modulus,
    )
    return FixedPoint(curve=curve, residuals=residuals, scheme=scheme, modulus=modulus)


def x_of_r(
    p: ModelParams, r: float, z: float, f: Curve, mc: McConfig
) -> McEstimate:
    """
    Initial auxiliary state matching dual level r: e^r v_r(0, r, z) with the
    exponential applied pathwise. Uses the kernel stream, so the paths are
    those the kernel table of (r, z) was estimated from.
    """
    if r < 0 or z < 0:
        raise DomainError(f"Levels must be nonnegative: r={r}, z={z}")
    c = derive_constants(p)
    _, stopped = dual_integrals(p, c, 0.0, r, z, f, mc, shift=r, stream=Stream.KERNELS)
    return stopped


def find_r_for_x(
    p: ModelParams, x: float, z: float, cfg: SolveConfig
) -> tuple[float, FixedPoint, list[BisectionStep]]:
    """
    Bisection on the dual level over an expanding bracket, re-solving the
    fixed point at every probe.
    """
    x_hat = threshold_hat_x0(p, z)
    if x < 0 or x >= x_hat:
        raise DomainError(
            f"State x={x} is not in the underperforming range [0, {x_hat})"
        )
    fixed: dict[float, FixedPoint] = {}

    def evaluate(r: float) -> McEstimate:
        if r == 0:
            return McEstimate.exact(0.0, cfg.mc.paths)
        fixed[r] = solve_fixed_point(p, r, z, cfg.mc, cfg.tol, cfg.max_iter)
        return x_of_r(p, r, z, fixed[r].curve, cfg.mc)

    r, trace = bisect_level(evaluate, x, cfg.tol_x, cfg.bracket_max)
    if r not in fixed:
        fixed[r] = solve_fixed_point(p, r, z, cfg.mc, cfg.tol, cfg.max_iter)
    log.info("Dual level found", x=x, z=z, r=r, probes=len(trace))
    return r, fixed[r], trace


def solve_mfe(
    p: ModelParams,
    x0: float,
    z0: float,
    cfg: SolveConfig | None = None,
    c: DerivedConstants | None = None,
) -> MfeResult:
    if x0 < 0 or z0 < 0:
        raise DomainError(f"Initial state must be nonnegative: x0={x0}, z0={z0}")
    cfg = cfg or SolveConfig()
    c = c or derive_constants(p)
    x_hat = threshold_hat_x0(p, z0)
    grid = cfg.mc.curve_grid(p.horizon)
    if x0 >= x_hat:
        f_star = closed_form_drift(p, c, z0, grid)
        degenerate = not bool(np.all(f_star.values > 0))
        log.info(
            "Outperforming equilibrium",
            x0=x0,
            z0=z0,
            x_hat0=x_hat,
            degenerate=degenerate,
        )
        return MfeResult(
            f_star=f_star,
            region=Region.OUTPERFORMING,
            x0=x0,
            z0=z0,
            x_hat0=x_hat,
            degenerate=degenerate,
            mc=cfg.mc,
        )

    r_star, fixed, trace = find_r_for_x(p, x0, z0, cfg)
    f_star = fixed.curve
    table = build_kernel_table(p, r_star, z0, cfg.mc)
    in_sample, _ = residual_of(f_star, table)
    fresh = build_kernel_table(p, r_star, z0, cfg.mc, Stream.RESIDUAL)
    residual, residual_se = residual_of(f_star, fresh, reference=table)
    certified = (
        residual < cfg.tol * (1 + f_star.sup_norm()) or residual <= 3 * residual_se
    )
    log.info(
        "Underperforming equilibrium",
        x0=x0,
        z0=z0,
        r_star=r_star,
        residual=residual,
        residual_se=residual_se,
        certified=certified,
    )
    if not certified:
        log.warning("Out-of-sample residual exceeds tolerance", residual=residual)
    return MfeResult(
        f_star=f_star,
        region=Region.UNDERPERFORMING,
        r_star=r_star,
        x0=x0,
        z0=z0,
        x_hat0=x_hat,
        residual=residual,
        residual_se=residual_se,
        in_sample_residual=in_sample,
        certified=certified,
        trace=trace,
        mc=cfg.mc,
    )
