from typing import Any, Callable, Generator, Self

import numpy as np
from anystore.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import cumulative_trapezoid

from mfg_tracking.exceptions import (
    BracketError,
    ConvergenceError,
    DomainError,
    GridMismatchError,
)
from mfg_tracking.settings import Settings
from mfg_tracking.stochastic import RngStream, Stream, TimeGrid, chunk_sizes

settings = Settings()
log = get_logger(__name__)


class McEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    std_error: float = Field(ge=0)
    n_paths: int = Field(ge=2)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> Self:
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        se = samples.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        return cls(value=float(samples.mean()), std_error=float(se), n_paths=n)

    @classmethod
    def exact(cls, value: float, n_paths: int = 2) -> Self:
        return cls(value=value, std_error=0.0, n_paths=max(n_paths, 2))

    def scaled(self, factor: float) -> "McEstimate":
        return McEstimate(
            value=self.value * factor,
            std_error=self.std_error * abs(factor),
            n_paths=self.n_paths,
        )

    def within(self, target: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.value - target) <= n_se * self.std_error + slack


class SampleStats:
    """
    Running sums of per-path samples over Monte-Carlo chunks. Samples are
    arrays with paths on the first axis and any trailing shape.
    """

    def __init__(self) -> None:
        self.n = 0
        self.total: np.ndarray | None = None
        self.total_sq: np.ndarray | None = None

    def add(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=float)
        total = samples.sum(axis=0)
        total_sq = np.square(samples).sum(axis=0)
        if self.total is None or self.total_sq is None:
            self.total, self.total_sq = total, total_sq
        else:
            self.total = self.total + total
            self.total_sq = self.total_sq + total_sq
        self.n += samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        if self.total is None:
            raise DomainError("No samples accumulated")
        return self.total / self.n

    @property
    def std_error(self) -> np.ndarray:
        if self.total_sq is None or self.n < 2:
            raise DomainError("At least two samples are needed")
        mean = self.mean
        var = np.maximum(self.total_sq / self.n - mean**2, 0.0) * self.n / (self.n - 1)
        return np.sqrt(var / self.n)

    def estimate(self) -> McEstimate:
        return McEstimate(
            value=float(self.mean), std_error=float(self.std_error), n_paths=self.n
        )


class McConfig(BaseModel):
    """Monte-Carlo and discretisation setup shared by all estimators"""

    model_config = ConfigDict(frozen=True)

    paths: int = Field(default=settings.paths, ge=2)
    steps: int = Field(default=settings.steps, ge=1)
    curve_steps: int = Field(default=settings.curve_steps, ge=1)
    seed: int = Field(default=settings.seed, ge=0)
    chunk_size: int = Field(default=settings.chunk_size, ge=2)
    bridge: bool = settings.bridge

    @model_validator(mode="after")
    def check_grids(self) -> Self:
        if self.steps % self.curve_steps:
            raise ValueError(
                f"curve_steps ({self.curve_steps}) must divide steps ({self.steps})"
            )
        return self

    @property
    def stride(self) -> int:
        return self.steps // self.curve_steps

    def grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(t_end=horizon, n_steps=self.steps)

    def curve_grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(t_end=horizon, n_steps=self.curve_steps)

    def sub_grid(self, t_start: float, t_end: float, horizon: float) -> TimeGrid:
        """Grid on [t_start, t_end] with (about) the step size of the full grid"""
        n = max(1, round(self.steps * (t_end - t_start) / horizon))
        return TimeGrid(t_start=t_start, t_end=t_end, n_steps=n)

    def chunks(self) -> Generator[tuple[int, int], None, None]:
        yield from chunk_sizes(self.paths, self.chunk_size)

    def stream(self, purpose: Stream) -> RngStream:
        return RngStream(seed=self.seed, stream_id=int(purpose))

    def replace(self, **changes: Any) -> "McConfig":
        return McConfig(**{**self.model_dump(), **changes})


class Curve(BaseModel):
    """A piecewise-linear function of time on a uniform grid"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: TimeGrid
    values: np.ndarray

    @model_validator(mode="after")
    def check_values(self) -> Self:
        if self.values.shape != (self.grid.n_steps + 1,):
            raise ValueError(
                f"Curve needs {self.grid.n_steps + 1} values, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Curve values must be finite")
        return self

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> Self:
        return cls(grid=grid, values=np.full(grid.n_steps + 1, float(value)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[np.ndarray], Any]) -> Self:
        values = np.asarray(fn(grid.nodes), dtype=float)
        values = np.broadcast_to(values, grid.nodes.shape)
        return cls(grid=grid, values=values.copy())

    def __call__(self, t: float | np.ndarray) -> np.ndarray:
        return np.interp(t, self.grid.nodes, self.values)

    def integral(self, t: float = 0.0) -> float:
        """Exact integral of the interpolant over [t, t_end]"""
        nodes = self.grid.nodes
        if t <= nodes[0]:
            return float(np.trapezoid(self.values, nodes))
        inside = nodes > t
        x = np.concatenate(([t], nodes[inside]))
        y = np.concatenate(([self(t)], self.values[inside]))
        return float(np.trapezoid(y, x))

    def cumulative(self, grid: TimeGrid | None = None) -> np.ndarray:
        """Integral from the grid start up to each node of `grid` (default own grid)"""
        grid = grid or self.grid
        return cumulative_trapezoid(self(grid.nodes), dx=grid.dt, initial=0.0)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def scaled(self, factor: float) -> "Curve":
        return Curve(grid=self.grid, values=self.values * factor)

    def distance(self, other: "Curve") -> float:
        check_same_grid(self.grid, other.grid)
        return float(np.abs(self.values - other.values).max())


def check_same_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise GridMismatchError(f"Grid mismatch: {a} != {b}")


def tail_weights(n_nodes: int, start: int, dt: float) -> np.ndarray:
    """Trapezoid weights of the nodes start..n_nodes-1"""
    weights = np.full(n_nodes - start, dt)
    weights[0] = weights[-1] = dt / 2
    if n_nodes - start == 1:
        weights[0] = 0.0
    return weights


def stopped_integral(
    integrand: np.ndarray,
    stop_idx: np.ndarray,
    dt: float,
    survival: np.ndarray | None = None,
) -> np.ndarray:
    """
    Per-path trapezoid integral of `integrand` up to the node `stop_idx`, or,
    with bridge survival weights, of the integrand weighted by the conditional
    probability of not having hit the boundary yet.
    """
    if survival is not None:
        return np.trapezoid(integrand * survival, dx=dt, axis=1)
    running = cumulative_trapezoid(integrand, dx=dt, axis=1, initial=0.0)
    return np.take_along_axis(running, stop_idx[:, None], axis=1)[:, 0]


class BisectionStep(BaseModel):
    iteration: int
    r: float
    x: float
    se: float


def bisect_level(
    fn: Callable[[float], McEstimate],
    target: float,
    tol_x: float = settings.tol_x,
    bracket_max: int = settings.bracket_max,
    r_hi: float = 1.0,
    max_iter: int = 60,
    scan_points: int = 9,
) -> tuple[float, list[BisectionStep]]:
    """
    Find a dual level r with fn(r) close to `target` for an (empirically)
    increasing `fn` with fn(0) = 0. The bracket is doubled until it contains
    the target, then bisected. A non-monotone probe switches once to a grid
    scan of the current bracket followed by bisection of the refined bracket.
    """
    trace: list[BisectionStep] = []

    def probe(r: float) -> McEstimate:
        est = fn(r)
        trace.append(
            BisectionStep(iteration=len(trace), r=r, x=est.value, se=est.std_error)
        )
        log.debug("Dual level probe", r=r, x=est.value, se=est.std_error)
        return est

    def matched(est: McEstimate) -> bool:
        return abs(est.value - target) < tol_x + 3 * est.std_error

    lo, x_lo = 0.0, probe(0.0)
    if matched(x_lo):
        return lo, trace
    hi, x_hi = r_hi, probe(r_hi)
    doublings = 0
    while not matched(x_hi) and x_hi.value < target:
        if doublings >= bracket_max:
            raise BracketError(
                f"Could not bracket target {target} below r={hi}",
                residual=target - x_hi.value,
            )
        lo, x_lo = hi, x_hi
        hi *= 2
        x_hi = probe(hi)
        doublings += 1
    if matched(x_hi):
        return hi, trace

    scanned = False
    for _ in range(max_iter):
        mid = (lo + hi) / 2
        x_mid = probe(mid)
        if matched(x_mid):
            return mid, trace
        if not x_lo.value <= x_mid.value <= x_hi.value:
            if scanned:
                raise ConvergenceError(
                    "Dual level map is not monotone on the bracket",
                    residual=abs(x_mid.value - target),
                )
            log.warning("Non-monotone dual level probe, scanning", lo=lo, hi=hi)
            lo, x_lo, hi, x_hi = _scan(probe, target, lo, hi, scan_points)
            scanned = True
            continue
        if x_mid.value < target:
            lo, x_lo = mid, x_mid
        else:
            hi, x_hi = mid, x_mid
    raise ConvergenceError(
        f"Dual level search did not converge after {max_iter} bisections",
        residual=abs(x_mid.value - target),
    )


def _scan(
    probe: Callable[[float], McEstimate],
    target: float,
    lo: float,
    hi: float,
    points: int,
) -> tuple[float, McEstimate, float, McEstimate]:
    levels = np.linspace(lo, hi, points)
    values = [probe(float(r)) for r in levels]
    for k in range(points - 1):
        if values[k].value <= target <= values[k + 1].value:
            return float(levels[k]), values[k], float(levels[k + 1]), values[k + 1]
    raise BracketError(f"Grid scan of [{lo}, {hi}] does not bracket {target}")


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Trapezoid weights of (possibly non-uniform) increasing nodes"""
    weights = np.zeros(len(nodes))
    if len(nodes) < 2:
        return weights
    gaps = np.diff(nodes)
    weights[:-1] += gaps / 2
    weights[1:] += gaps / 2
    return weights


def nodes_from(grid: TimeGrid, t: float) -> np.ndarray:
    """`t` followed by the grid nodes after it"""
    nodes = grid.nodes
    return np.concatenate(([t], nodes[nodes > t + 1e-12]))
