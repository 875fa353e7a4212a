"""
Path simulation: Brownian increments, the geometric index, the reflected dual
level via the discrete Skorokhod transform, local time, the dual path and the
hitting time of the boundary.
"""

from enum import IntEnum
from typing import Any, Generator, Self

import numpy as np
from anystore.io import smart_write_csv
from anystore.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mfg_tracking.exceptions import DomainError, GridMismatchError
from mfg_tracking.params import DerivedConstants, ModelParams

log = get_logger(__name__)

NEVER = -1
"""Hitting index of paths whose driver stays positive on the grid"""


class Stream(IntEnum):
    """Purpose ids of the random streams derived from one root seed"""

    KERNELS = 1
    RESIDUAL = 2
    WEALTH = 3
    STRATEGY = 4
    DUAL = 5
    NPLAYER = 6
    ORACLE = 7


class TimeGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    t_start: float = 0.0
    t_end: float
    n_steps: int = Field(ge=1)

    @model_validator(mode="after")
    def check_interval(self) -> Self:
        if not self.t_start < self.t_end:
            raise ValueError(f"Empty time grid: [{self.t_start}, {self.t_end}]")
        return self

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    def index(self, t: float) -> int:
        """Node index of `t`, which must lie on the grid"""
        k = round((t - self.t_start) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.t_start + k * self.dt - t) > 1e-9:
            raise GridMismatchError(f"Time {t} is not a node of {self}")
        return k

    def coarsen(self, stride: int) -> "TimeGrid":
        if stride < 1 or self.n_steps % stride:
            raise GridMismatchError(
                f"Stride {stride} does not divide {self.n_steps} steps"
            )
        return TimeGrid(
            t_start=self.t_start, t_end=self.t_end, n_steps=self.n_steps // stride
        )


class RngStream(BaseModel):
    """
    Counter based random streams: a stream and a chunk index select an
    independent Philox generator, so results do not depend on the order in
    which chunks are simulated.
    """

    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, lt=2**64)
    stream_id: int = Field(ge=0)
    key: tuple[int, ...] = ()

    def substream(self, *key: int) -> "RngStream":
        return RngStream(seed=self.seed, stream_id=self.stream_id, key=self.key + key)

    def generator(self, chunk: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(
            self.seed, spawn_key=(self.stream_id, *self.key, chunk)
        )
        return np.random.Generator(np.random.Philox(seq))


class PathBundle(BaseModel):
    """
    Paths on a grid, one row per path. `D` is the unreflected driver of the
    dual level, `R = D + L` its reflection and `Y = exp(-R)` the dual path.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dW: np.ndarray
    W: np.ndarray
    D: np.ndarray
    R: np.ndarray
    L: np.ndarray
    Y: np.ndarray
    tau_idx: np.ndarray
    Z: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.R.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def stop_idx(self) -> np.ndarray:
        """Hitting index with `NEVER` mapped to the last node"""
        return np.where(self.tau_idx == NEVER, self.n_steps, self.tau_idx)


def brownian_increments(
    grid: TimeGrid, n_paths: int, rng: RngStream, chunk: int = 0
) -> np.ndarray:
    gen = rng.generator(chunk)
    return gen.standard_normal((n_paths, grid.n_steps)) * np.sqrt(grid.dt)


def cumulate(dW: np.ndarray) -> np.ndarray:
    W = np.zeros((dW.shape[0], dW.shape[1] + 1))
    W[:, 1:] = np.cumsum(dW, axis=1)
    return W


def skorokhod(driver: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Discrete Skorokhod transform on [0, inf): the regulator is the running
    maximum of the negative part of the driver.
    """
    L = np.maximum.accumulate(np.maximum(-driver, 0.0), axis=1)
    return driver + L, L


def simulate_reflected(
    c: DerivedConstants,
    grid: TimeGrid,
    r: float | np.ndarray,
    rng: RngStream,
    n_paths: int,
    chunk: int = 0,
    dW: np.ndarray | None = None,
) -> PathBundle:
    """
    Simulate the reflected dual level started at `r` (a scalar or one start
    level per path) on `grid`.
    """
    level = np.asarray(r, dtype=float)
    if np.any(level < 0) or not np.all(np.isfinite(level)):
        raise DomainError(f"Dual level must be finite and nonnegative: {r}")
    if dW is None:
        dW = brownian_increments(grid, n_paths, rng, chunk)
    W = cumulate(dW)
    elapsed = grid.nodes - grid.t_start
    start = level.reshape(-1, 1) if level.ndim else level
    D = start + c.r_drift * elapsed + c.r_vol * W
    R, L = skorokhod(D)
    hit = D <= 0
    tau_idx = np.where(hit.any(axis=1), hit.argmax(axis=1), NEVER)
    return PathBundle(dW=dW, W=W, D=D, R=R, L=L, Y=np.exp(-R), tau_idx=tau_idx)


def simulate_gbm(
    p: ModelParams,
    grid: TimeGrid,
    z: float | np.ndarray,
    rng: RngStream,
    n_paths: int,
    chunk: int = 0,
    dW: np.ndarray | None = None,
) -> np.ndarray:
    """
    Exact log-Euler index paths. Called with the increments of a reflected
    bundle (or the same stream and chunk) both share one Brownian motion.
    """
    level = np.asarray(z, dtype=float)
    if np.any(level < 0):
        raise DomainError(f"Index level must be nonnegative: {z}")
    if dW is None:
        dW = brownian_increments(grid, n_paths, rng, chunk)
    log_steps = (p.mu_z - p.sigma_z**2 / 2) * grid.dt + p.sigma_z * dW
    start = level.reshape(-1, 1) if level.ndim else level
    return start * np.exp(cumulate(log_steps))


def simulate_paths(
    p: ModelParams,
    c: DerivedConstants,
    grid: TimeGrid,
    r: float | np.ndarray,
    z: float | np.ndarray,
    rng: RngStream,
    n_paths: int,
    chunk: int = 0,
) -> PathBundle:
    """Reflected level and index driven by common Brownian increments"""
    bundle = simulate_reflected(c, grid, r, rng, n_paths, chunk)
    Z = simulate_gbm(p, grid, z, rng, n_paths, dW=bundle.dW)
    return bundle.model_copy(update={"Z": Z})


def hitting_time_tau(bundle: PathBundle, grid: TimeGrid) -> np.ndarray:
    """First grid time the driver reaches 0, `t_end` if it never does"""
    if bundle.n_steps != grid.n_steps:
        raise GridMismatchError("Bundle was simulated on another grid")
    return grid.nodes[bundle.stop_idx]


def bridge_survival(
    bundle: PathBundle, c: DerivedConstants, grid: TimeGrid
) -> np.ndarray:
    """
    Conditional probability, given the grid values of the driver, that the
    continuous driver has not touched 0 up to each node. Between nodes the
    driver is a Brownian bridge, whose crossing law does not depend on drift.
    """
    D = bundle.D
    positive = (D[:, :-1] > 0) & (D[:, 1:] > 0)
    exponent = -2 * np.maximum(D[:, :-1], 0) * np.maximum(D[:, 1:], 0)
    exponent /= c.r_vol**2 * grid.dt
    stay = np.where(positive, -np.expm1(exponent), 0.0)
    survival = np.empty_like(D)
    survival[:, 0] = D[:, 0] > 0
    survival[:, 1:] = np.cumprod(stay, axis=1)
    survival[:, 1:] *= survival[:, :1]
    return survival


def chunk_sizes(
    n_paths: int, chunk_size: int
) -> Generator[tuple[int, int], None, None]:
    chunk = 0
    left = n_paths
    while left > 0:
        size = min(chunk_size, left)
        yield chunk, size
        chunk += 1
        left -= size


def _path_rows(
    bundle: PathBundle, grid: TimeGrid, path: int
) -> Generator[dict[str, Any], None, None]:
    Z = bundle.Z[path] if bundle.Z is not None else None
    for k, t in enumerate(grid.nodes):
        yield {
            "k": k,
            "t": float(t),
            "D": float(bundle.D[path, k]),
            "L": float(bundle.L[path, k]),
            "R": float(bundle.R[path, k]),
            "Y": float(bundle.Y[path, k]),
            "Z": float(Z[k]) if Z is not None else "",
        }


def dump_paths(bundle: PathBundle, grid: TimeGrid, uri: str, path: int = 0) -> None:
    """Write one path of a bundle as csv, one row per node"""
    if bundle.n_steps != grid.n_steps:
        raise GridMismatchError("Bundle was simulated on another grid")
    log.info("Dumping path", uri=str(uri), path=path, steps=grid.n_steps)
    smart_write_csv(uri, _path_rows(bundle, grid, path))
