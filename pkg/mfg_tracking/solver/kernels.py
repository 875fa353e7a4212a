"""
Monte-Carlo and quadrature estimators of the consistency map kernels G and H,
the stopped index integral varphi, the transformed value function v and its
first two derivatives in the dual level.

All expectations over the dual level use the same path ensemble as the index
expectations: one Brownian motion drives both.
"""

from typing import Any, Iterable, Self

import numpy as np
from anystore.io import logged_items
from anystore.logging import get_logger
from cachetools import LRUCache, cached
from cachetools.keys import hashkey
from pydantic import BaseModel, ConfigDict
from scipy.integrate import cumulative_trapezoid

from mfg_tracking.exceptions import DomainError, GridMismatchError
from mfg_tracking.params import DerivedConstants, ModelParams, derive_constants
from mfg_tracking.solver.density import inner_phi_integral_closed
from mfg_tracking.solver.util import (
    Curve,
    McConfig,
    McEstimate,
    SampleStats,
    nodes_from,
    stopped_integral,
    tail_weights,
    trapezoid_weights,
)
from mfg_tracking.stochastic import (
    PathBundle,
    RngStream,
    Stream,
    TimeGrid,
    bridge_survival,
    simulate_paths,
)

log = get_logger(__name__)


class KernelWeights(BaseModel):
    """Scalar prefactors of G and H"""

    model_config = ConfigDict(frozen=True)

    g: float
    exponent: float
    h_quadrature: float
    h_varphi: float
    h_index: float

    @classmethod
    def from_params(cls, p: ModelParams, c: DerivedConstants) -> Self:
        sharpe2 = (p.mu / p.sigma) ** 2
        rest = 1 - p.lambda_
        return cls(
            g=p.lambda_ * sharpe2,
            exponent=1 - p.sigma * p.sigma_z / p.mu,
            h_quadrature=rest * c.eta * sharpe2,
            h_varphi=rest * c.eta * p.sigma_z * p.mu / p.sigma,
            h_index=rest * p.sigma_z * p.mu / p.sigma,
        )


class KernelTable(BaseModel):
    """
    G(r, s_j, t_i) for t_i <= s_j (NaN below the diagonal) and H(r, z, t_i) on
    the curve grid, with standard errors.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: TimeGrid
    r_level: float
    z_level: float
    G_values: np.ndarray
    G_se: np.ndarray
    H_values: np.ndarray
    H_se: np.ndarray
    n_paths: int

    @property
    def size(self) -> int:
        return self.grid.n_steps + 1

    @property
    def operator(self) -> np.ndarray:
        """Trapezoid-weighted kernel matrix, strictly upper triangular"""
        matrix = np.zeros((self.size, self.size))
        for i in range(self.size):
            weights = tail_weights(self.size, i, self.grid.dt)
            matrix[i, i:] = weights * self.G_values[i, i:]
        return matrix

    @property
    def operator_se(self) -> np.ndarray:
        matrix = np.zeros((self.size, self.size))
        for i in range(self.size):
            matrix[i, i:] = tail_weights(self.size, i, self.grid.dt) * self.G_se[i, i:]
        return matrix

    def contraction_modulus(self) -> float:
        """Row-sum norm of the weighted kernel"""
        return float(self.operator.sum(axis=1).max())

    def check(self, grid: TimeGrid, r: float, z: float) -> None:
        if grid != self.grid:
            raise GridMismatchError(f"Kernel table grid {self.grid} != {grid}")
        if not (np.isclose(r, self.r_level) and np.isclose(z, self.z_level)):
            raise DomainError(
                f"Kernel table built for (r={self.r_level}, z={self.z_level}), "
                f"not (r={r}, z={z})"
            )

    def to_rows(self) -> Iterable[dict[str, Any]]:
        nodes = self.grid.nodes
        for i in range(self.size):
            for j in range(i, self.size):
                yield {
                    "r": self.r_level,
                    "z": self.z_level,
                    "t": float(nodes[i]),
                    "s": float(nodes[j]),
                    "G": float(self.G_values[i, j]),
                    "G_se": float(self.G_se[i, j]),
                    "H": float(self.H_values[i]),
                    "H_se": float(self.H_se[i]),
                }


def _check_time(p: ModelParams, *times: float) -> None:
    for t in times:
        if not 0 <= t <= p.horizon:
            raise DomainError(f"Time {t} outside [0, {p.horizon}]")


def _check_levels(r: float, z: float = 0.0) -> None:
    if r < 0 or z < 0:
        raise DomainError(f"Levels must be nonnegative: r={r}, z={z}")


def _inner(
    c: DerivedConstants, lags: np.ndarray, levels: np.ndarray, a: float
) -> np.ndarray:
    """Inner phi integrals on a (levels, lags) table"""
    return inner_phi_integral_closed(c, lags[None, :], np.asarray(levels)[:, None], a)


def phi_time_integrals(
    p: ModelParams,
    c: DerivedConstants,
    s_nodes: np.ndarray,
    levels: np.ndarray,
    f_values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    The two phi-weighted time integrals over s_nodes[0] <= s <= T used by the
    kernel H, the optimal strategy and the second dual derivative, for each of
    `levels`:

        Q1 = int e^{-rho (s-t)} I(s-t, r, 1) f(s) ds
        Q2 = int e^{-(rho-kappa)(s-t)} I(s-t, r, 1 - sigma sigma_z / mu) ds

    The s = t endpoint is assigned its limit 0.
    """
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    weights = KernelWeights.from_params(p, c)
    if len(s_nodes) < 2:
        zeros = np.zeros(levels.shape)
        return zeros, zeros.copy()
    lags = s_nodes - s_nodes[0]
    quad = trapezoid_weights(s_nodes)
    q1 = _inner(c, lags, levels, 1.0) @ (quad * np.exp(-p.rho * lags) * f_values)
    q2 = _inner(c, lags, levels, weights.exponent) @ (
        quad * np.exp(-(p.rho - c.kappa) * lags)
    )
    return q1, q2


def flow_varphi(
    bundle: PathBundle,
    grid: TimeGrid,
    rho: float,
    start_idx: np.ndarray,
    shift: float = 0.0,
) -> np.ndarray:
    """
    varphi(t_k, R_k, Z_k) for every path and every start node k, from the
    path itself: after t_k the reflected level coincides with the level
    restarted at R_k until its next zero on the grid.
    """
    if bundle.Z is None:
        raise DomainError("Bundle has no index paths")
    n_nodes = grid.n_steps + 1
    integrand = np.exp(-rho * grid.nodes - (bundle.R - shift)) * bundle.Z
    running = cumulative_trapezoid(integrand, dx=grid.dt, axis=1, initial=0.0)
    marks = np.where(bundle.R == 0, np.arange(n_nodes), grid.n_steps)
    next_zero = np.minimum.accumulate(marks[:, ::-1], axis=1)[:, ::-1]
    stop = np.take_along_axis(running, next_zero[:, start_idx], axis=1)
    start = running[:, start_idx]
    scale = np.exp(rho * grid.nodes[start_idx] + bundle.R[:, start_idx] - shift)
    return scale * (stop - start)


def _stopped_varphi(
    bundle: PathBundle,
    grid: TimeGrid,
    p: ModelParams,
    c: DerivedConstants,
    bridge: bool,
) -> np.ndarray:
    """varphi samples of a bundle simulated on [t, T] from its first node"""
    lag = grid.nodes - grid.t_start
    integrand = np.exp(-p.rho * lag - (bundle.R - bundle.R[:, :1])) * bundle.Z
    survival = bridge_survival(bundle, c, grid) if bridge else None
    return stopped_integral(integrand, bundle.stop_idx, grid.dt, survival)


def _state_at(
    p: ModelParams,
    c: DerivedConstants,
    r: float,
    z: float,
    t: float,
    mc: McConfig,
    rng: RngStream,
    chunk: int,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of (R_t, Z_t) started at (r, z) at time 0"""
    if t <= 0:
        return np.full(size, float(r)), np.full(size, float(z))
    grid = mc.sub_grid(0.0, t, p.horizon)
    bundle = simulate_paths(p, c, grid, r, z, rng, size, chunk)
    return bundle.R[:, -1], bundle.Z[:, -1]


def kernel_G(
    p: ModelParams,
    c: DerivedConstants,
    r: float,
    s: float,
    t: float,
    mc: McConfig,
    stream: Stream = Stream.KERNELS,
) -> McEstimate:
    _check_time(p, s, t)
    _check_levels(r)
    if s < t:
        raise DomainError(f"G needs t <= s, got t={t}, s={s}")
    weights = KernelWeights.from_params(p, c)
    if weights.g == 0 or s == t:
        return McEstimate.exact(0.0, mc.paths)
    rng = mc.stream(stream)
    stats = SampleStats()
    for chunk, size in mc.chunks():
        level, _ = _state_at(p, c, r, 0.0, t, mc, rng, chunk, size)
        inner = inner_phi_integral_closed(c, s - t, level, 1.0)
        stats.add(weights.g * np.exp(-p.rho * (s - t)) * inner)
    return stats.estimate()


def kernel_H(
    p: ModelParams,
    c: DerivedConstants,
    r: float,
    z: float,
    t: float,
    mc: McConfig,
    stream: Stream = Stream.KERNELS,
) -> McEstimate:
    _check_time(p, t)
    _check_levels(r, z)
    weights = KernelWeights.from_params(p, c)
    index_term = weights.h_index * np.exp(p.mu_z * t) * z
    if p.lambda_ == 1:
        return McEstimate.exact(0.0, mc.paths)
    if t == p.horizon:
        return McEstimate.exact(index_term, mc.paths)
    rng = mc.stream(stream)
    s_nodes = nodes_from(mc.curve_grid(p.horizon), t)
    continuation = mc.sub_grid(t, p.horizon, p.horizon)
    stats = SampleStats()
    for chunk, size in mc.chunks():
        level, index = _state_at(p, c, r, z, t, mc, rng.substream(0), chunk, size)
        _, q2 = phi_time_integrals(p, c, s_nodes, level, np.zeros(len(s_nodes)))
        bundle = simulate_paths(
            p, c, continuation, level, index, rng.substream(1), size, chunk
        )
        varphi = _stopped_varphi(bundle, continuation, p, c, mc.bridge)
        stats.add(
            weights.h_quadrature * index * q2 + weights.h_varphi * varphi + index_term
        )
    return stats.estimate()


def varphi_bar(
    p: ModelParams,
    c: DerivedConstants,
    t: float,
    r: float,
    z: float,
    mc: McConfig,
    stream: Stream = Stream.DUAL,
) -> McEstimate:
    """
    Expected discounted index integral up to the first time the dual level
    started at r at time t reaches 0 (or T).
    """
    _check_time(p, t)
    _check_levels(r, z)
    if t == p.horizon or r == 0 or z == 0:
        return McEstimate.exact(0.0, mc.paths)
    rng = mc.stream(stream)
    grid = mc.sub_grid(t, p.horizon, p.horizon)
    stats = SampleStats()
    for chunk, size in mc.chunks():
        bundle = simulate_paths(p, c, grid, r, z, rng, size, chunk)
        stats.add(_stopped_varphi(bundle, grid, p, c, mc.bridge))
    return stats.estimate()


def dual_integrals(
    p: ModelParams,
    c: DerivedConstants,
    t: float,
    r: float,
    z: float,
    f: Curve,
    mc: McConfig,
    shift: float = 0.0,
    stream: Stream = Stream.DUAL,
) -> tuple[McEstimate, McEstimate]:
    """
    Full and stopped path integrals over [t, T] of

        e^{-rho s - R_s + shift} (lambda f(s) + (1 - lambda) eta Z_s)

    on one ensemble started at (r, z) at time t. The full integral is -v, the
    stopped one v_r (times e^shift).
    """
    _check_time(p, t)
    _check_levels(r, z)
    if t == p.horizon:
        zero = McEstimate.exact(0.0, mc.paths)
        return zero, zero
    grid = mc.grid(p.horizon) if t == 0 else mc.sub_grid(t, p.horizon, p.horizon)
    rng = mc.stream(stream)
    full = SampleStats()
    stopped = SampleStats()
    drift = p.lambda_ * f(grid.nodes)
    for chunk, size in mc.chunks():
        bundle = simulate_paths(p, c, grid, r, z, rng, size, chunk)
        integrand = np.exp(-p.rho * grid.nodes - bundle.R + shift) * (
            drift + (1 - p.lambda_) * c.eta * bundle.Z
        )
        survival = bridge_survival(bundle, c, grid) if mc.bridge else None
        full.add(np.trapezoid(integrand, dx=grid.dt, axis=1))
        stopped.add(stopped_integral(integrand, bundle.stop_idx, grid.dt, survival))
    return full.estimate(), stopped.estimate()


def value_v(
    p: ModelParams,
    c: DerivedConstants,
    t: float,
    r: float,
    z: float,
    f: Curve,
    mc: McConfig,
    stream: Stream = Stream.DUAL,
) -> McEstimate:
    full, _ = dual_integrals(p, c, t, r, z, f, mc, stream=stream)
    return full.scaled(-1.0)


def deriv_v_r(
    p: ModelParams,
    c: DerivedConstants,
    t: float,
    r: float,
    z: float,
    f: Curve,
    mc: McConfig,
    stream: Stream = Stream.DUAL,
) -> McEstimate:
    if r == 0:
        return McEstimate.exact(0.0, mc.paths)
    _, stopped = dual_integrals(p, c, t, r, z, f, mc, stream=stream)
    return stopped


def dual_quadrature(
    p: ModelParams, c: DerivedConstants, t: float, r: float, z: float, f: Curve
) -> float:
    """The phi-quadrature part of v_rr, equal to v_rr + v_r"""
    _check_time(p, t)
    _check_levels(r, z)
    s_nodes = nodes_from(f.grid, t)
    q1, q2 = phi_time_integrals(p, c, s_nodes, np.array([r]), f(s_nodes))
    total = p.lambda_ * q1[0] + (1 - p.lambda_) * c.eta * z * q2[0]
    return float(np.exp(-p.rho * t - r) * total)


def deriv_v_rr(
    p: ModelParams,
    c: DerivedConstants,
    t: float,
    r: float,
    z: float,
    f: Curve,
    mc: McConfig,
    stream: Stream = Stream.DUAL,
) -> McEstimate:
    quadrature = dual_quadrature(p, c, t, r, z, f)
    first = deriv_v_r(p, c, t, r, z, f, mc, stream=stream)
    return McEstimate(
        value=quadrature - first.value,
        std_error=first.std_error,
        n_paths=first.n_paths,
    )


def _table_key(
    p: ModelParams, r: float, z: float, mc: McConfig, stream: Stream = Stream.KERNELS
) -> tuple:
    return hashkey(p, float(r), float(z), mc, int(stream))


@cached(cache=LRUCache(maxsize=32), key=_table_key)
def build_kernel_table(
    p: ModelParams, r: float, z: float, mc: McConfig, stream: Stream = Stream.KERNELS
) -> KernelTable:
    """
    Estimate G and H on the curve grid from one path ensemble on the fine
    grid, sampled every `mc.stride` steps.
    """
    _check_levels(r, z)
    c = derive_constants(p)
    weights = KernelWeights.from_params(p, c)
    grid = mc.grid(p.horizon)
    curve = mc.curve_grid(p.horizon)
    size = curve.n_steps + 1
    lags = curve.nodes - curve.t_start
    start_idx = np.arange(0, grid.n_steps + 1, mc.stride)
    index_term = weights.h_index * np.exp(p.mu_z * curve.nodes) * z
    G_stats = [SampleStats() for _ in range(size)]
    H_stats = SampleStats()
    rng = mc.stream(stream)
    log.info("Building kernel table", r=r, z=z, paths=mc.paths, nodes=size)
    chunks = logged_items(mc.chunks(), "Simulate", 1, item_name="Chunk", logger=log)
    for chunk, n in chunks:
        bundle = simulate_paths(p, c, grid, r, z, rng, n, chunk)
        levels = bundle.R[:, start_idx]
        index = bundle.Z[:, start_idx]
        if p.lambda_ < 1:
            varphi = flow_varphi(bundle, grid, p.rho, start_idx, shift=r)
        H_samples = np.tile(index_term, (n, 1))
        for i in range(size):
            lag = lags[: size - i]
            if weights.g > 0:
                inner = _inner(c, lag, levels[:, i], 1.0)
                G_stats[i].add(weights.g * np.exp(-p.rho * lag) * inner)
            if p.lambda_ < 1:
                inner = _inner(c, lag, levels[:, i], weights.exponent)
                quad = inner @ (
                    tail_weights(size, i, curve.dt) * np.exp(-(p.rho - c.kappa) * lag)
                )
                H_samples[:, i] += (
                    weights.h_quadrature * index[:, i] * quad
                    + weights.h_varphi * varphi[:, i]
                )
        H_stats.add(H_samples)

    G = np.full((size, size), np.nan)
    G_se = np.full((size, size), np.nan)
    for i in range(size):
        if weights.g > 0:
            G[i, i:] = G_stats[i].mean
            G_se[i, i:] = G_stats[i].std_error
        else:
            G[i, i:] = 0.0
            G_se[i, i:] = 0.0
    return KernelTable(
        grid=curve,
        r_level=float(r),
        z_level=float(z),
        G_values=G,
        G_se=G_se,
        H_values=H_stats.mean,
        H_se=H_stats.std_error,
        n_paths=mc.paths,
    )
