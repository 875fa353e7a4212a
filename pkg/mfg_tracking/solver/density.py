"""
The joint density phi of (position, running maximum) of a drifted Brownian
motion, its weighted integrals over the position and first passage helpers.

phi(s, x, y) is the density of (B_s, max_{u<=s} B_u) for B with drift
mu_tilde * sigma_tilde and volatility |sigma_tilde| started at 0.
"""

import numpy as np
from scipy.integrate import quad
from scipy.special import erfcx, ndtr
from scipy.stats import norm

from mfg_tracking.exceptions import DomainError, QuadratureError
from mfg_tracking.params import DerivedConstants
from mfg_tracking.solver.util import McEstimate
from mfg_tracking.stochastic import PathBundle, RngStream, TimeGrid, bridge_survival

TAIL_SIGMAS = 10.0
QUAD_TOL = 1e-9


def phi_density(
    c: DerivedConstants,
    s: float | np.ndarray,
    x: float | np.ndarray,
    y: float | np.ndarray,
) -> np.ndarray:
    s, x, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (s, x, y)))
    if np.any(s <= 0):
        raise DomainError("phi is defined for s > 0 only")
    if np.any(y < 0) or np.any(x > y):
        raise DomainError("phi is defined for y >= 0 and x <= y only")
    var = c.sigma_tilde**2
    w = 2 * y - x
    prefactor = 2 * w / (var * np.sqrt(2 * np.pi * var * s**3))
    exponent = (
        c.mu_tilde * x / c.sigma_tilde
        - c.mu_tilde**2 * s / 2
        - w**2 / (2 * var * s)
    )
    return prefactor * np.exp(exponent)


def _tail_bound(c: DerivedConstants, tau: float, r: float, a: float) -> float:
    k = a + c.mu_tilde / c.sigma_tilde
    spread = c.sigma_tilde**2 * tau
    peak = max(0.0, -k * spread - r)
    return peak + TAIL_SIGMAS * np.sqrt(spread)


def inner_phi_integral(c: DerivedConstants, tau: float, r: float, a: float) -> float:
    """
    Adaptive quadrature of the integral of exp(a x) phi(tau, x, r) over
    x <= r, after substituting u = r - x.
    """
    if tau <= 0:
        raise DomainError(f"tau must be positive: {tau}")
    if r < 0:
        raise DomainError(f"Level must be nonnegative: {r}")

    def integrand(u: float) -> float:
        x = r - u
        return float(np.exp(a * x) * phi_density(c, tau, x, r))

    upper = _tail_bound(c, tau, r, a)
    k = a + c.mu_tilde / c.sigma_tilde
    peak = -k * c.sigma_tilde**2 * tau - r
    points = [peak] if 0 < peak < upper else None
    value, error = quad(
        integrand, 0.0, upper, epsabs=1e-14, epsrel=1e-12, limit=400, points=points
    )
    if error > QUAD_TOL * max(1.0, abs(value)):
        raise QuadratureError(
            f"Inner phi integral did not converge at tau={tau}, r={r}, a={a}",
            residual=error,
        )
    return max(value, 0.0)


def inner_phi_integral_closed(
    c: DerivedConstants,
    tau: float | np.ndarray,
    r: float | np.ndarray,
    a: float,
) -> np.ndarray:
    """
    Closed form of `inner_phi_integral`, vectorised over (tau, r). The
    integrand is a Gaussian times a linear factor; entries with tau <= 0 are
    set to their limit 0.
    """
    tau, r = np.broadcast_arrays(
        np.asarray(tau, dtype=float), np.asarray(r, dtype=float)
    )
    k = a + c.mu_tilde / c.sigma_tilde
    out = np.zeros(tau.shape)
    live = tau > 0
    if not np.any(live):
        return out
    t = tau[live]
    level = r[live]
    spread = c.sigma_tilde**2 * t
    root = np.sqrt(spread)
    h = (level + k * spread) / root
    gauss = np.exp(k * level - level**2 / (2 * spread))
    value = np.empty_like(t)
    upper = h >= 0
    value[upper] = gauss[upper] * (
        2 / np.sqrt(2 * np.pi * spread[upper]) - k * erfcx(h[upper] / np.sqrt(2))
    )
    lower = ~upper
    tail = np.exp(2 * k * level[lower] + k**2 * spread[lower] / 2) * ndtr(-h[lower])
    value[lower] = (
        2 * gauss[lower] / np.sqrt(2 * np.pi * spread[lower]) - 2 * k * tail
    )
    out[live] = np.maximum(np.exp(-(c.mu_tilde**2) * t / 2) * value, 0.0)
    return out


def running_max_density(
    c: DerivedConstants, s: float | np.ndarray, y: float | np.ndarray
) -> np.ndarray:
    """Marginal density of the running maximum at level y"""
    return inner_phi_integral_closed(c, s, y, 0.0)


def sample_position_max(
    c: DerivedConstants, s: float, n: int, rng: RngStream, chunk: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """
    Exact draws of (B_s, max B) for the process whose joint density is phi:
    the endpoint is Gaussian and, given the endpoint, the maximum of the
    Brownian bridge is sampled by inversion.
    """
    if s <= 0:
        raise DomainError(f"s must be positive: {s}")
    gen = rng.generator(chunk)
    vol = abs(c.sigma_tilde)
    x = c.mu_tilde * c.sigma_tilde * s + vol * np.sqrt(s) * gen.standard_normal(n)
    uniform = 1.0 - gen.random(n)
    m = (x + np.sqrt(x**2 - 2 * vol**2 * s * np.log(uniform))) / 2
    return x, m


def first_passage_cdf(c: DerivedConstants, r: float, horizon: float) -> float:
    """Probability that the driver started at r reaches 0 before `horizon`"""
    if r <= 0:
        return 1.0
    scale = c.r_vol * np.sqrt(horizon)
    return float(
        norm.cdf((-r - c.r_drift * horizon) / scale)
        + np.exp(-2 * c.r_drift * r / c.r_vol**2)
        * norm.cdf((-r + c.r_drift * horizon) / scale)
    )


def first_passage_probability(
    bundle: PathBundle, c: DerivedConstants, grid: TimeGrid, bridge: bool = False
) -> McEstimate:
    """Monte-Carlo probability that the driver reaches 0 on the grid horizon"""
    if bridge:
        samples = 1.0 - bridge_survival(bundle, c, grid)[:, -1]
    else:
        samples = (bundle.tau_idx >= 0).astype(float)
    return McEstimate.from_samples(samples)
