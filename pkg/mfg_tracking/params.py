"""
Model parameters of the representative agent, the derived constants of the
transformed control problem and the deterministic region thresholds.
"""

from typing import TYPE_CHECKING, Any, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mfg_tracking.exceptions import DomainError

if TYPE_CHECKING:
    from mfg_tracking.solver.util import Curve

MODEL_KEYS = ("mu", "sigma", "mu_z", "sigma_z", "lambda", "rho", "horizon")


class ModelParams(BaseModel):
    """
    Market and preference parameters. `lambda` is the competition weight
    between the population average wealth and the market index.
    """

    model_config = ConfigDict(
        frozen=True, populate_by_name=True, allow_inf_nan=False, extra="forbid"
    )

    mu: float = Field(gt=0)
    """Drift of the risky asset (1/time)"""

    sigma: float = Field(gt=0)
    """Volatility of the risky asset (1/sqrt(time))"""

    mu_z: float = Field(gt=0)
    """Drift of the market index (1/time)"""

    sigma_z: float = Field(gt=0)
    """Volatility of the market index (1/sqrt(time))"""

    lambda_: float = Field(ge=0, le=1, alias="lambda")
    """Competition weight in [0, 1]"""

    rho: float = Field(gt=0)
    """Discount rate (1/time)"""

    horizon: float = Field(default=1.0, gt=0)
    """Terminal time T"""

    @model_validator(mode="after")
    def check_sharpe(self) -> Self:
        if self.mu_z * self.sigma <= self.mu * self.sigma_z:
            raise ValueError(
                "The index Sharpe ratio mu_z/sigma_z must exceed mu/sigma "
                f"(got {self.mu_z / self.sigma_z:.6g} <= {self.mu / self.sigma:.6g})"
            )
        return self

    def replace(self, **changes: Any) -> "ModelParams":
        data = self.model_dump()
        if "lambda" in changes:
            changes["lambda_"] = changes.pop("lambda")
        data.update(changes)
        return ModelParams(**data)


class DerivedConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta: float
    kappa: float
    mu_tilde: float
    sigma_tilde: float
    r_drift: float
    r_vol: float


class InitialState(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    v0: float = Field(ge=0)
    """Initial wealth"""

    z0: float = Field(ge=0)
    """Initial index level"""

    x0: float = Field(ge=0)
    """Initial auxiliary (reflected) state"""

    @classmethod
    def from_wealth(cls, p: ModelParams, v0: float, z0: float) -> Self:
        return cls(v0=v0, z0=z0, x0=max(0.0, (1 - p.lambda_) * (v0 - z0)))

    @classmethod
    def from_state(cls, p: ModelParams, x0: float, z0: float) -> Self:
        """
        Build a state from the auxiliary level directly. The initial wealth is
        the one that reproduces `x0` (the index level when `lambda` is 1).
        """
        if x0 < 0 or z0 < 0:
            raise DomainError(f"Negative initial state: x0={x0}, z0={z0}")
        if p.lambda_ < 1:
            v0 = z0 + x0 / (1 - p.lambda_)
        else:
            v0 = z0
        return cls(v0=v0, z0=z0, x0=x0)


def derive_constants(p: ModelParams) -> DerivedConstants:
    ratio = p.mu / p.sigma
    return DerivedConstants(
        eta=p.mu_z - p.mu * p.sigma_z / p.sigma,
        kappa=p.mu_z
        - p.sigma_z**2 / 2
        - p.mu * p.sigma_z / (2 * p.sigma)
        + p.sigma * p.sigma_z * p.rho / p.mu,
        mu_tilde=p.mu / (2 * p.sigma) - p.sigma * p.rho / p.mu,
        sigma_tilde=-ratio,
        r_drift=ratio**2 / 2 - p.rho,
        r_vol=ratio,
    )


def threshold_hat_x0(p: ModelParams, z: float) -> float:
    """
    The initial auxiliary level from which the representative agent never
    falls short of the benchmark in equilibrium.
    """
    if z < 0:
        raise DomainError(f"Index level must be nonnegative: {z}")
    c = derive_constants(p)
    lam = p.lambda_
    grow_eta = np.exp(c.eta * p.horizon)
    grow_z = np.exp(p.mu_z * p.horizon)
    return float((1 - lam) * (lam * (grow_z - grow_eta) + grow_eta - 1) * z)


def boundary_x0(p: ModelParams, f: "Curve", t: float, z: float) -> float:
    """
    Boundary between the underperforming (x < x_0) and outperforming region at
    time `t` for index level `z`, given the population drift curve `f`.
    """
    if not -1e-12 <= t <= p.horizon + 1e-12:
        raise DomainError(f"Time {t} outside [0, {p.horizon}]")
    if z < 0:
        raise DomainError(f"Index level must be nonnegative: {z}")
    t = min(max(t, 0.0), p.horizon)
    c = derive_constants(p)
    tail = f.integral(t) if p.lambda_ > 0 else 0.0
    return float(
        p.lambda_ * tail + (1 - p.lambda_) * np.expm1(c.eta * (p.horizon - t)) * z
    )


def initial_auxiliary_state(p: ModelParams, v0: float, z0: float) -> InitialState:
    if v0 < 0 or z0 < 0:
        raise DomainError(f"Negative initial wealth or index: v0={v0}, z0={z0}")
    return InitialState.from_wealth(p, v0, z0)
