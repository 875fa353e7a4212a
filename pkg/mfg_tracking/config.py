"""
Run configuration: a flat key=value file (dotenv syntax, `#` comments for
units) with the model, the initial state and the numerical setup.

    mu=0.1         # 1/time
    sigma=0.1      # 1/sqrt(time)
    mu_z=0.2       # 1/time
    sigma_z=0.1    # 1/sqrt(time)
    lambda=0.2
    rho=1          # 1/time
    horizon=1      # time
    v0=23.75       # currency
    z0=20          # currency

Precedence: command line flags over file values over settings.
"""

from io import StringIO
from typing import Any, Self

from anystore.io import smart_read
from anystore.logging import get_logger
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from mfg_tracking.exceptions import ParameterError
from mfg_tracking.params import (
    MODEL_KEYS,
    InitialState,
    ModelParams,
    initial_auxiliary_state,
)
from mfg_tracking.settings import Settings
from mfg_tracking.solver.mfe import SolveConfig
from mfg_tracking.solver.util import McConfig

settings = Settings()
log = get_logger(__name__)

STATE_KEYS = ("v0", "z0", "x0")
NUMERIC_KEYS = ("steps", "curve_steps", "paths", "seed", "tol", "tol_x", "max_iter")


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    params: ModelParams
    state: InitialState
    seed: int = Field(default=settings.seed, ge=0)
    paths: int = Field(default=settings.paths, ge=2)
    steps: int = Field(default=settings.steps, ge=1)
    curve_steps: int = Field(default=settings.curve_steps, ge=1)
    tol: float = Field(default=settings.tol, gt=0)
    tol_x: float = Field(default=settings.tol_x, gt=0)
    max_iter: int = Field(default=settings.max_iter, ge=1)
    bridge: bool = settings.bridge
    out_dir: str = settings.out_dir

    @classmethod
    def from_values(cls, values: dict[str, Any], **overrides: Any) -> Self:
        unknown = set(values) - set(MODEL_KEYS) - set(STATE_KEYS) - set(NUMERIC_KEYS)
        if unknown:
            raise ParameterError(f"Unknown config keys: {', '.join(sorted(unknown))}")
        if "z0" not in values or not ("v0" in values or "x0" in values):
            raise ParameterError("Config needs `z0` and one of `v0`, `x0`")
        params = ModelParams(**{k: values[k] for k in MODEL_KEYS if k in values})
        z0 = float(values["z0"])
        if values.get("x0") is not None:
            state = InitialState.from_state(params, float(values["x0"]), z0)
        else:
            state = initial_auxiliary_state(params, float(values["v0"]), z0)
        numeric = {k: values[k] for k in NUMERIC_KEYS if values.get(k) is not None}
        numeric.update({k: v for k, v in overrides.items() if v is not None})
        return cls(params=params, state=state, **numeric)

    @classmethod
    def from_uri(cls, uri: str, **overrides: Any) -> Self:
        data = smart_read(uri, mode="r")
        if isinstance(data, bytes):
            data = data.decode()
        values = {k: v for k, v in dotenv_values(stream=StringIO(data)).items() if v}
        log.info("Loaded run config", uri=uri, keys=len(values))
        return cls.from_values(values, **overrides)

    def mc(self) -> McConfig:
        return McConfig(
            paths=self.paths,
            steps=self.steps,
            curve_steps=self.curve_steps,
            seed=self.seed,
            bridge=self.bridge,
        )

    def solve_config(self) -> SolveConfig:
        return SolveConfig(
            mc=self.mc(), tol=self.tol, tol_x=self.tol_x, max_iter=self.max_iter
        )
