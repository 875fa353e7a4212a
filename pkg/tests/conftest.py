from pathlib import Path

import pytest

from mfg_tracking.params import ModelParams, derive_constants
from mfg_tracking.solver.util import McConfig

FIXTURES_PATH = (Path(__file__).parent / "fixtures").absolute()
BASELINE = "baseline.env"
UNDERPERFORMING = "underperforming.env"


@pytest.fixture(scope="module")
def fixtures_path():
    return FIXTURES_PATH


@pytest.fixture(scope="module")
def params():
    return ModelParams(
        mu=0.1, sigma=0.1, mu_z=0.2, sigma_z=0.1, lambda_=0.2, rho=1.0, horizon=1.0
    )


@pytest.fixture(scope="module")
def constants(params):
    return derive_constants(params)


@pytest.fixture(scope="module")
def mc():
    return McConfig(
        paths=2_000, steps=100, curve_steps=20, seed=42, chunk_size=1_000
    )


@pytest.fixture(scope="module")
def mc_bridge(mc):
    return mc.replace(paths=4_000, bridge=True)


@pytest.fixture(scope="module")
def baseline_config():
    return str(FIXTURES_PATH / BASELINE)


@pytest.fixture(scope="module")
def underperforming_config():
    return str(FIXTURES_PATH / UNDERPERFORMING)
