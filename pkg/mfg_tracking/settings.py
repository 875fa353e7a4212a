from anystore.settings import BaseSettings
from pydantic_settings import SettingsConfigDict


class Settings(BaseSettings):
    """
    `mfg-tracking` settings management using
    [pydantic-settings](https://docs.pydantic.dev/latest/concepts/pydantic_settings/)

    Note:
        All settings can be set via environment variables or `.env` file,
        prepending `MFG_TRACKING_`. Values given in a run config file or on
        the command line take precedence.
    """

    model_config = SettingsConfigDict(
        env_prefix="mfg_tracking_",
        env_nested_delimiter="_",
        env_file=".env",
        extra="ignore",
    )

    seed: int = 42
    """Root seed of all random number streams"""

    paths: int = 100_000
    """Number of Monte-Carlo paths for kernel and expectation estimates"""

    steps: int = 500
    """Number of simulation steps on [0, T]"""

    curve_steps: int = 50
    """Intervals of the drift curve and kernel table grid (must divide `steps`)"""

    chunk_size: int = 5_000
    """Paths simulated at once, each chunk draws from its own random stream"""

    bridge: bool = False
    """Detect boundary hits between grid nodes via Brownian bridge survival weights"""

    tol: float = 1e-3
    """Relative sup-norm tolerance of the fixed point iteration"""

    tol_x: float = 1e-2
    """Absolute tolerance of the dual level search (currency)"""

    max_iter: int = 200
    """Maximum number of fixed point iterations"""

    bracket_max: int = 12
    """Maximum number of doublings when bracketing the dual level"""

    r_grid_size: int = 64
    """Number of dual levels of the strategy tables"""

    strategy_paths: int = 2_000
    """Paths per dual level when tabulating the stopped index integral"""

    nplayer_paths: int = 2_000
    """Monte-Carlo replications of the n-player system"""

    nplayer_delta: float = 0.1
    """Heterogeneity amplitude of the n-player parameter schedule"""

    nplayer_types: int = 5
    """Number of distinct agent parameter classes in the n-player schedule"""

    deviating_agents: int = 3
    """Agents whose unilateral deviations enter the Nash gap study"""

    verify_threshold: float = 0.02
    """Relative sup-norm residual accepted by the consistency check"""

    out_dir: str = "./out"
    """Default output directory (any anystore uri)"""
