from types import TracebackType
from typing import Optional

import typer
from anystore.logging import configure_logging, get_logger
from pydantic import ValidationError
from rich.console import Console
from typing_extensions import Annotated

from mfg_tracking import __version__, logic
from mfg_tracking.config import RunConfig
from mfg_tracking.exceptions import MfgError
from mfg_tracking.settings import Settings

settings = Settings()
cli = typer.Typer(
    no_args_is_help=True,
    pretty_exceptions_enable=True,
    pretty_exceptions_short=not settings.debug,
)
console = Console(stderr=True)

log = get_logger(__name__)

CONFIG = Annotated[
    str, typer.Option(..., "--config", "-c", help="Run config uri (key=value file)")
]
SEED = Annotated[Optional[int], typer.Option(help="Root seed of all random streams")]
PATHS = Annotated[Optional[int], typer.Option(help="Number of Monte-Carlo paths")]
STEPS = Annotated[Optional[int], typer.Option(help="Number of simulation steps")]
OUT = Annotated[
    str, typer.Option("--out", "-o", help="Output directory uri (file, s3...)")
]
BRIDGE = Annotated[
    bool, typer.Option(help="Brownian bridge correction of boundary hits")
]


class ErrorHandler:
    """
    Log library errors and exit with the code of their class: 1 for invalid
    input, 2 for non-convergence, 3 for a failed verification.
    """

    def __init__(self, logger=log) -> None:
        self.log = logger

    def __enter__(self) -> "ErrorHandler":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> bool:
        if exc is None:
            return False
        if isinstance(exc, ValidationError):
            code = 1
        elif isinstance(exc, MfgError):
            code = exc.exit_code
        else:
            return False
        self.log.error(str(exc), error=exc_type.__name__ if exc_type else None)
        console.print(f"[red]{type(exc).__name__}: {exc}[/red]")
        raise typer.Exit(code)


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.split(",") if v.strip()]


def _load(
    config: str,
    seed: int | None,
    paths: int | None,
    steps: int | None,
    out: str,
    bridge: bool,
) -> RunConfig:
    return RunConfig.from_uri(
        config, seed=seed, paths=paths, steps=steps, out_dir=out, bridge=bridge or None
    )


@cli.callback(invoke_without_command=True)
def cli_base(
    version: Annotated[Optional[bool], typer.Option(..., help="Show version")] = False,
    settings: Annotated[
        Optional[bool], typer.Option(..., help="Show current settings")
    ] = False,
):
    if version:
        print(__version__)
        raise typer.Exit()
    if settings:
        print(Settings())
        raise typer.Exit()
    configure_logging()


@cli.command("solve")
def cli_solve(
    config: CONFIG,
    seed: SEED = None,
    paths: PATHS = None,
    steps: STEPS = None,
    out: OUT = settings.out_dir,
    bridge: BRIDGE = settings.bridge,
):
    """
    Solve the mean-field equilibrium drift f*.
    """
    with ErrorHandler(log):
        run = _load(config, seed, paths, steps, out, bridge)
        mfe = logic.run_solve(run)
        console.print(mfe.meta)


@cli.command("curve")
def cli_curve(
    config: CONFIG,
    r_list: Annotated[
        str, typer.Option(help="Comma separated dual levels")
    ] = ",".join(str(r) for r in logic.DEFAULT_R_LIST),
    seed: SEED = None,
    paths: PATHS = None,
    steps: STEPS = None,
    out: OUT = settings.out_dir,
    bridge: BRIDGE = settings.bridge,
):
    """
    Tabulate the initial state x(r) matching a dual level r.
    """
    with ErrorHandler(log):
        run = _load(config, seed, paths, steps, out, bridge)
        rows = logic.run_curve(run, _floats(r_list))
        console.print(rows)


@cli.command("verify")
def cli_verify(
    config: CONFIG,
    perturb: Annotated[
        float,
        typer.Option(help="Scale the drift the agent responds to (fault injection)"),
    ] = 1.0,
    threshold: Annotated[
        float, typer.Option(help="Relative sup residual accepted")
    ] = settings.verify_threshold,
    seed: SEED = None,
    paths: PATHS = None,
    steps: STEPS = None,
    out: OUT = settings.out_dir,
    bridge: BRIDGE = settings.bridge,
):
    """
    Check the consistency condition along simulated equilibrium wealth.
    """
    with ErrorHandler(log):
        run = _load(config, seed, paths, steps, out, bridge)
        report = logic.run_verify(run, perturb, threshold)
        console.print(
            {"sup_residual": report.sup_residual, "tolerance": report.tolerance}
        )


@cli.command("nplayer")
def cli_nplayer(
    config: CONFIG,
    n_list: Annotated[
        str, typer.Option(help="Comma separated player counts")
    ] = ",".join(str(n) for n in logic.DEFAULT_N_LIST),
    delta: Annotated[
        float, typer.Option(help="Heterogeneity amplitude")
    ] = settings.nplayer_delta,
    nplayer_paths: Annotated[
        int, typer.Option(help="Replications of the n-player system")
    ] = settings.nplayer_paths,
    deviators: Annotated[
        int, typer.Option(help="Number of agents tested for deviations")
    ] = settings.deviating_agents,
    seed: SEED = None,
    paths: PATHS = None,
    steps: STEPS = None,
    out: OUT = settings.out_dir,
    bridge: BRIDGE = settings.bridge,
):
    """
    Estimate the approximate Nash gap of the mean-field strategy over n.
    """
    with ErrorHandler(log):
        run = _load(config, seed, paths, steps, out, bridge)
        counts = [int(n) for n in _floats(n_list)]
        reports = logic.run_nplayer(run, counts, delta, nplayer_paths, deviators)
        console.print({r.n: r.gap_bound for r in reports})


@cli.command("sweep")
def cli_sweep(
    config: CONFIG,
    param: Annotated[str, typer.Option(help="`lambda` or `sigma_z`")] = "lambda",
    values: Annotated[
        str, typer.Option(help="Comma separated parameter values")
    ] = "0.1,0.2,0.3",
    t: Annotated[float, typer.Option(help="Evaluation time")] = 0.5,
    z: Annotated[
        Optional[float], typer.Option(help="Index level (default z0)")
    ] = None,
    x_list: Annotated[
        Optional[str], typer.Option(help="Comma separated states (default x0)")
    ] = None,
    seed: SEED = None,
    paths: PATHS = None,
    steps: STEPS = None,
    out: OUT = settings.out_dir,
    bridge: BRIDGE = settings.bridge,
):
    """
    Re-solve the equilibrium over a parameter grid and report strategy and shortfall.
    """
    with ErrorHandler(log):
        run = _load(config, seed, paths, steps, out, bridge)
        xs = _floats(x_list) if x_list else None
        rows = logic.run_sweep(
            run, param, _floats(values), t, z, xs  # type: ignore[arg-type]
        )
        console.print(f"{len(rows)} rows")
