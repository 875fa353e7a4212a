"""
CSV output with a json metadata sidecar per file. Metadata carries no
timestamps so that reruns with the same config are byte-identical.
"""

import subprocess
from pathlib import Path
from typing import Any, Iterable

from anystore.io import smart_read, smart_stream_csv, smart_write, smart_write_csv
from anystore.logging import get_logger
from cachetools import LRUCache, cached
from pydantic import BaseModel

from mfg_tracking import __version__
from mfg_tracking.config import RunConfig

log = get_logger(__name__)


@cached(LRUCache(maxsize=1))
def git_describe() -> str | None:
    """`git describe` of the package checkout, None outside a git work tree"""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            check=False,
        )
    except OSError:
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


class RunMetadata(BaseModel):
    command: str
    version: str = __version__
    build: str | None = None
    """git describe of the checkout that produced the output"""
    seed: int
    steps: int
    curve_steps: int
    paths: int
    bridge: bool
    params: dict[str, float]
    x0: float
    z0: float
    extra: dict[str, Any] = {}

    @classmethod
    def from_config(
        cls, command: str, config: RunConfig, **extra: Any
    ) -> "RunMetadata":
        return cls(
            command=command,
            build=git_describe(),
            seed=config.seed,
            steps=config.steps,
            curve_steps=config.curve_steps,
            paths=config.paths,
            bridge=config.bridge,
            params=config.params.model_dump(by_alias=True),
            x0=config.state.x0,
            z0=config.state.z0,
            extra=extra,
        )


def _join(out_dir: str, name: str) -> str:
    if "://" not in out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return f"{out_dir.rstrip('/')}/{name}"


def write_table(
    out_dir: str,
    name: str,
    rows: Iterable[dict[str, Any]],
    meta: RunMetadata,
) -> str:
    uri = _join(out_dir, name)
    rows = list(rows)
    smart_write_csv(uri, rows)
    smart_write(f"{uri}.meta.json", meta.model_dump_json(indent=2).encode())
    log.info("Wrote table", uri=uri, rows=len(rows))
    return uri


def read_table(uri: str) -> list[dict[str, Any]]:
    return list(smart_stream_csv(uri))


def read_meta(uri: str) -> dict[str, Any]:
    meta = RunMetadata.model_validate_json(smart_read(f"{uri}.meta.json"))
    return meta.model_dump(mode="json")
