"""Acoustic-impedance field reconstruction, rendering and plane localization."""

from ._core import *  # noqa: F401,F403
from ._core import __version__, run_cli  # noqa: F401


def cli(*args: str) -> tuple[int, str, str]:
    """Runs one CLI command in-process; returns (exit code, stdout, stderr)."""
    return run_cli(["sonofield", *map(str, args)])
