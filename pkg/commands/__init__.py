"""CLI commands; each takes a RunConfig and returns a process exit code."""

import sys

from utils.config import RunConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def say(config: RunConfig, text: str) -> None:
    """Human-readable summary; kept off stdout when stdout carries the data."""
    print(text, file=sys.stdout if config.out else sys.stderr)
