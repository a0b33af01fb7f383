"""
Console output helpers

Status lines and warnings go to stderr so stdout only ever carries data.
Set GGEM_QUIET=true to silence status lines (warnings are always shown).
"""

import os
import sys


def _quiet() -> bool:
    return os.getenv('GGEM_QUIET', 'false').lower() == 'true'


def status(message: str) -> None:
    if not _quiet():
        print(message, file=sys.stderr)


def success(message: str) -> None:
    status(f"✓ {message}")


def warn(message: str) -> None:
    print(f"⚠ {message}", file=sys.stderr)


def error(message: str) -> None:
    print(f"✗ {message}", file=sys.stderr)


def banner(title: str) -> None:
    status("=" * 60)
    status(title)
    status("=" * 60)
