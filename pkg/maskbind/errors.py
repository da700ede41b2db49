"""
errors.py - exception hierarchy shared by all maskbind modules

Every error carries the exit code the CLI maps it to:
  2 config error, 3 numeric failure (non-finite), 4 I/O error.
`ablate --strict` exits with 1 when an expected ordering between modes is violated.
"""

from __future__ import annotations

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_ORDERING = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class MaskBindError(Exception):
    """Base class for all maskbind errors."""

    exit_code: int = EXIT_CONFIG


class ConfigError(MaskBindError):
    """Invalid configuration; `key_path` names the offending `section.key` when known."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class ShapeError(MaskBindError, ValueError):
    """Tensor dimensions do not match what an operation requires."""

    exit_code = EXIT_CONFIG


class PlacementError(MaskBindError):
    """Entities cannot be placed disjointly on the canvas."""

    exit_code = EXIT_CONFIG


class MaskSessionError(MaskBindError):
    """A MaskCache was updated out of order."""

    exit_code = EXIT_NUMERIC


class NumericError(MaskBindError):
    """Non-finite loss or latent. `diagnostics` is dumped next to the run outputs."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, step: Optional[int] = None,
                 diagnostics: Optional[Dict[str, Any]] = None):
        self.step = step
        self.diagnostics = dict(diagnostics or {})
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class ContainerError(MaskBindError):
    """Malformed tensor container file."""

    exit_code = EXIT_IO


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, MaskBindError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


__all__ = [
    "EXIT_OK", "EXIT_ORDERING", "EXIT_CONFIG", "EXIT_NUMERIC", "EXIT_IO",
    "MaskBindError", "ConfigError", "ShapeError", "PlacementError",
    "MaskSessionError", "NumericError", "ContainerError", "exit_code_for",
]
