"""Typed exceptions raised across the toolkit.

The CLI maps them onto exit codes (see ``src.cli``): configuration and input
problems exit 2, file problems exit 3, numerical failures exit 4.
"""

from __future__ import annotations

from typing import Optional


class ToolkitError(Exception):
    """Base class for every error raised on purpose by the toolkit."""


class ConfigError(ToolkitError, ValueError):
    """Bad, unknown or mistyped configuration value."""


class InputError(ToolkitError, ValueError):
    """Data that violates an operation's precondition."""


class FormatError(ToolkitError, ValueError):
    """Malformed file content. Always names the file and the position."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class GraphError(ToolkitError, ValueError):
    """Structurally invalid pose graph (missing node, disconnected, too large)."""


class NumericalError(ToolkitError, RuntimeError):
    """Non-finite values or no usable iterate."""
