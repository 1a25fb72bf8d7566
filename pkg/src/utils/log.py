# log.py — one place to configure logging for the CLI and the harness app.
# Modules only ever call logging.getLogger(__name__).

from __future__ import annotations

import logging
import sys

_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
_PACKAGES = ("src", "core")


def setup_logging(verbosity: int = 0) -> None:
    """0 -> WARNING, 1 -> INFO, 2+ -> DEBUG. Records go to stderr."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT))
    for name in _PACKAGES:
        logger = logging.getLogger(name)
        logger.setLevel(level)
        # repeated calls (tests, app reruns) must not stack handlers
        logger.handlers = [h for h in logger.handlers if not getattr(h, "_toolkit", False)]
        handler._toolkit = True  # type: ignore[attr-defined]
        logger.addHandler(handler)


def progress_enabled() -> bool:
    """tqdm bars only when INFO is on and stderr is a terminal."""
    return logging.getLogger("src").isEnabledFor(logging.INFO) and sys.stderr.isatty()
