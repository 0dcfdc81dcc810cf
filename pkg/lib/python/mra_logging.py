"""
Logging setup

Installs a rich console handler on the root logger. The level comes from the
argument, else from MRA_VAE_LOG_LEVEL (a .env file is honored), else INFO.
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv
from rich.logging import RichHandler

LOG_LEVEL_ENV = "MRA_VAE_LOG_LEVEL"

_configured = False


def resolve_level(level: Optional[str] = None) -> int:
    """Map a level name (or the environment) to a logging level"""
    name = level or os.getenv(LOG_LEVEL_ENV) or "INFO"
    resolved = logging.getLevelName(name.strip().upper())
    if not isinstance(resolved, int):
        logging.getLogger(__name__).warning("Unknown log level %r, using INFO", name)
        return logging.INFO
    return resolved


def configure_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging once per process

    Args:
        level: Optional level name; overrides MRA_VAE_LOG_LEVEL
    """
    global _configured
    load_dotenv()
    root = logging.getLogger()
    root.setLevel(resolve_level(level))
    if _configured:
        return
    handler = RichHandler(rich_tracebacks=True, show_path=False)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    _configured = True
