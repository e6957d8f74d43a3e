"""
logs.py

Console logging and banner helpers for the command-line tools.
"""

import logging
import os
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure the root logger once, routed through rich.

    Args:
        level: Level name; defaults to GRIDSSL_LOG_LEVEL or INFO
    """
    level_name = (level or os.getenv("GRIDSSL_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def banner(title: str) -> None:
    """Print a section banner."""
    console.rule(f"[bold]{title}")
