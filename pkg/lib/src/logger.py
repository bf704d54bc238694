"""
Centralized logging system for homfem using rich for readable CLI output
Diagnostics go to stderr, machine-greppable summaries to stdout
"""

import threading
from typing import Dict, NamedTuple, Optional, Sequence

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text


VERBOSITY_QUIET = 0
VERBOSITY_NORMAL = 1
VERBOSITY_DEBUG = 2


class LevelStyle(NamedTuple):
    label: str
    style: str
    min_verbosity: int
    dim_message: bool = False


LEVELS: Dict[str, LevelStyle] = {
    'info': LevelStyle('', 'bold blue', VERBOSITY_NORMAL),
    'success': LevelStyle('SUCCESS: ', 'bold green', VERBOSITY_NORMAL),
    'step': LevelStyle('→ ', 'bold cyan', VERBOSITY_NORMAL),
    'warning': LevelStyle('WARNING: ', 'bold yellow', VERBOSITY_QUIET),
    'error': LevelStyle('ERROR: ', 'bold red', VERBOSITY_QUIET),
    'debug': LevelStyle('', 'dim', VERBOSITY_DEBUG, dim_message=True),
}


class HomfemLogger:
    """Centralized logger with rich formatting for consistent CLI output"""

    def __init__(self):
        self.console = Console(highlight=False)
        self.error_console = Console(stderr=True, highlight=False)
        self.verbosity = VERBOSITY_NORMAL
        # Engine workers log from several threads
        self._lock = threading.Lock()

    def set_verbosity(self, level: int):
        self.verbosity = level

    def enabled(self, level: str) -> bool:
        return self.verbosity >= LEVELS[level].min_verbosity

    def log(self, level: str, message: str, prefix: Optional[str] = None):
        """Write one `[PREFIX] message` diagnostic line to stderr"""
        if not self.enabled(level):
            return
        spec = LEVELS[level]
        text = Text()
        if spec.label:
            text.append(spec.label, style=spec.style)
        text.append(f"[{prefix or level.upper()}] ", style=spec.style)
        text.append(message, style='dim' if spec.dim_message else '')
        with self._lock:
            self.error_console.print(text)

    def header(self, title: str, subtitle: Optional[str] = None):
        """Print a formatted header panel"""
        if self.verbosity < VERBOSITY_NORMAL:
            return
        content = f"[bold]{title}[/bold]" + (f"\n{subtitle}" if subtitle else '')
        with self._lock:
            self.error_console.print(Panel(content, box=box.ROUNDED, style="blue", padding=(1, 2)))

    def section(self, title: str):
        if self.verbosity >= VERBOSITY_NORMAL:
            with self._lock:
                self.error_console.print(f"\n[bold blue]═══ {title} ═══[/bold blue]")

    def table(self, title: str, headers: Sequence[str], rows: Sequence[Sequence]):
        """Print a formatted table to stdout"""
        table = Table(title=title, box=box.SIMPLE_HEAVY)
        for header in headers:
            table.add_column(header, style="cyan")
        for row in rows:
            table.add_row(*[str(cell) for cell in row])
        with self._lock:
            self.console.print(table)

    def summary(self, key: str, value):
        """Print a plain `key = value` line on stdout"""
        with self._lock:
            self.console.print(f"{key} = {value}", markup=False, soft_wrap=True)


# Create global logger instance
logger = HomfemLogger()


# Convenience functions for easy importing
def log_info(message: str, prefix: str = "INFO"):
    logger.log('info', message, prefix)

def log_success(message: str, prefix: str = "SUCCESS"):
    logger.log('success', message, prefix)

def log_warning(message: str, prefix: str = "WARNING"):
    logger.log('warning', message, prefix)

def log_error(message: str, prefix: str = "ERROR"):
    logger.log('error', message, prefix)

def log_step(message: str, prefix: str = "STEP"):
    logger.log('step', message, prefix)

def log_debug(message: str, prefix: str = "DEBUG"):
    logger.log('debug', message, prefix)

def summary(key: str, value):
    logger.summary(key, value)

def set_verbosity(level: int):
    logger.set_verbosity(level)
