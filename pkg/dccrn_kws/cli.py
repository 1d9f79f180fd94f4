# dccrn_kws/cli.py
"""Command-line entry: every subcommand group from ``dccrn_kws.routers`` merged into one app."""
import importlib
import logging
import sys
import traceback
from typing import List, Optional, Sequence

import click
import typer

from dccrn_kws.errors import KwsError

logger = logging.getLogger(__name__)

PROG_NAME = "dccrn-kws"
ROUTERS = ("simulate", "bias", "train", "evaluation", "stream", "bench")

app = typer.Typer(
    name=PROG_NAME,
    help="Joint speech enhancement and keyword spotting with a shared complex encoder.",
    no_args_is_help=True,
    add_completion=False,
    pretty_exceptions_enable=False,
)

for _name in ROUTERS:
    try:
        _module = importlib.import_module(f"dccrn_kws.routers.{_name}")
        app.registered_commands.extend(_module.router.registered_commands)
        logger.debug(f"✅ {_name} commands loaded: {[c.name for c in _module.router.registered_commands]}")
    except ImportError as e:
        logger.error(f"❌ Failed to import {_name} commands: {e}")
        logger.error(traceback.format_exc())


def command_names() -> List[str]:
    return [c.name for c in app.registered_commands]


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit status instead of exiting."""
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        rv = app(args=args, prog_name=PROG_NAME, standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except KwsError as e:
        logger.debug(traceback.format_exc())
        click.echo(e.one_line(), err=True)
        return e.exit_code
    return rv if isinstance(rv, int) else 0
