"""Command groups; each module exposes a ``router`` typer app merged by :mod:`dccrn_kws.cli`."""
