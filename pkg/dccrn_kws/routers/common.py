# dccrn_kws/routers/common.py
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import torch
from rich.console import Console
from rich.table import Table

from dccrn_kws.config import SECTIONS, RunConfig, load_config
from dccrn_kws.errors import ConfigError
from dccrn_kws.settings import resolve_config_path, settings

logger = logging.getLogger(__name__)

console = Console(stderr=True)


class Switch(str, Enum):
    ON = "on"
    OFF = "off"


def apply_threads() -> None:
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)


def run_config(config: Optional[Path], **overrides) -> RunConfig:
    """Load ``config`` (or defaults) and apply command-line overrides before anything runs."""
    apply_threads()
    if config is None:
        base = RunConfig()
    else:
        path = resolve_config_path(config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        base = load_config(path)
    feature_merge = overrides.pop("feature_merge", None)
    if feature_merge is not None:
        overrides["feature_merge"] = Switch(feature_merge) == Switch.ON
    return base.with_overrides(**overrides)


def adopt_sections(base: RunConfig, other: RunConfig, sections: Iterable[str] = ("simulation", "eval", "paths")) -> RunConfig:
    """Copy the non-model sections of ``other`` onto ``base``; model shape stays with ``base``."""
    flat = other.flat()
    keys = [k for name in sections for k in SECTIONS[name].model_fields]
    return base.with_overrides(**{k: flat[k] for k in keys})


def required(value, what: str):
    if value is None:
        raise ConfigError(f"no {what} given (pass it on the command line or set it in the config)")
    return value


def print_table(title: str, columns: Iterable[str], rows: Iterable[Iterable[object]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(str(column))
    for row in rows:
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    console.print(table)


def print_merge_weights(model) -> None:
    """Learned per-layer merge weights, when the model merges encoder layers."""
    merge = getattr(model, "merge", None)
    weights = merge.learned_weights() if merge is not None else []
    if weights:
        print_table("Learned merge weights", ["layer", "w"], [(i + 1, w) for i, w in enumerate(weights)])
