# dccrn_kws/errors.py
"""Error types raised across the package.

Every failure carries an exit code and a human-readable ``detail`` string so the
command line can turn it into a single parseable line.
"""
from typing import Optional


class KwsError(Exception):
    """Base error: ``exit_code`` for the CLI, ``detail`` for the message."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def one_line(self) -> str:
        detail = " ".join(self.detail.split())
        return f"error code={self.exit_code} type={type(self).__name__} detail={detail}"


class ConfigError(KwsError):
    exit_code = 2


class AudioError(KwsError):
    exit_code = 3


class SimulationError(KwsError):
    exit_code = 4


class RirError(SimulationError):
    pass


class ShapeError(KwsError):
    exit_code = 5


class StreamStateError(KwsError):
    exit_code = 5


class InferenceModeError(KwsError):
    exit_code = 5


class MergeError(KwsError):
    exit_code = 5


class BiasError(KwsError):
    exit_code = 6


class LossError(KwsError):
    exit_code = 7


class TrainingDivergedError(LossError):
    pass


class CheckpointError(KwsError):
    exit_code = 8


class EvaluationError(KwsError):
    exit_code = 9
