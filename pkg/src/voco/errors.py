"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class VocoError(Exception):
    exit_code = 1


class UsageError(VocoError, ValueError):
    """Caller violated a precondition (bad argument, wrong shape of request)."""

    exit_code = 2


class ShapeError(UsageError):
    """Tensor dimensions do not agree."""


class ConfigError(UsageError):
    exit_code = 2


class NumericError(VocoError, ArithmeticError):
    exit_code = 3


class CapacityError(VocoError):
    """A sequence or store would exceed its configured capacity."""

    exit_code = 2


class TrainingError(VocoError):
    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class FormatError(VocoError):
    """Binary payload is corrupt, truncated or of an unknown version."""

    exit_code = 4

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} at byte {offset}")
        self.offset = offset


class StalenessError(VocoError):
    """A cache was produced by a different model than the one consuming it."""

    exit_code = 4


class ProtocolError(VocoError):
    """Evaluation fragments do not describe the same experiment."""

    exit_code = 5
