"""
Exception hierarchy for rest-adapt.

Library code raises these; only the CLI translates them into process exit
codes via the `exit_code` class attribute:

- 1: configuration errors
- 2: data errors (container format, splits, shapes, empty sets, unwritable outputs)
- 3: numerical failures (non-finite losses or gradients)

Key classes: `RestAdaptError`, `ConfigError`, `DataError`, `NumericalError`
"""

from __future__ import annotations

from typing import Any


class RestAdaptError(Exception):
    """
    Base class of every error raised by the package.
    """

    exit_code = 1

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ConfigError(RestAdaptError, ValueError):
    """
    Invalid configuration.

    `violations` lists every problem found, formatted as ``"<field path>: <message>"``,
    so a user can fix a config file in one pass.
    """

    exit_code = 1

    def __init__(self, message: str, *, violations: list[str] | None = None) -> None:
        super().__init__(message)
        self.violations = list(violations or [])


class DataError(RestAdaptError, ValueError):
    """
    Input data does not satisfy the contract of the operation.
    """

    exit_code = 2


class FormatError(DataError):
    """
    Trials cannot be written as one pack (heterogeneous channels / rates, duplicate ids).
    """


class ArtifactIOError(DataError):
    """
    An output file (pack member, checkpoint, report, snapshot) cannot be written. `path` names it.
    """

    def __init__(self, message: str, *, path: str | None = None) -> None:
        super().__init__(message)
        self.path = path


class PackIOError(ArtifactIOError):
    """
    The pack directory cannot be written.
    """


class PackLoadError(DataError):
    """
    A pack cannot be read back. `trial_id` and `path` name the offending record when known.
    """

    def __init__(self, message: str, *, trial_id: str | None = None, path: str | None = None) -> None:
        super().__init__(message)
        self.trial_id = trial_id
        self.path = path


class SplitError(DataError):
    """
    Leave-one-subject-out split is impossible for the given manifest.
    """


class EpochError(DataError):
    """
    Recording too short to cut the resting / task windows.
    """


class SignalLengthError(DataError):
    """
    Signal too short for forward-backward filtering.
    """


class DimensionError(DataError):
    """
    Input shape does not match the model or the loss operands.
    """


class LossInputError(DataError):
    """
    Loss operands violate their contract (label range, mismatched lengths).
    """


class TripletError(DataError):
    """
    Triplets cannot be formed (fewer than two subjects in a batch).
    """


class AdaptationError(DataError):
    """
    Adaptation requested without calibrated signals.
    """


class EvaluationError(DataError):
    """
    Evaluation requested on an empty test set.
    """


class NumericalError(RestAdaptError, ArithmeticError):
    """
    Non-finite values encountered during optimization.
    """

    exit_code = 3


class GradientError(NumericalError):
    """
    The objective handed to a gradient routine is not finite.
    """


class DivergenceError(NumericalError):
    """
    Stage-1 training produced a non-finite loss.

    `result` holds the training result built from the last finite checkpoint so
    callers can still persist it.
    """

    def __init__(self, message: str, *, result: Any = None) -> None:
        super().__init__(message)
        self.result = result
