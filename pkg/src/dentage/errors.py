"""Exception hierarchy shared by every dentage module."""

from __future__ import annotations


class DentageError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 2


class ConfigError(DentageError):
    exit_code = 1


class UnknownConfigKey(ConfigError):
    pass


# dataset ---------------------------------------------------------------


class MissingFile(ConfigError):
    pass


class ManifestError(DentageError):
    exit_code = 1

    def __init__(self, row: int, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"manifest row {row}: {reason}")


class MalformedRow(ManifestError):
    pass


class NonNumericAge(ManifestError):
    pass


class AgeOutOfConfiguredBounds(ManifestError):
    pass


class CountMismatch(DentageError):
    exit_code = 1


class DecodeFailure(DentageError):
    pass


class UnknownNormalizationKey(DentageError):
    exit_code = 1


# models ----------------------------------------------------------------


class WeightsUnavailable(DentageError):
    pass


class UnsupportedInputShape(DentageError):
    exit_code = 1


class IndexOutOfRange(DentageError):
    exit_code = 1


class IncompatibleFeatureShape(DentageError):
    pass


class ShapeMismatch(DentageError):
    pass


class CheckpointMismatch(DentageError):
    pass


# training / evaluation -------------------------------------------------


class EmptySplit(DentageError):
    pass


class NonFiniteLoss(DentageError):
    pass


class EmptyBatch(DentageError, ValueError):
    pass


class ZeroVariance(DentageError, ValueError):
    pass


class UnknownLayer(DentageError):
    pass


class NonDifferentiablePath(DentageError):
    pass


class InsufficientData(DentageError, ValueError):
    pass


class NoModels(ConfigError):
    pass


class OutputExists(ConfigError):
    pass
