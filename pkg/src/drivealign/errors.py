"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raise the most specific
type available and name the offending file/field in the message.
"""


class DriveAlignError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DriveAlignError):
    """Invalid configuration value or inconsistent option combination."""


class DataFormatError(DriveAlignError):
    """Malformed on-disk data (bad record, missing field, hash mismatch)."""

    def __init__(self, message, path=None, line=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if line is not None:
            detail = f"{detail} (line {line})"
        super().__init__(detail)
        self.path = path
        self.line = line


class InvalidStateError(DriveAlignError):
    """Non-finite or otherwise unusable kinematic state/action."""


class GenerationError(DriveAlignError):
    """Scene generation could not produce a valid scene."""


class ModelError(DriveAlignError):
    """A learned model produced unusable output (non-finite, wrong shape)."""


class TrainingError(DriveAlignError):
    """Training aborted (non-finite gradients or loss)."""
