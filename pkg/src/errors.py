"""
Exception hierarchy shared by every subsystem.

Callers catch ReconSegError at the CLI boundary; the mixed-in builtin bases
keep `except ValueError` style handling working for library users.
"""


class ReconSegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ReconSegError, ValueError):
    """Operand shapes are incompatible. The message names every shape involved."""


class NumericError(ReconSegError, ArithmeticError):
    """NaN input or a non-finite objective."""


class ConfigurationError(ReconSegError, ValueError):
    """Invalid configuration value, unknown config key, or inconsistent model layout."""


class InputError(ReconSegError, ValueError):
    """Input data outside its domain (e.g. pixel intensities outside [0, 1])."""


class VocabularyError(ReconSegError, KeyError):
    """Token id outside the vocabulary, or a malformed vocabulary file."""


class NotApplicableError(ReconSegError):
    """The operation does not apply to this input (e.g. counterfactual on a one-shape scene)."""


class CheckpointError(ReconSegError):
    """Checkpoint manifest and payload disagree, or do not match the model."""


class TrainingDivergedError(ReconSegError, RuntimeError):
    """Loss became non-finite. Carries where the diagnostic and last good checkpoint live."""

    def __init__(self, message: str, diagnostic_path=None, last_good_checkpoint=None) -> None:
        super().__init__(message)
        self.diagnostic_path = diagnostic_path
        self.last_good_checkpoint = last_good_checkpoint
