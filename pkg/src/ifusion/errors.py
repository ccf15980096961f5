"""Exception hierarchy shared across the package."""


class IfusionError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IfusionError):
    """Operands have incompatible shapes."""


class ConfigError(IfusionError):
    """A configuration value or combination is invalid."""


class ContractError(IfusionError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(IfusionError):
    """An operation produced NaN or Inf values."""


class FormatError(IfusionError):
    """A binary or JSON artifact does not match its format."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """File payload is shorter than its header declares."""


class ManifestError(FormatError):
    """Checkpoint manifest is malformed or inconsistent with the model."""


class TrainingAbort(IfusionError):
    """Training hit a non-finite loss; carries diagnostics."""

    def __init__(self, message, param_norms=None, batch_indices=None):
        super().__init__(message)
        self.param_norms = param_norms or {}
        self.batch_indices = list(batch_indices or [])
