"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class LengthError(ValueError):
    """A sequence exceeds the encoder's maximum length."""


class DegenerateInputError(ValueError):
    """Input leaves nothing to pool or score."""


class ConfigError(ValueError):
    """Configuration failed validation."""


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
