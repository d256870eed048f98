"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent or unsatisfiable configuration supplied by the caller."""


class ParseError(ValueError):
    """Malformed on-disk data. Carries the offending path and, when known,
    the byte offset."""

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail += f" (file: {path}"
            if offset is not None:
                detail += f", byte offset: {offset}"
            detail += ")"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""
