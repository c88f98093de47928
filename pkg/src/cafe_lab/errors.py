"""Structured errors and warnings shared across the package."""


class CafeLabError(Exception):
    """Base error; ``code`` is a stable machine-readable identifier."""

    code = "error"

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def record(self):
        return {"code": self.code, "message": self.message}


class ShapeError(CafeLabError):
    code = "shape-mismatch"


class FormatError(CafeLabError):
    code = "bad-format"


class EnumerationCapError(CafeLabError):
    code = "enumeration-cap"


class RegenerationError(CafeLabError):
    """Fake-gradient pool never came within the acceptance distance."""

    code = "regeneration-exhausted"


class ConfigError(CafeLabError):
    code = "bad-config"


class DegenerateRecoveryWarning(UserWarning):
    """Recovery target is not uniquely determined (e.g. batch covers all rows)."""


class HypothesisViolationWarning(UserWarning):
    """A convexity hypothesis of the recovery guarantee does not hold."""


class ConfigWarning(UserWarning):
    """Configuration is legal but outside the guaranteed-recovery regime."""
