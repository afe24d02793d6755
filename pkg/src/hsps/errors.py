"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""


class HspsError(Exception):
    kind = "error"


class InvalidParameterError(HspsError, ValueError):
    kind = "invalid-parameter"


class ConfigurationError(HspsError, ValueError):
    kind = "configuration"

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.message = message
        self.field = field


class PreconditionError(HspsError, ValueError):
    kind = "precondition"


class InsufficientDataError(HspsError):
    kind = "insufficient-data"


class DegenerateDesignError(InsufficientDataError):
    kind = "degenerate-design"


class CalibrationError(HspsError):
    kind = "calibration-failure"


class AccuracyError(HspsError):
    kind = "accuracy"


class TimetagParseError(HspsError, ValueError):
    kind = "parse"

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TimetagValidationError(TimetagParseError):
    kind = "validation"
