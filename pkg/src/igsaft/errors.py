"""Exception types shared across the package."""


class SchemaError(ValueError):
    """Input file or column mapping does not match the expected schema."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class IllPosedError(RuntimeError):
    """A fit is requested with too little data for the design size."""


class EstimationError(RuntimeError):
    """Numerical estimation failed beyond recoverable fallbacks."""


class CalibrationError(RuntimeError):
    """Censoring calibration could not bracket the target rate."""
