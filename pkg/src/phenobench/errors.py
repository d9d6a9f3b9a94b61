"""Exception hierarchy shared by all pipeline stages."""


class PhenobenchError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(PhenobenchError, ValueError):
    """A file does not match its declared columnar layout."""


class ValidationError(PhenobenchError, ValueError):
    """Data parsed correctly but violates a type invariant."""


class InsufficientDataError(PhenobenchError, ValueError):
    """Too few rows/profiles/pairs for the requested computation."""


class DimensionMismatchError(PhenobenchError, ValueError):
    pass


class DegenerateVectorError(PhenobenchError, ValueError):
    """A vector that must have positive length has (near) zero norm."""


class UndefinedMeanError(PhenobenchError, ValueError):
    """Replicates cancel out so their spherical mean has no direction."""


class EmptyGroupError(PhenobenchError, ValueError):
    pass


class TilingError(PhenobenchError, ValueError):
    pass


class CoverageError(PhenobenchError, ValueError):
    """No annotated pair of a database is covered by the profiled genes."""


class UsageError(PhenobenchError, ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class TrainingDivergedError(PhenobenchError, RuntimeError):
    """Loss became NaN or infinite during training."""
