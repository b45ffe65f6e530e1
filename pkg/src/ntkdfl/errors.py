"""Exception types shared across the package."""


class BadMagic(ValueError):
    """IDX header magic number is not a supported u8 tensor type."""


class TruncatedPayload(ValueError):
    """IDX payload is shorter than the declared dimensions require."""


class EmptyClass(ValueError):
    """A label class required by the partitioner has no samples."""


class InfeasibleDegree(ValueError):
    """Requested regular-graph degree violates parity or range bounds."""


class NumericalError(RuntimeError):
    """A numerical routine failed (non-convergence, lost positive
    semidefiniteness, or non-finite results)."""


class ConfigError(ValueError):
    """Config parsing/validation failure; message names the offending field."""
