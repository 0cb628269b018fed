"""Exception hierarchy shared by all halognn modules."""


class HaloGnnError(Exception):
    pass


class ValidationError(HaloGnnError):
    """Invalid domain values: bad shapes, out-of-range indices, broken invariants."""


class ConfigError(HaloGnnError):
    """Malformed or inconsistent run configuration."""


class FormatError(HaloGnnError):
    """Corrupt or truncated binary file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(HaloGnnError):
    """Non-finite values produced by a named computation stage."""


class DivergenceError(HaloGnnError):
    """Worker replicas no longer hold identical state."""
