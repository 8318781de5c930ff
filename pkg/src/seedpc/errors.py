"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class InvalidCloud(ValueError):
    """Point cloud data is structurally invalid (shape, NaN/Inf, color range)."""


class ParseError(ValueError):
    """A file could not be parsed.  Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyIndex(ValueError):
    """A spatial index was built over, or queried with, zero points."""


class InvalidLevel(ValueError):
    """Grid level outside the supported range."""


class EmptyPatch(ValueError):
    """An operation that needs a non-empty patch received an empty one."""


class DegenerateWeights(ValueError):
    """Seed weight rows whose absolute sum vanished; aggregation undefined."""


class UnsupportedStream(ValueError):
    """Stream magic/version not recognised by this codec."""


class DecodeError(ValueError):
    """Bitstream is structurally corrupt.  Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"byte {offset}: {message}"
        super().__init__(message)
        self.offset = offset


class UseAfterBackward(RuntimeError):
    """A tape was reused after its single backward pass."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


class NoOverlap(ValueError):
    """Rate ranges of two curves do not overlap; delta undefined."""
