"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array did not have the shape an operation requires."""


class SizeGuardError(ValueError):
    """A dense materialization would exceed the configured entry budget."""


class DivergenceError(RuntimeError):
    """An iterative procedure produced a non-finite value."""


class UnsupportedActivationError(ValueError):
    """The activation cannot be inverted."""


class DegenerateInputError(ValueError):
    """Input has no variance (or is otherwise degenerate) for the requested statistic."""


class TnsrFormatError(ValueError):
    """Malformed TNSR payload. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
