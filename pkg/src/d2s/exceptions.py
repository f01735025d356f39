"""Exception hierarchy shared across the package."""


class D2SError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(D2SError, ValueError):
    def __init__(self, op, *shapes):
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonScalarLoss(D2SError, ValueError):
    pass


class NonPositiveDepth(D2SError, ValueError):
    pass


class DimensionMismatch(D2SError, ValueError):
    pass


class EmptyDataset(D2SError, ValueError):
    pass


class DegenerateSample(D2SError, ValueError):
    pass


class TooFewCorrespondences(D2SError, ValueError):
    pass


class NoConsensus(D2SError, RuntimeError):
    pass


class BadConfig(D2SError, ValueError):
    pass


class InsufficientVisibility(D2SError, ValueError):
    pass


class IoError(D2SError, OSError):
    pass


class FormatError(D2SError, ValueError):
    """Malformed file content; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ArchitectureMismatch(D2SError, ValueError):
    pass


class NotFittedError(D2SError, AttributeError):
    pass
