"""Exception types shared across the toolkit."""


class OrientdetError(Exception):
    """Base class for all toolkit errors."""


class DegenerateBox(OrientdetError):
    """Box has no usable extent (a side-distance pair sums to zero)."""


class DegeneratePolygon(OrientdetError):
    """Polygon vertices are collinear or enclose no area."""


class ShapeError(OrientdetError):
    """Array arguments have incompatible shapes."""


class ContractError(OrientdetError):
    """An API precondition was violated by the caller."""


class ParseError(OrientdetError):
    """A text input (annotation file, config) could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ManifestError(OrientdetError):
    """Checkpoint manifest does not match the stored data or the model."""


class NumericFailure(OrientdetError):
    """Training produced a non-finite loss."""
