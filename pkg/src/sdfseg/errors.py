"""Shared exception types."""


class SdfSegError(Exception):
    """Base class for all package errors."""


class DomainError(SdfSegError, ValueError):
    """A query point lies outside the field/encoding domain."""


class ParseError(SdfSegError, ValueError):
    """A scene file could not be parsed; message names file and line."""


class DimensionError(SdfSegError, ValueError):
    """Image/mask dimensions disagree with the camera intrinsics."""


class UnsupportedModelError(SdfSegError, ValueError):
    """Camera model other than PINHOLE / SIMPLE_PINHOLE."""


class GeometryError(SdfSegError, ValueError):
    """Degenerate or self-intersecting synthetic scene geometry."""


class NonFiniteLossError(SdfSegError, RuntimeError):
    """Training produced a NaN/inf loss term; message names step and term."""
