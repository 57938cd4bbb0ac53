"""Exception types shared across the package."""


class HitrackError(Exception):
    """Base class for all package errors."""


class ShapeError(HitrackError):
    """Array extents are inconsistent with what an operation requires."""


class DataError(HitrackError):
    """A file or external input could not be parsed or validated."""


class NumericError(HitrackError):
    """A computation produced non-finite values or diverged."""
