"""Exception types raised across the pipeline."""


class SplatError(Exception):
    """Base class for all errors raised by splatsweep."""


class InvalidParameterError(SplatError, ValueError):
    pass


class ShapeError(SplatError, ValueError):
    pass


class EmptyCloudError(SplatError, ValueError):
    pass


class UnknownCameraError(SplatError, KeyError):
    pass


class EmptyMeshError(SplatError, ValueError):
    pass


class AtlasTooSmallError(SplatError, ValueError):
    def __init__(self, message: str, required_size: int):
        super().__init__(message)
        self.required_size = required_size


class ConfigError(SplatError, ValueError):
    pass


class FormatError(SplatError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    def __init__(self, message: str, expected: int, actual: int, offset: int | None = None):
        super().__init__(f"{message}: expected {expected} records, found {actual}", offset)
        self.expected = expected
        self.actual = actual


class UnsupportedVersionError(FormatError):
    pass


class ImageReadError(SplatError, OSError):
    pass
