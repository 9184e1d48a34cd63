"""Exception hierarchy shared by every datforge module."""


class DatForgeError(Exception):
    """Base class for all structured errors raised by datforge."""


class ShapeError(DatForgeError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class FormatError(DatForgeError):
    """A file on disk does not conform to its documented format."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class ConsistencyError(DatForgeError):
    """Two artifacts that must agree (ids, names, shapes) disagree."""


class NonFiniteError(DatForgeError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class ConfigError(DatForgeError):
    """A run configuration key is unknown, mistyped or violates an invariant."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class MissingArtifactError(DatForgeError):
    """A pipeline prerequisite has not been produced yet."""

    def __init__(self, what, producer):
        self.what = what
        self.producer = producer
        super().__init__(f"missing {what}; run `dat-forge {producer}` first")
