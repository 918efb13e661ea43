"""Exception types raised across the package."""


class HeraError(Exception):
    """Base class for all package errors."""


class BehindCamera(HeraError):
    pass


class InvalidParameter(HeraError, ValueError):
    pass


class DegenerateFacet(HeraError):
    def __init__(self, facet_id, message=None):
        self.facet_id = int(facet_id)
        super().__init__(message or f"facet {self.facet_id} is degenerate")


class SizeMismatch(HeraError, ValueError):
    pass


class ShapeMismatch(HeraError, ValueError):
    pass


class MissingForwardState(HeraError):
    pass


class AssetError(HeraError):
    """Base for loader failures; carries the offending path when known."""

    def __init__(self, message, path=None):
        self.path = None if path is None else str(path)
        prefix = f"{self.path}: " if self.path else ""
        super().__init__(prefix + message)


class ParseError(AssetError):
    def __init__(self, message, path=None, line=None, record=None):
        self.line = line
        self.record = record
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif record is not None:
            where = f"record {record}: "
        super().__init__(where + message, path)


class MissingUVs(AssetError):
    pass


class UnsupportedAscii(AssetError):
    pass


class NonOrthonormalRotation(AssetError):
    pass


class DuplicateName(AssetError):
    pass


class TopologyMismatch(AssetError):
    pass


class NumericalFailure(HeraError):
    pass
