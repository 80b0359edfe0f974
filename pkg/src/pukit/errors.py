"""Exception types shared across the toolkit."""


class PukitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(PukitError, ValueError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.line = line
        self.offset = offset


class EmptyMesh(PukitError, ValueError):
    pass


class EmptyCloud(PukitError, ValueError):
    pass


class KTooLarge(PukitError, ValueError):
    pass


class MTooLarge(PukitError, ValueError):
    pass


class PatchTooSmall(PukitError, ValueError):
    pass


class ShapeMismatch(PukitError, ValueError):
    pass


class SizeMismatch(PukitError, ValueError):
    pass


class TooFewPoints(PukitError, ValueError):
    pass


class TooFewSources(PukitError, ValueError):
    pass


class NotDivisible(PukitError, ValueError):
    pass


class DatasetEmpty(PukitError, RuntimeError):
    pass


class NoForwardRecorded(PukitError, RuntimeError):
    pass


class NonConvergence(PukitError, RuntimeError):
    """Raised when the auction solver hits its iteration cap.

    ``matching`` holds the best complete bijection found so far.
    """

    def __init__(self, message, matching=None):
        super().__init__(message)
        self.matching = matching


class CheckpointMismatch(PukitError, ValueError):
    pass


class ConfigError(PukitError, ValueError):
    pass


class TrainingDiverged(PukitError, RuntimeError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id
