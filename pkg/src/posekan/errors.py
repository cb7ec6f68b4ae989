"""Exception hierarchy shared across the package."""


class PoseKanError(Exception):
    """Base class for all package errors."""


# graph
class IsolatedJointError(PoseKanError, ValueError):
    pass


class IndexOutOfRangeError(PoseKanError, IndexError):
    pass


class SelfLoopError(PoseKanError, ValueError):
    pass


class ScalingOutOfRangeError(PoseKanError, ValueError):
    pass


class SingularFrequencyError(PoseKanError, ZeroDivisionError):
    pass


# tensors / layers
class ShapeMismatchError(PoseKanError, ValueError):
    pass


class NonFiniteInputError(PoseKanError, ValueError):
    pass


class StaleCacheError(PoseKanError, ValueError):
    pass


class BadDimensionsError(PoseKanError, ValueError):
    pass


# model / checkpoint
class BadConfigError(PoseKanError, ValueError):
    pass


class VersionMismatchError(PoseKanError, ValueError):
    pass


class CorruptChecksumError(PoseKanError, ValueError):
    pass


# training
class NonFiniteGradientError(PoseKanError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class NonFiniteLossError(PoseKanError, FloatingPointError):
    def __init__(self, epoch, batch_index, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}"
        )
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss


class MissingGroundTruthError(PoseKanError, ValueError):
    pass


# data
class ParseError(PoseKanError, ValueError):
    def __init__(self, message, record=None, line=None):
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.record = record
        self.line = line


class JointCountMismatchError(PoseKanError, ValueError):
    pass


class NonFiniteValueError(PoseKanError, ValueError):
    pass


class BadImageDimsError(PoseKanError, ValueError):
    pass


class DegenerateConfigurationError(PoseKanError, ValueError):
    pass
