"""Exception types raised across the package."""


class AtscError(Exception):
    """Base class for all package errors."""


class InsufficientData(AtscError):
    pass


class MalformedXml(AtscError):
    pass


class OffsetOutOfRange(AtscError):
    pass


class DegenerateSequence(AtscError):
    pass


class ShapeMismatch(AtscError):
    pass


class NoMaskedPositions(AtscError):
    pass


class GraphConsumed(AtscError):
    pass


class VocabMismatch(AtscError):
    pass


class CorruptShard(AtscError):
    pass


class CorruptCheckpoint(AtscError):
    pass


class EmptyDataset(AtscError):
    pass


class EmptyInput(AtscError):
    pass


class InsufficientRuns(AtscError):
    pass


class MissingArtifact(AtscError):
    pass


class MissingBaseline(AtscError):
    pass


class IndexInTarget(AtscError):
    pass


class IndexOutOfRange(AtscError):
    pass


class TestSplitLeak(AtscError):
    """A test-split example reached a training routine."""

    __test__ = False
