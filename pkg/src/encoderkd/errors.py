"""Exception hierarchy.

Every error carries a stable ``code`` string so the command line can print
machine-parseable failure lines.
"""


class DistillError(Exception):
    code = "DISTILL_ERROR"


class DimensionMismatch(DistillError, ValueError):
    code = "DIMENSION_MISMATCH"


class InvalidAxis(DistillError, ValueError):
    code = "INVALID_AXIS"


class NonScalarLoss(DistillError, ValueError):
    code = "NON_SCALAR_LOSS"


class DetachedGraph(DistillError, RuntimeError):
    code = "DETACHED_GRAPH"


class NonDeterministicFunction(DistillError, RuntimeError):
    code = "NON_DETERMINISTIC_FUNCTION"


class SequenceTooLong(DistillError, ValueError):
    code = "SEQUENCE_TOO_LONG"


class UnknownTokenId(DistillError, ValueError):
    code = "UNKNOWN_TOKEN_ID"


class MissingHead(DistillError, RuntimeError):
    code = "MISSING_HEAD"


class PositionOutOfRange(DistillError, IndexError):
    code = "POSITION_OUT_OF_RANGE"


class ShapeMismatch(DistillError, ValueError):
    code = "SHAPE_MISMATCH"


class NonpositiveTemperature(DistillError, ValueError):
    code = "NONPOSITIVE_TEMPERATURE"


class MissingProjection(DistillError, KeyError):
    code = "MISSING_PROJECTION"


class LengthMismatch(DistillError, ValueError):
    code = "LENGTH_MISMATCH"


class BatchTooSmall(DistillError, ValueError):
    code = "BATCH_TOO_SMALL"


class HeadCountMismatch(DistillError, ValueError):
    code = "HEAD_COUNT_MISMATCH"


class InvalidDistribution(DistillError, ValueError):
    code = "INVALID_DISTRIBUTION"


class MissingTerm(DistillError, KeyError):
    code = "MISSING_TERM"


class IndivisibleDepth(DistillError, ValueError):
    code = "INDIVISIBLE_DEPTH"


class InvalidExplicitList(DistillError, ValueError):
    code = "INVALID_EXPLICIT_LIST"


class MapLengthMismatch(DistillError, ValueError):
    code = "MAP_LENGTH_MISMATCH"


class EmptyMapForTaskSpecific(DistillError, ValueError):
    code = "EMPTY_MAP_FOR_TASK_SPECIFIC"


class MissingTeacher(DistillError, ValueError):
    code = "MISSING_TEACHER"


class UntrainedTeacher(DistillError, RuntimeError):
    code = "UNTRAINED_TEACHER"


class EmptyCorpus(DistillError, ValueError):
    code = "EMPTY_CORPUS"


class NoDevSplit(DistillError, ValueError):
    code = "NO_DEV_SPLIT"


class StepOutOfRange(DistillError, ValueError):
    code = "STEP_OUT_OF_RANGE"


class MissingColumn(DistillError, ValueError):
    code = "MISSING_COLUMN"


class EmptyFile(DistillError, ValueError):
    code = "EMPTY_FILE"


class InvalidSize(DistillError, ValueError):
    code = "INVALID_SIZE"


class TooFewPairs(DistillError, ValueError):
    code = "TOO_FEW_PAIRS"


class EmptyRecords(DistillError, ValueError):
    code = "EMPTY_RECORDS"


class DuplicateSeed(DistillError, ValueError):
    code = "DUPLICATE_SEED"


class ConfigInvalid(DistillError, ValueError):
    code = "CONFIG_INVALID"


class RuntimeFailure(DistillError, RuntimeError):
    code = "RUNTIME_FAILURE"
