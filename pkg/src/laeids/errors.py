"""Exception hierarchy shared by every stage of the pipeline."""


class LaeidsError(Exception):
    """Base class for all pipeline errors."""


# ingest
class MissingFile(LaeidsError, FileNotFoundError):
    pass


class SchemaMismatch(LaeidsError):
    pass


class EmptyInput(LaeidsError):
    pass


class NonMonotonicTimestamps(LaeidsError):
    def __init__(self, key):
        super().__init__(f"timestamps go backwards for flow {key!r}")
        self.key = key


# imaging / classify
class EmptySource(LaeidsError):
    pass


class NonFiniteFeature(LaeidsError):
    pass


# diffusion
class InvalidRange(LaeidsError, ValueError):
    pass


class LengthMismatch(LaeidsError, ValueError):
    pass


class StepOutOfRange(LaeidsError, ValueError):
    pass


class NonFiniteLoss(LaeidsError, FloatingPointError):
    pass


class ShapeMismatch(LaeidsError, ValueError):
    pass


# pso_select
class InvalidDimensions(LaeidsError, ValueError):
    pass


class DegenerateSplit(LaeidsError):
    pass


class EmptyRepository(LaeidsError):
    pass


# advisor
class AdvisorError(LaeidsError):
    pass


class AdvisorTimeout(AdvisorError):
    pass


class AdvisorHttpError(AdvisorError):
    pass


class MalformedResponse(AdvisorError):
    pass


# classify
class SingleClassInput(LaeidsError):
    pass


class IncompletePool(LaeidsError):
    pass


class DimensionMismatch(LaeidsError, ValueError):
    pass


# orchestrator / swarm_env / harness
class UnknownNode(LaeidsError):
    pass


class UnorderedEvents(LaeidsError):
    pass


class MissingClassInSource(LaeidsError):
    pass


class ClassOutOfRange(LaeidsError, ValueError):
    pass


class EmptyMatrix(LaeidsError):
    pass


class ZeroRate(LaeidsError, ZeroDivisionError):
    pass


class InfeasibleFraction(LaeidsError):
    pass


class StageError(LaeidsError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
