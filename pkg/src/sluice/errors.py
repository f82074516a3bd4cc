"""Exception hierarchy shared across the package."""


class SluiceError(Exception):
    """Base class for every error raised by sluice."""


# graph
class GraphError(SluiceError):
    pass


class UnknownTransform(GraphError):
    pass


class ArityMismatch(GraphError):
    pass


class DuplicateTag(GraphError):
    pass


class AlreadyBound(GraphError):
    pass


class EmptyDataset(GraphError):
    pass


class NotAPermutation(GraphError):
    pass


class SpecFileError(GraphError):
    pass


class ValidationFailed(GraphError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


# telemetry
class TelemetryError(SluiceError):
    pass


class InvalidPeriod(TelemetryError):
    pass


class UnknownPipeId(SluiceError):
    pass


class InvalidSampleCount(TelemetryError):
    pass


class CorruptFile(TelemetryError):
    pass


# optimizer
class OptimizerError(SluiceError):
    pass


class MissingStats(OptimizerError):
    pass


class ZeroInputSize(OptimizerError):
    pass


class IllegalCacheSite(OptimizerError):
    pass


class GroupNotContiguous(SluiceError):
    pass


class PlanSpaceOverflow(OptimizerError):
    def __init__(self, count, cap):
        self.count = count
        self.cap = cap
        super().__init__(f"{count} candidate plans exceed the cap of {cap}")


# runtime
class RuntimeFailure(SluiceError):
    pass


class DuplicateId(RuntimeFailure):
    pass


class SingletonFusion(RuntimeFailure):
    pass


class VariantMismatch(RuntimeFailure):
    pass


class EpochInProgress(RuntimeFailure):
    pass


class UnsupportedVariant(RuntimeFailure):
    pass


class InvalidShardCount(RuntimeFailure):
    pass


class ResourceExhausted(RuntimeFailure):
    pass


class UnknownSite(RuntimeFailure):
    pass


class BackendUnavailable(RuntimeFailure):
    pass


class UnsupportedTopology(RuntimeFailure):
    pass


class PipelineStalled(RuntimeFailure):
    pass


class DrainTimeout(RuntimeFailure):
    pass


class TransformFailed(RuntimeFailure):
    """A transform kept failing on one sample after every re-emit retry."""

    def __init__(self, pipe_id, sample_id, cause):
        self.pipe_id = pipe_id
        self.sample_id = sample_id
        self.cause = cause
        super().__init__(f"pipe {pipe_id} failed on sample {sample_id}: {cause}")


# reliability
class ReliabilityError(SluiceError):
    pass


class VersionMismatch(ReliabilityError):
    pass


class CorruptCheckpoint(ReliabilityError):
    pass


class UnknownSample(ReliabilityError):
    pass


class SealedSplit(ReliabilityError):
    pass


class OrderBufferOverflow(ReliabilityError):
    pass


# remote
class RemoteError(SluiceError):
    pass


class ProtocolViolation(RemoteError):
    pass


class ConnectionLost(RemoteError):
    pass


class BindFailure(RemoteError):
    pass


class FrameError(RemoteError):
    pass


# autotune / cli
class NoOp(SluiceError):
    pass


class UnknownScenario(SluiceError):
    pass
