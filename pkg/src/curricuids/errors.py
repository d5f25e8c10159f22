"""Exception hierarchy shared across the package."""


class CurricuidsError(Exception):
    """Base class for every runtime failure the pipeline raises on purpose."""


# data pipeline
class MissingFile(CurricuidsError):
    pass


class MissingLabelColumn(CurricuidsError):
    pass


class RaggedRow(CurricuidsError):
    pass


class AllRowsRemoved(CurricuidsError):
    pass


class EmptyTrainSet(CurricuidsError):
    pass


class DimensionMismatch(CurricuidsError):
    pass


class SingleClassInput(CurricuidsError):
    pass


class UnknownDatasetKind(CurricuidsError):
    pass


class InvalidConfig(CurricuidsError):
    pass


# autodiff engine
class ShapeMismatch(CurricuidsError):
    pass


class EvenKernel(CurricuidsError):
    pass


class TapeReuse(CurricuidsError):
    pass


class NonFiniteValue(CurricuidsError):
    pass


# model / training
class FeatureCountMismatch(CurricuidsError):
    pass


class EmptyKeepSet(CurricuidsError):
    pass


class EmptyStage(CurricuidsError):
    pass


class DivergenceDetected(CurricuidsError):
    pass


# explanations / compression / ensemble
class DegeneratePredictions(CurricuidsError):
    pass


class EmptyList(CurricuidsError):
    pass


class NonFiniteWeight(CurricuidsError):
    pass


class FoldTooSmall(CurricuidsError):
    pass


class LengthMismatch(CurricuidsError):
    pass


class IoFailure(CurricuidsError):
    pass
