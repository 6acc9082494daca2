"""Exception types shared across the toolkit."""


class RoadSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RoadSegError):
    """Invalid configuration value, preset name, or file."""


class FormatError(RoadSegError):
    """A file exists but cannot be decoded as expected."""


class MaskShapeError(RoadSegError):
    """Image and mask spatial dimensions disagree."""


class UnknownClassError(RoadSegError):
    """A mask contains a value outside the label schema."""


class EmptyCorpusError(RoadSegError):
    """An operation that needs samples received none."""


class GenerationError(RoadSegError):
    """Synthetic generation could not satisfy its constraints."""


class ShapeError(RoadSegError):
    """Tensor/array shapes violate an operation's contract."""


class CheckpointError(RoadSegError):
    """Checkpoint file or parameter map does not match the model."""


class DivergenceError(RoadSegError):
    """Training produced a non-finite loss."""


class EmptyEvaluationError(RoadSegError):
    """Metrics were requested from an empty confusion matrix."""
