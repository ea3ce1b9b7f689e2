"""Exception types raised across the toolkit."""


class CamKitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CamKitError, ValueError):
    """Operands have incompatible shapes or ranks."""


class ParameterError(CamKitError, ValueError):
    """A parameter value lies outside its documented domain."""


class NonFiniteError(CamKitError, ValueError):
    """A tensor contains NaN or infinite entries."""


class ModelValidationError(CamKitError, ValueError):
    """A model description is internally inconsistent."""


class WeightsFormatError(CamKitError, ValueError):
    """A weights file is malformed, truncated, or does not match the model."""


class UnknownLayerError(CamKitError, KeyError):
    """A layer name does not exist in the model."""


class UnknownClassError(CamKitError, IndexError):
    """A class index is outside the model's output range."""


class EvaluationError(CamKitError, ValueError):
    """An evaluation request cannot be satisfied (empty data, zero scores)."""
