"""Exception hierarchy shared by every stage of the harness.

Each class carries the process exit code the CLI reports for it.
"""


class CxrLabError(Exception):
    exit_code = 1


class ValidationError(CxrLabError, ValueError):
    """Bad argument, malformed input, or violated precondition."""

    exit_code = 1


class CapacityError(ValidationError):
    """Requested more items than are available."""


class InfeasibleTargetError(ValidationError):
    def __init__(self, message, best_achievable):
        super().__init__(message)
        self.best_achievable = best_achievable


class UndefinedMetricError(ValidationError):
    def __init__(self, metric):
        super().__init__(f"{metric} is undefined: zero denominator")
        self.metric = metric


class IngestionError(CxrLabError):
    exit_code = 2


class ConfigurationError(CxrLabError):
    exit_code = 1


class LayerNameError(ValidationError):
    def __init__(self, layer, valid):
        super().__init__(f"unknown tap layer {layer!r}; valid layers: {', '.join(valid)}")
        self.layer = layer
        self.valid = list(valid)


class CoverageError(ValidationError):
    def __init__(self, model_id, image_id):
        super().__init__(f"model {model_id!r} has no probability for image {image_id!r}")
        self.model_id = model_id
        self.image_id = image_id


class NumericalError(CxrLabError, ArithmeticError):
    exit_code = 3


class SegmentationError(CxrLabError):
    exit_code = 3


class DegenerateSegmentationError(ValidationError):
    def __init__(self, mask_name):
        super().__init__(f"mask {mask_name!r} is empty")
        self.mask_name = mask_name


class ScorerError(CxrLabError):
    """Raised when a scorer fails during occlusion probing."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class MissingInputError(CxrLabError):
    exit_code = 2

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing inputs: " + ", ".join(self.missing))
