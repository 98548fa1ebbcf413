"""Exception types shared across the package."""


class TriggerErasureError(Exception):
    """Base class for all package errors."""


class ValidationError(TriggerErasureError, ValueError):
    """Bad input, configuration or file contents (CLI exit code 2)."""


class NotPositiveDefinite(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class CorruptFile(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class LayerOutOfRange(IndexOutOfRange):
    pass


class UniverseMismatch(ValidationError):
    pass


class AllClustersEmpty(TriggerErasureError):
    pass


class IndivisibleDimensions(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class FootprintOverflow(ValidationError):
    pass


class TooFewCleanEpisodes(ValidationError):
    pass


class NonFiniteLoss(TriggerErasureError, ArithmeticError):
    """Training diverged (CLI exit code 3)."""


class ConstructionFailed(TriggerErasureError):
    """The backdoored encoder could not satisfy its probe invariants."""
