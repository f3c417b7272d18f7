"""Exception types raised across the package."""


class DeconvError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(DeconvError):
    """Matrix could not be factorized even after the jitter policy."""


class DimensionMismatch(DeconvError):
    """Array shapes are inconsistent."""


class InvalidDegreesOfFreedom(DeconvError):
    """Inverse-Wishart degrees of freedom must exceed dim - 1."""


class NonPositiveConcentration(DeconvError):
    """Dirichlet concentrations must be strictly positive."""


class EmptyInterval(DeconvError):
    """Truncation interval [lo, hi] is empty."""


class OutOfSupport(DeconvError):
    """Evaluation point lies outside the spline support [A, B]."""


class TooFewCoefficients(DeconvError):
    """Second-difference penalty needs at least 3 coefficients."""


class LabelOutOfRange(DeconvError):
    """Cluster label outside {0, ..., K-1}."""


class AllResponsibilitiesUnderflow(DeconvError):
    """Every component log-density at a point is non-finite."""


class DegenerateWeight(DeconvError):
    """Closing mixture weight too small to enforce the mean constraint."""


class ScaleUnderflow(DeconvError):
    """A variance-function scale fell below the numerical floor."""


class InsufficientReplicates(DeconvError):
    """Every subject has a single replicate; error scale not identifiable."""


class EmptyDataset(DeconvError):
    """Dataset contains no observations."""


class UnknownStructure(DeconvError):
    """Unrecognized covariance structure name."""


class ZeroImportanceDensity(DeconvError):
    """Importance density vanished at a sampled point."""


class ConfigError(DeconvError):
    """Invalid run configuration (CLI exit code 2)."""


class DataError(DeconvError):
    """Invalid input data file (CLI exit code 3)."""
