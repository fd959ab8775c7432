"""Exception types shared across the package."""


class SparseGPError(Exception):
    """Base class for every error raised by this package."""


class NonSquare(SparseGPError):
    """A square matrix was required."""


class AsymmetricInput(SparseGPError):
    """A symmetric matrix was required."""


class NotPositiveDefinite(SparseGPError):
    """Cholesky factorization failed, even after jitter escalation."""


class ZeroDiagonal(SparseGPError):
    """A triangular solve hit a zero diagonal entry."""


class DimensionMismatch(SparseGPError):
    """Array dimensions do not conform."""


class UnsupportedMode(SparseGPError):
    """The kernel does not provide the requested evaluation mode."""


class PatchLargerThanImage(SparseGPError):
    """Patch extraction with a patch exceeding the image."""


class DuplicateRegistration(SparseGPError):
    """A dispatch pair was registered twice."""


class AmbiguityDetected(SparseGPError):
    """Two incomparable dispatch entries match equally well."""


class NoImplementation(SparseGPError):
    """No dispatch entry covers the requested type pair."""


class ShapeMismatch(SparseGPError):
    """Value shapes are inconsistent with the model structure."""


class UnsupportedCombination(SparseGPError):
    """The requested likelihood/strategy combination is not defined."""


class EmptySubset(SparseGPError):
    """Output marginalization needs at least one observed output."""


class NonFiniteObjective(SparseGPError):
    """The training objective evaluated to NaN or infinity."""


class ConfigError(SparseGPError):
    """A configuration file failed to parse or validate."""


class DataError(SparseGPError):
    """A dataset file failed to parse or validate."""
