"""Exception hierarchy.

Three top-level families map onto the CLI exit codes: configuration
problems (exit 2), data problems (exit 3) and numerical failures (exit 4).
"""


class ClothDetailError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ClothDetailError):
    """Bad configuration value, unknown key, or invalid parameter."""

    exit_code = 2


class ParameterError(ConfigError):
    """Out-of-range argument to an operation (stride, op id, ...)."""


class DataError(ClothDetailError):
    """Invalid or inconsistent input data."""

    exit_code = 3


class SequenceError(DataError):
    """Missing/empty frame sequence on disk."""


class ConsistencyError(DataError):
    """Frames of one sequence disagree in topology or UV layout."""


class IngestionError(DataError):
    """Coarse/fine simulation pair cannot be aligned."""


class BakeError(DataError):
    """Normal-map baking failed (overlapping UV charts, missing UVs)."""


class TopologyError(DataError):
    """Non-manifold or open mesh where a closed/manifold one is required."""


class CropError(DataError):
    """Map too small for the requested patch size."""


class CoverageError(DataError):
    """No usable masked region found (empty crops, uncovered pixels)."""


class EmptyContentError(DataError):
    """A patch carries no masked pixels at some feature layer."""


class VertexLookupError(DataError):
    """Vertex UVs fall on background pixels of the target map."""


class NumericalError(ClothDetailError):
    """NaN/Inf encountered during optimization or training."""

    exit_code = 4
