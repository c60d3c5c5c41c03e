"""Exception types shared across the package.

Every domain failure raises a subclass of ReefcondError so the CLI can map
any anticipated problem to a clean message and a nonzero exit code.
"""


class ReefcondError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ReefcondError):
    """Label codes, vectors, or class ordering violate the taxonomy."""


class ManifestFormatError(ReefcondError):
    """A manifest file is structurally malformed (bad header, bad line)."""


class IngestError(ReefcondError):
    """Tiling, cropping, labeling, or split assignment failed."""


class BackboneError(ReefcondError):
    """A backbone name cannot be resolved or its weights are unavailable."""


class TrainError(ReefcondError):
    """Training or inference preconditions are violated."""


class EnsembleError(ReefcondError):
    """Probability matrices cannot be fused or thresholded as requested."""


class PredictionFormatError(ReefcondError):
    """A prediction file is structurally malformed (bad header, bad line)."""


class MetricsError(ReefcondError):
    """Evaluation inputs are inconsistent (shape mismatch, empty input)."""


class QueryError(ReefcondError):
    """A label query expression is contradictory or malformed."""
