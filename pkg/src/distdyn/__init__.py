"""Distribution-dynamics toolkit: fit biparametric families to snapshot
cross-sections, rank them by weighted divergence, and extract the Langevin
law driving the winning family's parameters."""

__version__ = "0.1.0"

from .errors import (
    DomainError,
    GeneratorAbort,
    InsufficientDataError,
    NegativeDiffusionError,
    UnderdeterminedError,
)
from .models import DIVERGENT, ModelFamily, ModelParams, cdf, moment, pdf

__all__ = [
    "DIVERGENT",
    "DomainError",
    "GeneratorAbort",
    "InsufficientDataError",
    "ModelFamily",
    "ModelParams",
    "NegativeDiffusionError",
    "UnderdeterminedError",
    "cdf",
    "moment",
    "pdf",
    "__version__",
]
