"""Bayesian FPCA for sparse multivariate functional data.

Spline coefficients of the principal components live on the Stiefel
manifold through a polar-decomposition expansion; the posterior is sampled
by NUTS alone or inside a blocked Gibbs scheme.
"""

__version__ = "0.1.0"

from .basis import OrthoBasis, build_basis  # noqa: E402
from .data import ScalingRecord, SparseFunctionalDataset, ingest_long_csv, standardize  # noqa: E402
from .errors import ConfigurationError, DataError, DomainError, NumericalError  # noqa: E402
from .model import ModelConfig  # noqa: E402
from .sampler import PosteriorDraws, SamplerConfig, load_draws, run, save_draws  # noqa: E402

__all__ = [
    "OrthoBasis",
    "build_basis",
    "ScalingRecord",
    "SparseFunctionalDataset",
    "ingest_long_csv",
    "standardize",
    "ConfigurationError",
    "DataError",
    "DomainError",
    "NumericalError",
    "ModelConfig",
    "PosteriorDraws",
    "SamplerConfig",
    "load_draws",
    "run",
    "save_draws",
]
