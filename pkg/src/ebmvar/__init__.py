"""Stochastic energy-balance modeling toolkit.

Variance and covariance amplification of temperature anomalies under
radiative forcing: 0-D multiplicative-noise model, path simulation, spatial
finite-difference covariance dynamics, and their numerical certification.
"""

from . import covariance_engine, model_core, sde_engine, spatial_model
from .errors import EbmvarError

__all__ = [
    "EbmvarError",
    "covariance_engine",
    "model_core",
    "sde_engine",
    "spatial_model",
]

__version__ = "0.1.0"
