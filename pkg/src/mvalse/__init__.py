"""Multi-snapshot variational Bayesian line spectral estimation."""

from .circular import VonMises
from .estimator import Estimate, EstimatorConfig, run, variant_config
from .model import GenConfig, LineSpectrum, PriorBank, Snapshot, default_prior_bank, generate_data

__all__ = [
    "Estimate", "EstimatorConfig", "GenConfig", "LineSpectrum", "PriorBank", "Snapshot",
    "VonMises", "default_prior_bank", "generate_data", "run", "variant_config",
]
__version__ = "0.1.0"
