"""Spiked eigenvalues of high-dimensional mixture covariances.

Renormalized Gram-side spectra, spike limits and fluctuations, estimation of
the number of populations, and label-free scoring of clusterings.
"""

from .covariance import SpectralSummary, both_spectra, estimate_ab, renormalized_gram, spectral_summary
from .datagen import NoiseLaw, PopulationModel, Sigma0, generate
from .errors import SpikelabError
from .inference import estimate_num_groups, t0, t0_bounds, t_statistic, t_tau
from .montecarlo import ExperimentConfig, StudyResult, preset, run_study
from .spectrum import DiscreteSpectrum, RegimeParams, phi, stieltjes_solve, support_edge
from .spikes import classify_spikes, predict_spikes

__version__ = "0.1.0"

__all__ = [
    "DiscreteSpectrum",
    "ExperimentConfig",
    "NoiseLaw",
    "PopulationModel",
    "RegimeParams",
    "Sigma0",
    "SpectralSummary",
    "SpikelabError",
    "StudyResult",
    "both_spectra",
    "classify_spikes",
    "estimate_ab",
    "estimate_num_groups",
    "generate",
    "phi",
    "predict_spikes",
    "preset",
    "renormalized_gram",
    "run_study",
    "spectral_summary",
    "stieltjes_solve",
    "support_edge",
    "t0",
    "t0_bounds",
    "t_statistic",
    "t_tau",
]
