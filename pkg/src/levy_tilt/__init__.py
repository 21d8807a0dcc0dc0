"""Variational inference for Levy-driven SDEs with neural exponential tilting."""
from .stable import (GroundTruthConfig, LatentPath, StableSpec, matched_sigma_g, one_sided_mass,
                     sample_jump_magnitude, simulate_ground_truth)
from .tilting import TiltCoeffs, conditional_gaussian, envelope
from .kl import estimate_kl_step, kl_quadrature, kl_series
from .sampler import estimate_intensity, sample_mixing_scale, sample_tilted_jump, simulate_posterior
from .neural import DriftSpec, ModelConfig, ModelParams, init_params
from .training import Observations, TrainConfig, elbo, train
from .baseline import gaussian_baseline_train
from .forecast import forecast
from .evaluation import ForecastEnsemble, crps, energy_score, jump_crps, reliability, param_recovery

__version__ = "0.1.0"
