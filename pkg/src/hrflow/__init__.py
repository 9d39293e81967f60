"""Hierarchical rectified flow on low-dimensional synthetic data.

A depth-D model learns the expected direction of each level's linear
interpolant; sampling runs nested Euler loops, and depth-2 models also give
velocity likelihoods and data densities through an ODE change of variables.
"""
from .coupling import couple_for_training, independent_coupling, ot_coupling
from .density import (LikelihoodReport, SolverConfig, bits_per_dim, density_alg3, density_alg4, rk45_solve,
                      velocity_log_likelihood)
from .distributions import GaussianMixture, GaussianRing, Moons, StandardGaussian, VelocityLaw
from .errors import ConfigError, NumericalError, SolverError, TrainingError, UndefinedRegionError
from .fixtures import FIXTURES, fixture
from .metrics import distance, sliced_w2, wasserstein1_1d
from .model import HrfModel, OracleAccelerationField, OracleVelocityField
from .nn import MlpConfig
from .sampler import SamplerSchedule, sample_batch
from .training import TrainConfig, train

__all__ = [
    "ConfigError", "FIXTURES", "GaussianMixture", "GaussianRing", "HrfModel", "LikelihoodReport", "MlpConfig",
    "Moons", "NumericalError", "OracleAccelerationField", "OracleVelocityField", "SamplerSchedule", "SolverConfig",
    "SolverError", "StandardGaussian", "TrainConfig", "TrainingError", "UndefinedRegionError", "VelocityLaw",
    "bits_per_dim", "couple_for_training", "density_alg3", "density_alg4", "distance", "fixture",
    "independent_coupling", "ot_coupling", "rk45_solve", "sample_batch", "sliced_w2", "train",
    "velocity_log_likelihood", "wasserstein1_1d",
]
