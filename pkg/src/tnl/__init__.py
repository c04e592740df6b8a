"""Pseudo-spectral simulation lab for transport and Euler equations with scaling-limit transport noise."""

__version__ = "0.1.0"

from .cltstats import RateEstimate, gaussianity_report, run_rate_experiment, theoretical_exponent, wasserstein_coupling_bound
from .config import ConfigError, ExperimentConfig, parse_config
from .detpde import (DriftSpec, StabilityError, TrajectorySnapshot, solve_advection_diffusion, solve_backward_dual,
                     solve_nse_vorticity, solve_skeleton_euler, solve_skeleton_transport)
from .ldp import (ControlPath, RateProblem, evaluate_control, lower_bound_check, minimize_rate,
                  mollification_stability, rate_cost, tail_probability_mc)
from .noise import BrownianDriver, NoiseModel, build_noise_model, ito_integral_variance, sample_noise_increment
from .spde import (StochasticRunConfig, run_coupled, run_fluctuation_euler, run_fluctuation_transport,
                   run_stochastic_euler, run_stochastic_transport, stochastic_convolution)
from .spectral import SpectralField, TorusGrid, VectorField, get_grid


__all__ = [
    "BrownianDriver", "ConfigError", "ControlPath", "DriftSpec", "ExperimentConfig", "NoiseModel", "RateEstimate",
    "RateProblem", "SpectralField", "StabilityError", "StochasticRunConfig", "TorusGrid", "TrajectorySnapshot",
    "VectorField", "build_noise_model", "evaluate_control", "gaussianity_report", "get_grid",
    "ito_integral_variance", "lower_bound_check", "minimize_rate", "mollification_stability", "parse_config",
    "rate_cost", "run_coupled", "run_fluctuation_euler", "run_fluctuation_transport", "run_rate_experiment",
    "run_stochastic_euler", "run_stochastic_transport", "sample_noise_increment", "solve_advection_diffusion",
    "solve_backward_dual", "solve_nse_vorticity", "solve_skeleton_euler", "solve_skeleton_transport",
    "stochastic_convolution", "tail_probability_mc", "theoretical_exponent", "wasserstein_coupling_bound",
]
