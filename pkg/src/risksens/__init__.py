"""Risk-sensitive stochastic control: maximum principle and dynamic programming
checked against each other on a linear-quadratic factor-model portfolio."""

from .gridfn import BlowUpError, GridFunction, TimeGrid, make_grid
from .lq_coeffs import CoefficientSet, PortfolioParams, solve_coefficients
from .hamiltonians import AdjointState, GeneralProblem, factor_problem, minimize_G
from .sde_mc import FeedbackPolicy, NoiseBlock, generate_noise, noise_blocks
from .risk_cost import RiskEstimate, estimate_mean, estimate_risk_sensitive
from .portfolio import (
    ExperimentConfig,
    baseline_config,
    baseline_params,
    feedback_dpp,
    feedback_mp,
    run_experiment,
    verify_relations,
)

__version__ = "0.1.0"

__all__ = [
    "BlowUpError", "GridFunction", "TimeGrid", "make_grid",
    "CoefficientSet", "PortfolioParams", "solve_coefficients",
    "AdjointState", "GeneralProblem", "factor_problem", "minimize_G",
    "FeedbackPolicy", "NoiseBlock", "generate_noise", "noise_blocks",
    "RiskEstimate", "estimate_mean", "estimate_risk_sensitive",
    "ExperimentConfig", "baseline_config", "baseline_params",
    "feedback_dpp", "feedback_mp", "run_experiment", "verify_relations",
]
