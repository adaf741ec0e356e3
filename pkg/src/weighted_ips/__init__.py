"""Weighted interacting particle systems for non-conservative McKean-type SDEs."""

from weighted_ips.kernel import DensityEstimate, MollifierKernel, kde_eval, kde_eval_batch, kde_lipschitz_bound
from weighted_ips.model import (
    AssumptionConstants,
    Coefficients,
    ConfigurationError,
    InitialLaw,
    Model,
    check_assumptions,
    make_model,
)
from weighted_ips.simulator import (
    BrownianDriver,
    NumericalBlowupError,
    ParticleEnsemble,
    SamplingError,
    TimeGrid,
    Trajectory,
    complexity_estimate,
    init_ensemble,
    run,
    step,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionConstants",
    "BrownianDriver",
    "Coefficients",
    "ConfigurationError",
    "DensityEstimate",
    "InitialLaw",
    "Model",
    "MollifierKernel",
    "NumericalBlowupError",
    "ParticleEnsemble",
    "SamplingError",
    "TimeGrid",
    "Trajectory",
    "check_assumptions",
    "complexity_estimate",
    "init_ensemble",
    "kde_eval",
    "kde_eval_batch",
    "kde_lipschitz_bound",
    "make_model",
    "run",
    "step",
]
