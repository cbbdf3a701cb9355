"""Optimization-based MCMC for hierarchical Bayesian inverse problems.

The package couples a Gaussian process prior discretized through a
Laplace-like SPDE with nonlinear forward maps (a 1D elliptic log-diffusion
problem and a 2D ray-attenuation problem) and samples the joint posterior
over the field and its hyperparameters with samplers built on
randomize-then-optimize proposals:

* ``rto_mh`` — Metropolis–Hastings with a fixed hyperparameter triple,
* ``rto_within_gibbs`` — blockwise updates of the field, the conjugate
  precision pair, and the correlation parameter,
* ``rto_pm`` — pseudo-marginal random walk over the hyperparameters alone.

Submodules are imported lazily; ``from hibrto import rto_mh`` works without
paying for the forward models, and ``import hibrto.prior`` never drags in the
samplers.
"""

from __future__ import annotations

import importlib
from typing import Any

__version__ = "0.1.0"

_EXPORTS = {
    "grids": ["Grid"],
    "prior": [
        "PriorModel",
        "PriorOperators",
        "PrecisionFactor",
        "assemble_fem_operators",
        "precision_matrix",
        "prior_logdet",
        "prior_logpdf",
        "sample_prior",
    ],
    "models": [
        "EllipticModel1D",
        "ForwardModel",
        "LinearModel",
        "PetGeometry",
        "PetModel2D",
        "elliptic_true_field",
        "generate_synthetic_data",
        "pet_system_matrix",
        "pet_true_field",
        "trace_ray",
    ],
    "benchmarks": [
        "elliptic_benchmark",
        "pet_benchmark",
    ],
    "posterior": [
        "BayesProblem",
        "HyperParams",
        "HyperPrior",
        "hyperprior_logpdf",
        "joint_log_posterior",
        "log_likelihood",
        "surrogate_gaussian_terms",
    ],
    "rto": [
        "RtoMap",
        "RtoSample",
        "build_rto_map",
        "find_map",
        "log_weight",
        "rto_log_density",
        "sample_rto_batch",
        "solve_rto",
    ],
    "samplers": [
        "GammaConditional",
        "GibbsResult",
        "MarginalLikelihoodEstimate",
        "PiecewiseLinearSampler",
        "PmResult",
        "RtoChain",
        "estimate_marginal_likelihood",
        "log_pm_std",
        "rto_mh",
        "rto_pm",
        "rto_within_gibbs",
        "sample_field_precision",
        "sample_gamma_conditional",
        "sample_noise_precision",
        "warm_start_params",
    ],
    "diagnostics": ["ChainStats", "acf", "credible_interval", "ess", "iact"],
    "io": [
        "read_chain_csv",
        "read_field_matrix",
        "read_json_sidecar",
        "write_chain_csv",
        "write_field_matrix",
        "write_json_sidecar",
    ],
    "config": ["ExperimentConfig", "preset", "preset_names"],
}

_NAME_TO_MODULE = {
    name: module for module, names in _EXPORTS.items() for name in names
}

__all__ = ["__version__", *_NAME_TO_MODULE]


def __getattr__(name: str) -> Any:
    module_name = _NAME_TO_MODULE.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    module = importlib.import_module(f"{__name__}.{module_name}")
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__() -> list[str]:
    return sorted(__all__)
