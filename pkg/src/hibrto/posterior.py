"""Observation likelihoods, hyperparameter priors, and the joint posterior.

The hierarchical model has three scalar hyperparameters next to the field
``u``: the noise precision / exposure ``lam``, the prior precision scale
``delta``, and the prior correlation parameter ``gamma``.  ``lam`` and
``delta`` carry Gamma priors; ``gamma`` lives on a bounded interval with a
Beta-like prior.  Everything here works in log densities and drops constants
only where a docstring says so.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .models.base import ForwardModel
from .prior import PriorModel, PriorOperators, prior_logpdf

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperParams:
    """One point ``(lam, delta, gamma)`` in hyperparameter space."""

    lam: float
    delta: float
    gamma: float

    def __post_init__(self):
        for name in ("lam", "delta", "gamma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
            object.__setattr__(self, name, float(value))

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.delta, self.gamma])

    def replace(self, **changes) -> "HyperParams":
        values = {"lam": self.lam, "delta": self.delta, "gamma": self.gamma}
        values.update(changes)
        return HyperParams(**values)


@dataclass(frozen=True)
class HyperPrior:
    """Independent priors: Gamma(shape, rate) on ``lam`` and ``delta``, and a
    scaled Beta on ``gamma`` over ``gamma_bounds``."""

    alpha_lam: float = 1.0
    beta_lam: float = 1e-4
    alpha_delta: float = 1.0
    beta_delta: float = 1e-4
    alpha_gamma: float = 0.0
    beta_gamma: float = 4.0
    gamma_bounds: tuple[float, float] = (1e-5, 10.0)

    def __post_init__(self):
        if self.alpha_lam <= 0 or self.beta_lam <= 0 or self.alpha_delta <= 0 or self.beta_delta <= 0:
            raise ValueError("Gamma prior shapes and rates must be positive")
        if self.alpha_gamma < 0 or self.beta_gamma < 0:
            raise ValueError("gamma-prior exponents must be nonnegative")
        lo, hi = self.gamma_bounds
        if not (0.0 < lo < hi):
            raise ValueError(f"gamma bounds must satisfy 0 < lo < hi, got ({lo}, {hi})")
        object.__setattr__(self, "gamma_bounds", (float(lo), float(hi)))

    def logpdf(self, params: HyperParams) -> float:
        return hyperprior_logpdf(self, params)


def _power_log(exponent: float, base: float) -> float:
    """``exponent * log(base)`` with the convention ``0 * log(0) = 0``."""
    if base > 0.0:
        return exponent * math.log(base)
    return 0.0 if exponent == 0.0 else -math.inf


def hyperprior_logpdf(prior: HyperPrior, params: HyperParams) -> float:
    """Unnormalized log density of the hyperparameter prior at ``params``."""
    lo, hi = prior.gamma_bounds
    if not (lo <= params.gamma <= hi):
        return -math.inf
    total = (prior.alpha_lam - 1.0) * math.log(params.lam) - prior.beta_lam * params.lam
    total += (prior.alpha_delta - 1.0) * math.log(params.delta) - prior.beta_delta * params.delta
    total += _power_log(prior.alpha_gamma, params.gamma - lo)
    total += _power_log(prior.beta_gamma, hi - params.gamma)
    return total


@dataclass(frozen=True)
class BayesProblem:
    """A forward model, one observed data vector, and the full prior setup.

    ``kind`` selects the observation model: ``"gaussian"`` uses
    ``y = F(u) + noise`` with covariance ``noise_variance / lam`` (diagonal),
    ``"poisson"`` uses counts with mean ``lam * F(u)``.
    """

    model: ForwardModel
    y: np.ndarray
    kind: str
    operators: PriorOperators
    mean: np.ndarray
    hyper: HyperPrior = field(default_factory=HyperPrior)
    noise_variance: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (self.model.m,):
            raise ValueError(f"data must have shape ({self.model.m},), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("data contains non-finite entries")
        object.__setattr__(self, "y", y)

        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (self.model.n,):
            raise ValueError(f"prior mean must have shape ({self.model.n},), got {mean.shape}")
        object.__setattr__(self, "mean", mean)

        if self.operators.mbar.shape[0] != self.model.n:
            raise ValueError("prior operators and forward model disagree on the field size")

        if self.kind == "poisson":
            if self.noise_variance is not None:
                raise ValueError("noise_variance only applies to gaussian observations")
            if not self.model.positive_output:
                raise ValueError("poisson observations require a positive forward model")
            if np.any(y < 0.0) or np.any(y != np.round(y)):
                raise ValueError("poisson data must be nonnegative integers")
        elif self.kind == "gaussian":
            var = np.ones(self.model.m) if self.noise_variance is None else np.asarray(
                self.noise_variance, dtype=float
            )
            if var.shape == ():
                var = np.full(self.model.m, float(var))
            if var.shape != (self.model.m,) or np.any(var <= 0.0):
                raise ValueError("noise_variance must be a positive scalar or (m,) vector")
            object.__setattr__(self, "noise_variance", var)
        else:
            raise ValueError(f"unknown observation kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def m(self) -> int:
        return self.model.m

    @cached_property
    def log_factorial_sum(self) -> float:
        """``sum_i log(y_i!)`` for Poisson data."""
        return float(gammaln(self.y + 1.0).sum())

    @cached_property
    def half_log_noise_det(self) -> float:
        """``(1/2) log det`` of the diagonal noise covariance shape matrix."""
        return 0.5 * float(np.sum(np.log(self.noise_variance)))

    def prior_model(self, params: HyperParams) -> PriorModel:
        return PriorModel(self.operators, self.mean, params.delta, params.gamma)


def log_likelihood(problem: BayesProblem, u: np.ndarray, params: HyperParams) -> float:
    """Normalized log likelihood of the data at field ``u`` and hyperparameters."""
    if problem.kind == "gaussian":
        residual = problem.model.evaluate(u) - problem.y
        quad = float(np.sum(residual**2 / problem.noise_variance))
        return (
            0.5 * problem.m * math.log(params.lam)
            - 0.5 * problem.m * _LOG_2PI
            - problem.half_log_noise_det
            - 0.5 * params.lam * quad
        )
    log_values = problem.model.log_evaluate(u)
    total_intensity = float(np.exp(log_values).sum())
    return (
        float(problem.y @ log_values)
        + float(problem.y.sum()) * math.log(params.lam)
        - params.lam * total_intensity
        - problem.log_factorial_sum
    )


def joint_log_posterior(problem: BayesProblem, u: np.ndarray, params: HyperParams) -> float:
    """Log of the joint (unnormalized) posterior over ``(u, lam, delta, gamma)``."""
    hyper_part = hyperprior_logpdf(problem.hyper, params)
    if hyper_part == -math.inf:
        return -math.inf
    prior_part = prior_logpdf(problem.prior_model(params), u)
    return hyper_part + prior_part + log_likelihood(problem, u, params)


class SurrogateTerms(NamedTuple):
    """Gaussianized count data: targets in log-output space and per-ray weights."""

    y_tilde: np.ndarray
    weights: np.ndarray


def surrogate_gaussian_terms(
    problem: BayesProblem, u_star: np.ndarray, lam: float
) -> SurrogateTerms:
    """Local Gaussian approximation of the Poisson likelihood around ``u_star``.

    Matching the curvature of the Poisson log likelihood in the log-output
    variable ``xi = log F(u)`` at the expansion point (and its gradient to
    first order in the relative data misfit) gives the weighted least-squares
    misfit ``(lam/2) sum_i w_i (xi_i(u) - y_tilde_i)^2`` with weights
    ``w_i = F_i(u_star)`` and targets ``y_tilde_i = log(y_i / lam)``.
    Zero counts are clamped to one half inside the log (only here; the exact
    likelihood is used everywhere else).
    """
    if problem.kind != "poisson":
        raise ValueError("surrogate terms are defined for poisson observations only")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    weights = np.exp(problem.model.log_evaluate(np.asarray(u_star, dtype=float)))
    y_tilde = np.log(np.maximum(problem.y, 0.5)) - math.log(lam)
    return SurrogateTerms(y_tilde=y_tilde, weights=weights)
