"""MCMC drivers for the hierarchical posterior.

Three layers, each usable on its own:

* :func:`rto_mh` — independence Metropolis-Hastings on the field with the
  hyperparameters held fixed, using optimization-based proposals and their
  exact importance weights.
* :func:`rto_within_gibbs` — alternates field updates with conjugate draws of
  the two precision parameters and a gridded independence update of the
  smoothness parameter.
* :func:`rto_pm` — pseudo-marginal MCMC on the hyperparameters alone, driven
  by an unbiased importance-sampling estimate of the marginal likelihood with
  ``K`` proposal draws per evaluated point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .posterior import BayesProblem, HyperParams, HyperPrior
from .prior import PriorOperators
from .rto import (
    DiffeomorphismError,
    RtoMap,
    build_rto_map,
    find_map,
    log_weight,
    sample_rto_batch,
    solve_rto,
)


def _log_uniform(rng: np.random.Generator) -> float:
    """log(U) for U uniform on (0, 1), drawn without ever taking log(0)."""
    return -float(rng.exponential())


def _log_mean_exp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    shift = float(values.max())
    if not math.isfinite(shift):
        return shift
    return shift + math.log(float(np.mean(np.exp(values - shift))))


class MarginalLikelihoodEstimate(NamedTuple):
    log_value: float
    standard_error: float
    n_used: int
    n_failed: int


def estimate_marginal_likelihood(
    rto_map: RtoMap, count: int, rng: np.random.Generator, *, workers: int = 1
) -> MarginalLikelihoodEstimate:
    """Importance-sampling estimate of the conditional marginal likelihood.

    Averages the proposal weights of ``count`` independent draws.  Draws whose
    solve failed are excluded and reported; the standard error is the delta-
    method error of the log of the sample mean.
    """
    samples = sample_rto_batch(rto_map, count, rng, workers=workers)
    weights = np.array(
        [s.log_weight for s in samples if s.converged and s.log_weight is not None]
    )
    n_failed = count - weights.size
    if weights.size == 0:
        raise RuntimeError(f"all {count} proposal solves failed")
    shift = float(weights.max())
    scaled = np.exp(weights - shift)
    mean = float(scaled.mean())
    if weights.size > 1:
        se = float(scaled.std(ddof=1)) / (mean * math.sqrt(weights.size))
    else:
        se = math.inf
    return MarginalLikelihoodEstimate(
        log_value=shift + math.log(mean),
        standard_error=se,
        n_used=int(weights.size),
        n_failed=int(n_failed),
    )


@dataclass
class RtoChain:
    """Output of an independence-MH run on the field at fixed hyperparameters."""

    fields: np.ndarray  # (steps, n) state after each update
    log_weights: np.ndarray  # (steps,) weight of the state after each update
    accepted: int
    proposed: int
    failed_proposals: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else math.nan


def rto_mh(
    rto_map: RtoMap,
    steps: int,
    rng: np.random.Generator,
    *,
    u0: np.ndarray | None = None,
    log_weight0: float | None = None,
    workers: int = 1,
) -> RtoChain:
    """Independence Metropolis-Hastings with optimization-based proposals.

    Each proposal is accepted with probability ``min(1, w_new / w_old)`` on
    the importance weights.  Proposals whose inner solve failed (or whose
    weight is undefined) are rejected outright and counted separately.
    Because the proposals do not depend on the current state, the whole batch
    is drawn up front, optionally in worker threads.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    u = rto_map.u_star if u0 is None else np.asarray(u0, dtype=float)
    logw = log_weight(rto_map, u) if log_weight0 is None else float(log_weight0)

    proposals = sample_rto_batch(rto_map, steps, rng, workers=workers)
    fields = np.empty((steps, rto_map.problem.n))
    log_weights = np.empty(steps)
    accepted = failed = 0
    for i, prop in enumerate(proposals):
        if prop.converged and prop.log_weight is not None and math.isfinite(prop.log_weight):
            if _log_uniform(rng) < prop.log_weight - logw:
                u, logw = prop.u, prop.log_weight
                accepted += 1
        else:
            failed += 1
        fields[i] = u
        log_weights[i] = logw
    return RtoChain(
        fields=fields,
        log_weights=log_weights,
        accepted=accepted,
        proposed=steps,
        failed_proposals=failed,
    )


# --------------------------------------------------------------------------
# Conjugate precision updates
# --------------------------------------------------------------------------


def prior_quadratic_terms(ops: PriorOperators, diff: np.ndarray) -> tuple[float, ...]:
    """Quadratic forms that make the prior energy a polynomial in ``gamma``.

    Returns ``(q_mass, q_stiff)`` in 1D, where the energy is
    ``gamma * q_mass + q_stiff``, and ``(q_mass, q_stiff, q_squared)`` in 2D,
    where it is ``gamma^2 * q_mass + 2 gamma * q_stiff + q_squared``.
    """
    diff = np.asarray(diff, dtype=float)
    q_mass = float(diff @ (ops.mbar * diff))
    k_diff = ops.stiffness @ diff
    q_stiff = float(diff @ k_diff)
    if ops.dimension == 1:
        return (q_mass, q_stiff)
    return (q_mass, q_stiff, float(k_diff @ (k_diff / ops.mbar)))


def prior_energy_from_terms(
    ops: PriorOperators, gamma: float, terms: tuple[float, ...]
) -> float:
    """``(u - m)^T P_gamma (u - m)`` from precomputed quadratic terms."""
    if ops.dimension == 1:
        q_mass, q_stiff = terms
        return gamma * q_mass + q_stiff
    q_mass, q_stiff, q_squared = terms
    return gamma**2 * q_mass + 2.0 * gamma * q_stiff + q_squared


def _noise_precision_shape_rate(
    problem: BayesProblem, u: np.ndarray
) -> tuple[float, float]:
    hyper = problem.hyper
    if problem.kind == "gaussian":
        residual = problem.model.evaluate(u) - problem.y
        shape = hyper.alpha_lam + 0.5 * problem.m
        rate = hyper.beta_lam + 0.5 * float(residual @ (residual / problem.noise_variance))
    else:
        shape = hyper.alpha_lam + float(problem.y.sum())
        rate = hyper.beta_lam + float(np.exp(problem.model.log_evaluate(u)).sum())
    return shape, rate


def sample_noise_precision(
    problem: BayesProblem, u: np.ndarray, rng: np.random.Generator
) -> float:
    """Gamma draw from the conditional of the noise/count scale parameter."""
    shape, rate = _noise_precision_shape_rate(problem, u)
    return float(rng.gamma(shape, 1.0 / rate))


def sample_field_precision(
    problem: BayesProblem,
    gamma: float,
    rng: np.random.Generator,
    *,
    quadratic_terms: tuple[float, ...],
) -> float:
    """Gamma draw from the conditional of the field precision ``delta``."""
    hyper = problem.hyper
    energy = prior_energy_from_terms(problem.operators, gamma, quadratic_terms)
    shape = hyper.alpha_delta + 0.5 * problem.n
    rate = hyper.beta_delta + 0.5 * energy
    return float(rng.gamma(shape, 1.0 / rate))


def warm_start_params(
    problem: BayesProblem,
    *,
    delta: float = 1.0,
    gamma: float | None = None,
    rounds: int = 30,
    tol: float = 1e-3,
    map_max_iter: int = 500,
) -> tuple[HyperParams, np.ndarray]:
    """Deterministic starting point: alternate conditional mode and mean.

    Starting from the moment-matched scale ``lam = shape / rate`` evaluated
    at the prior mean field, alternate (i) the conditional field mode at the
    current hyperparameters and (ii) the conjugate posterior mean of the
    scale parameter, until the scale is stable to ``tol`` relative or
    ``rounds`` is exhausted.  ``delta`` and ``gamma`` stay fixed.

    For count data the conditional of the scale given the field is extremely
    sharp, so a chain started at an arbitrary scale can take effectively
    forever to drift to values where the field proposals fit the data; this
    ascent removes that transient.  Returns the hyperparameters and the last
    field mode.
    """
    hyper = problem.hyper
    if gamma is None:
        lo, hi = hyper.gamma_bounds
        gamma = math.sqrt(lo * hi)
    shape, rate = _noise_precision_shape_rate(problem, problem.mean)
    lam = shape / rate
    u = problem.mean
    for _ in range(rounds):
        params = HyperParams(lam=lam, delta=delta, gamma=gamma)
        result = find_map(problem, params, u0=u, max_iter=map_max_iter)
        u = result.u_map
        shape, rate = _noise_precision_shape_rate(problem, u)
        lam_new = shape / rate
        done = abs(lam_new - lam) <= tol * lam
        lam = lam_new
        if done:
            break
    return HyperParams(lam=lam, delta=delta, gamma=gamma), u


def _default_init(problem: BayesProblem) -> tuple[HyperParams, np.ndarray]:
    """Starting state when the caller gives none.

    Gaussian data start at unit precisions and the prior mean; count data
    warm-start the scale parameter (see ``warm_start_params``).
    """
    if problem.kind == "poisson":
        return warm_start_params(problem)
    lo, hi = problem.hyper.gamma_bounds
    return (
        HyperParams(lam=1.0, delta=1.0, gamma=math.sqrt(lo * hi)),
        problem.mean.copy(),
    )


# --------------------------------------------------------------------------
# Smoothness parameter: gridded conditional and inverse-CDF proposal
# --------------------------------------------------------------------------


def _edge_log(exponent: float, x: float) -> float:
    """``exponent * log(x)`` with the ``0 * log(0) = 0`` convention."""
    if x < 0.0:
        return -math.inf
    if x == 0.0:
        return 0.0 if exponent == 0.0 else -math.inf
    return exponent * math.log(x)


class GammaConditional:
    """The conditional log-density of the smoothness parameter, grid-cached.

    Everything that costs O(n) — the spectral sum ``sum(log(chi + gamma))`` —
    is precomputed on a fixed grid in ``log(gamma)`` spanning the prior
    support, so that per-sweep evaluations reduce to arithmetic on the cached
    arrays plus two exact evaluations for the accept/reject correction.
    Values are relative: terms independent of ``gamma`` are dropped.
    """

    def __init__(self, ops: PriorOperators, hyper: HyperPrior, grid_size: int = 1000):
        if grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        self.ops = ops
        self.hyper = hyper
        lo, hi = hyper.gamma_bounds
        self.log_grid = np.linspace(math.log(lo), math.log(hi), grid_size)
        self.gammas = np.exp(self.log_grid)
        self._eig_grid = np.log(ops.chi[None, :] + self.gammas[:, None]).sum(axis=1)
        self._eig_weight = 0.5 if ops.dimension == 1 else 1.0
        self._prior_grid = np.array([self._log_prior(g) for g in self.gammas])

    def _log_prior(self, gamma: float) -> float:
        lo, hi = self.hyper.gamma_bounds
        return _edge_log(self.hyper.alpha_gamma, gamma - lo) + _edge_log(
            self.hyper.beta_gamma, hi - gamma
        )

    def _energy_part(self, gamma, q_terms):
        if self.ops.dimension == 1:
            return gamma * q_terms[0]
        return gamma**2 * q_terms[0] + 2.0 * gamma * q_terms[1]

    def logpdf_grid(self, delta: float, quadratic_terms: tuple[float, ...]) -> np.ndarray:
        """Relative log-density at every grid point, using the cached sums."""
        return (
            self._prior_grid
            + self._eig_weight * self._eig_grid
            - 0.5 * delta * self._energy_part(self.gammas, quadratic_terms)
        )

    def logpdf(self, gamma: float, delta: float, quadratic_terms: tuple[float, ...]) -> float:
        """Relative log-density at one point, with the spectral sum exact."""
        lo, hi = self.hyper.gamma_bounds
        if not (lo <= gamma <= hi):
            return -math.inf
        eig_sum = float(np.log(self.ops.chi + gamma).sum())
        return (
            self._log_prior(gamma)
            + self._eig_weight * eig_sum
            - 0.5 * delta * float(self._energy_part(gamma, quadratic_terms))
        )


class PiecewiseLinearSampler:
    """Exact sampler for the density interpolating ``exp(log_values)`` linearly.

    The density between neighboring knots is linear, so the CDF is piecewise
    quadratic and inverts in closed form (in the numerically stable root
    formulation).  A tiny relative floor keeps the density positive
    everywhere, which guarantees a usable reverse-move density for
    Metropolis-Hastings corrections.
    """

    _FLOOR = 1e-290  # relative to the maximum after shifting

    def __init__(self, grid: np.ndarray, log_values: np.ndarray):
        grid = np.asarray(grid, dtype=float)
        log_values = np.asarray(log_values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != log_values.shape:
            raise ValueError("need matching 1D grid and values with at least 2 points")
        if np.any(np.diff(grid) <= 0.0):
            raise ValueError("grid must be strictly increasing")
        finite = np.isfinite(log_values)
        if not finite.any():
            raise ValueError("density vanishes on the entire grid")
        shift = float(log_values[finite].max())
        values = np.where(finite, np.exp(log_values - shift), 0.0)
        values = np.maximum(values, self._FLOOR)
        widths = np.diff(grid)
        areas = 0.5 * (values[:-1] + values[1:]) * widths
        cumulative = np.concatenate([[0.0], np.cumsum(areas)])
        total = float(cumulative[-1])
        if not (math.isfinite(total) and total > 0.0):
            raise ValueError("density does not normalize on the grid")
        self.grid = grid
        self.values = values
        self.widths = widths
        self.cumulative = cumulative
        self.total = total
        self._log_total = math.log(total)

    def sample(self, rng: np.random.Generator) -> float:
        target = float(rng.random()) * self.total
        idx = int(np.searchsorted(self.cumulative, target, side="right")) - 1
        idx = min(max(idx, 0), self.widths.size - 1)
        c = target - self.cumulative[idx]
        a = self.values[idx]
        half_slope = (self.values[idx + 1] - a) / (2.0 * self.widths[idx])
        discriminant = max(a * a + 4.0 * half_slope * c, 0.0)
        denominator = a + math.sqrt(discriminant)
        t = 2.0 * c / denominator if denominator > 0.0 else 0.0
        return float(self.grid[idx] + min(max(t, 0.0), self.widths[idx]))

    def log_density(self, x: float) -> float:
        """Normalized log-density of the sampler at ``x``."""
        if x < self.grid[0] or x > self.grid[-1]:
            return -math.inf
        value = float(np.interp(x, self.grid, self.values))
        return math.log(value) - self._log_total


def sample_gamma_conditional(
    conditional: GammaConditional,
    delta: float,
    quadratic_terms: tuple[float, ...],
    current: float,
    rng: np.random.Generator,
) -> tuple[float, bool]:
    """One independence-MH update of the smoothness parameter.

    The proposal samples ``log(gamma)`` exactly from the piecewise-linear
    interpolation of the grid conditional (with the log-scale Jacobian folded
    in); the accept/reject step corrects the interpolation error against the
    exact conditional, so the update targets the true density.
    """
    grid_values = conditional.log_grid + conditional.logpdf_grid(delta, quadratic_terms)
    sampler = PiecewiseLinearSampler(conditional.log_grid, grid_values)
    rho = sampler.sample(rng)
    proposal = math.exp(rho)
    log_q_prop = sampler.log_density(rho) - rho
    log_q_curr = sampler.log_density(math.log(current)) - math.log(current)
    log_alpha = (
        conditional.logpdf(proposal, delta, quadratic_terms)
        - conditional.logpdf(current, delta, quadratic_terms)
        + log_q_curr
        - log_q_prop
    )
    if _log_uniform(rng) < log_alpha:
        return proposal, True
    return current, False


# --------------------------------------------------------------------------
# Gibbs driver
# --------------------------------------------------------------------------


@dataclass
class GibbsResult:
    """Chains and counters from a full hierarchical Gibbs run."""

    lam: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    probe: np.ndarray  # field value at ``probe_index`` after every sweep
    log_weights: np.ndarray  # current-state weight after every sweep
    fields: np.ndarray  # (stored, n) thinned field states
    field_steps: np.ndarray  # sweep index of every stored field
    inner_accepted: int
    inner_proposed: int
    inner_failed: int
    gamma_accepted: int
    map_stalls: int  # sweeps whose reference-point search never converged
    final_u: np.ndarray
    final_params: HyperParams
    probe_index: int

    @property
    def inner_acceptance_rate(self) -> float:
        return self.inner_accepted / self.inner_proposed if self.inner_proposed else math.nan


def _build_map_with_retry(
    problem: BayesProblem,
    params: HyperParams,
    u_warm: np.ndarray,
    *,
    trust_region,
    map_max_iter: int,
    map_tol: float,
) -> tuple[RtoMap, bool]:
    """Reference-point search with one cold retry from the prior mean.

    If the cold retry stalls as well, the sweep linearizes at its best
    iterate anyway: any reference point determined by the hyperparameters
    alone gives a valid proposal (a poor one only lowers the acceptance
    rate), and the cold iterate — unlike the warm one — does not depend on
    the current field state.  Returns the map and a flag marking such
    stalled sweeps.
    """
    result = find_map(problem, params, u0=u_warm, max_iter=map_max_iter, tol=map_tol)
    stalled = False
    if not result.converged:
        result = find_map(problem, params, max_iter=map_max_iter, tol=map_tol)
        stalled = not result.converged
    rto_map = build_rto_map(problem, params, u_star=result.u_map, trust_region=trust_region)
    return rto_map, stalled


def rto_within_gibbs(
    problem: BayesProblem,
    steps: int,
    rng: np.random.Generator,
    *,
    inner_steps: int = 1,
    init_params: HyperParams | None = None,
    init_u: np.ndarray | None = None,
    trust_region=None,
    workers: int = 1,
    store_fields_every: int = 1,
    probe_index: int | None = None,
    gamma_grid_size: int = 1000,
    map_max_iter: int = 200,
    map_tol: float = 1e-8,
) -> GibbsResult:
    """Alternating field and hyperparameter updates targeting the full posterior.

    Every sweep (i) relinearizes the field proposal at the conditional mode
    for the current hyperparameters, warm-started at the current field,
    (ii) reweights the current field under the fresh proposal, (iii) runs
    ``inner_steps`` independence-MH field updates, (iv) draws the two
    precision parameters from their conjugate Gamma conditionals — the field
    precision still conditioned on the outgoing smoothness value — and then
    (v) updates the smoothness parameter by a grid-proposal MH step at the
    new field precision.

    When ``init_params`` is omitted the chain starts from ``_default_init``:
    unit precisions for Gaussian data, a coordinate-ascent warm start of the
    scale parameter for count data (see ``warm_start_params``).

    A sweep whose reference-point search fails to converge even after a cold
    retry is not fatal: the proposal is built at the retry's best iterate —
    still a valid reference point, merely a less efficient one — and the
    sweep is counted in ``map_stalls``.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if inner_steps < 0 or store_fields_every < 1:
        raise ValueError("inner_steps must be >= 0 and store_fields_every >= 1")
    hyper = problem.hyper
    if init_params is None:
        params, u_default = _default_init(problem)
    else:
        params, u_default = init_params, problem.mean
    u = u_default.copy() if init_u is None else np.asarray(init_u, dtype=float).copy()
    if probe_index is None:
        probe_index = problem.n // 2

    conditional = GammaConditional(problem.operators, hyper, grid_size=gamma_grid_size)
    lam_chain = np.empty(steps)
    delta_chain = np.empty(steps)
    gamma_chain = np.empty(steps)
    probe_chain = np.empty(steps)
    weight_chain = np.empty(steps)
    stored_fields: list[np.ndarray] = []
    stored_steps: list[int] = []
    inner_accepted = inner_proposed = inner_failed = gamma_accepted = map_stalls = 0

    for sweep in range(steps):
        rto_map, stalled = _build_map_with_retry(
            problem,
            params,
            u,
            trust_region=trust_region,
            map_max_iter=map_max_iter,
            map_tol=map_tol,
        )
        map_stalls += stalled
        if sweep == 0 and init_u is None:
            # Replace the deterministic starting field by one draw from the
            # proposal itself.  A mode (or any atypically well-fitting point)
            # can carry an importance weight far above proposal-typical
            # values, which would freeze the independence chain for its
            # entire escape time; a proposal draw is typical by construction.
            first = solve_rto(rto_map, rng=rng)
            if first.converged:
                u = first.u
        try:
            logw = log_weight(rto_map, u)
        except DiffeomorphismError as exc:
            raise RuntimeError(
                f"current field left the invertible region at sweep {sweep} with "
                f"lam={params.lam:.6g}, delta={params.delta:.6g}, "
                f"gamma={params.gamma:.6g}; rerun with trust_region='auto'"
            ) from exc

        chain = rto_mh(
            rto_map, inner_steps, rng, u0=u, log_weight0=logw, workers=workers
        )
        if inner_steps:
            u = chain.fields[-1].copy()
            logw = float(chain.log_weights[-1])
        inner_accepted += chain.accepted
        inner_proposed += chain.proposed
        inner_failed += chain.failed_proposals

        lam = sample_noise_precision(problem, u, rng)
        terms = prior_quadratic_terms(problem.operators, u - problem.mean)
        delta = sample_field_precision(
            problem, params.gamma, rng, quadratic_terms=terms
        )
        gamma, accepted = sample_gamma_conditional(
            conditional, delta, terms, params.gamma, rng
        )
        gamma_accepted += accepted
        params = HyperParams(lam=lam, delta=delta, gamma=gamma)

        lam_chain[sweep] = lam
        delta_chain[sweep] = delta
        gamma_chain[sweep] = gamma
        probe_chain[sweep] = u[probe_index]
        weight_chain[sweep] = logw
        if sweep % store_fields_every == store_fields_every - 1:
            stored_fields.append(u.copy())
            stored_steps.append(sweep)

    return GibbsResult(
        lam=lam_chain,
        delta=delta_chain,
        gamma=gamma_chain,
        probe=probe_chain,
        log_weights=weight_chain,
        fields=np.array(stored_fields) if stored_fields else np.empty((0, problem.n)),
        field_steps=np.array(stored_steps, dtype=int),
        inner_accepted=inner_accepted,
        inner_proposed=inner_proposed,
        inner_failed=inner_failed,
        gamma_accepted=gamma_accepted,
        map_stalls=map_stalls,
        final_u=u,
        final_params=params,
        probe_index=probe_index,
    )


# --------------------------------------------------------------------------
# Pseudo-marginal sampler over the hyperparameters
# --------------------------------------------------------------------------


def pm_transform(z: np.ndarray, gamma_bounds: tuple[float, float]) -> HyperParams:
    """Map unconstrained coordinates to hyperparameters.

    The first two coordinates are log precisions; the third is the logit of
    the smoothness parameter's position inside its prior support.
    """
    lo, hi = gamma_bounds
    return HyperParams(
        lam=math.exp(z[0]),
        delta=math.exp(z[1]),
        gamma=lo + (hi - lo) * float(expit(z[2])),
    )


def pm_inverse_transform(params: HyperParams, gamma_bounds: tuple[float, float]) -> np.ndarray:
    lo, hi = gamma_bounds
    position = (params.gamma - lo) / (hi - lo)
    if not 0.0 < position < 1.0:
        raise ValueError(
            f"gamma={params.gamma} must lie strictly inside the prior support "
            f"({lo}, {hi}) to transform"
        )
    return np.array(
        [math.log(params.lam), math.log(params.delta), math.log(position / (1.0 - position))]
    )


def pm_log_jacobian(z: np.ndarray, gamma_bounds: tuple[float, float]) -> float:
    """``log |d theta / d z|`` of :func:`pm_transform`."""
    lo, hi = gamma_bounds
    z2 = float(z[2])
    log_sigmoid = -np.logaddexp(0.0, -z2)
    log_one_minus = -np.logaddexp(0.0, z2)
    return float(z[0] + z[1] + math.log(hi - lo) + log_sigmoid + log_one_minus)


@dataclass
class PmDebugRecord:
    """Everything needed to replay one pseudo-marginal accept/reject decision."""

    step: int
    reason: str
    accepted: bool
    log_alpha: float
    theta_prop: HyperParams | None = None
    u_star_prop: np.ndarray | None = None
    u_prop: np.ndarray | None = None
    log_weights_prop: np.ndarray | None = None
    log_pm_prop: float | None = None


@dataclass
class PmResult:
    """Chains and counters from a pseudo-marginal run."""

    lam: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    log_pm: np.ndarray
    probe: np.ndarray
    fields: np.ndarray
    field_steps: np.ndarray
    accepted: int
    failed_steps: int
    final_params: HyperParams
    final_u: np.ndarray
    probe_index: int
    debug: list[PmDebugRecord] | None = None

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.lam.size if self.lam.size else math.nan


class _CovarianceTracker:
    """Streaming mean/covariance of the visited unconstrained coordinates."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += np.outer(delta, x - self.mean)

    @property
    def covariance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self._m2)
        return self._m2 / (self.count - 1)


_Z_OVERFLOW = 700.0


def _pm_evaluate(
    problem: BayesProblem,
    params: HyperParams,
    k: int,
    rng: np.random.Generator,
    *,
    u_warm: np.ndarray | None,
    trust_region,
    workers: int,
):
    """Build a proposal map at ``params`` and estimate the marginal likelihood.

    Returns ``(log_pm, rto_map, u_stock, w_stock)`` or ``None`` when more than
    half of the ``k`` solves failed.
    """
    rto_map = build_rto_map(problem, params, u0=u_warm, trust_region=trust_region)
    samples = sample_rto_batch(rto_map, k, rng, workers=workers)
    good = [s for s in samples if s.converged and s.log_weight is not None]
    if 2 * len(good) < k:
        return None
    weights = np.array([s.log_weight for s in good])
    stock = np.array([s.u for s in good])
    return _log_mean_exp(weights), rto_map, stock, weights


def rto_pm(
    problem: BayesProblem,
    steps: int,
    rng: np.random.Generator,
    *,
    k: int = 1,
    init_params: HyperParams | None = None,
    sample_mask: tuple[bool, bool, bool] = (True, True, True),
    adapt_start: int = 50,
    burn_in: int = 0,
    trust_region=None,
    workers: int = 1,
    store_fields_every: int = 1,
    probe_index: int | None = None,
    debug: bool = False,
) -> PmResult:
    """Adaptive pseudo-marginal MCMC over the hyperparameters.

    The chain moves in unconstrained coordinates (log precisions, logit-scaled
    smoothness) with a Gaussian random walk whose covariance adapts to the
    chain history from step ``adapt_start`` on (frozen after ``burn_in`` when
    positive).  Each proposed point is scored by a fresh ``k``-draw
    importance-sampling estimate of the marginal likelihood; on acceptance the
    stored draws and estimate move with the state, keeping the chain exact for
    the marginal posterior regardless of ``k``.  Fixed coordinates (via
    ``sample_mask``) never move.  A field sample is emitted every step by
    resampling the stored draws by weight.

    When ``init_params`` is omitted the chain starts from ``_default_init``:
    unit precisions for Gaussian data, a coordinate-ascent warm start of the
    scale parameter for count data (see ``warm_start_params``).
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    if k < 1:
        raise ValueError("k must be positive")
    mask = np.asarray(sample_mask, dtype=bool)
    if mask.shape != (3,) or not mask.any():
        raise ValueError("sample_mask must enable at least one of (lam, delta, gamma)")
    hyper = problem.hyper
    if init_params is None:
        params, u_warm0 = _default_init(problem)
    else:
        params, u_warm0 = init_params, None
    if probe_index is None:
        probe_index = problem.n // 2

    z = pm_inverse_transform(params, hyper.gamma_bounds)
    log_prior = hyper.logpdf(params) + pm_log_jacobian(z, hyper.gamma_bounds)
    if not math.isfinite(log_prior):
        raise ValueError("initial hyperparameters have zero prior density")
    evaluated = _pm_evaluate(
        problem, params, k, rng, u_warm=u_warm0, trust_region=trust_region, workers=workers
    )
    if evaluated is None:
        raise RuntimeError("all initial proposal solves failed")
    log_pm, rto_map, stock, stock_weights = evaluated

    d_free = int(mask.sum())
    tracker = _CovarianceTracker(d_free)
    tracker.update(z[mask])
    base_cov = 0.01 * np.eye(d_free)
    scale = 2.38**2 / d_free

    lam_chain = np.empty(steps)
    delta_chain = np.empty(steps)
    gamma_chain = np.empty(steps)
    pm_chain = np.empty(steps)
    probe_chain = np.empty(steps)
    stored_fields: list[np.ndarray] = []
    stored_steps: list[int] = []
    records: list[PmDebugRecord] | None = [] if debug else None
    accepted = failed_steps = 0
    frozen_cov: np.ndarray | None = None

    for step in range(steps):
        if tracker.count >= adapt_start:
            if burn_in > 0 and step >= burn_in:
                if frozen_cov is None:
                    frozen_cov = scale * tracker.covariance + 1e-10 * np.eye(d_free)
                cov = frozen_cov
            else:
                cov = scale * tracker.covariance + 1e-10 * np.eye(d_free)
        else:
            cov = base_cov
        z_prop = z.copy()
        z_prop[mask] = z[mask] + np.linalg.cholesky(cov) @ rng.standard_normal(d_free)

        record = PmDebugRecord(step=step, reason="ok", accepted=False, log_alpha=-math.inf)
        if np.any(np.abs(z_prop[:2]) > _Z_OVERFLOW):
            record.reason = "overflow"
        else:
            raw = pm_transform(z_prop, hyper.gamma_bounds)
            # Frozen coordinates keep their exact values instead of picking up
            # transform round-off.
            params_prop = HyperParams(
                lam=raw.lam if mask[0] else params.lam,
                delta=raw.delta if mask[1] else params.delta,
                gamma=raw.gamma if mask[2] else params.gamma,
            )
            log_prior_prop = hyper.logpdf(params_prop) + pm_log_jacobian(
                z_prop, hyper.gamma_bounds
            )
            record.theta_prop = params_prop
            if not math.isfinite(log_prior_prop):
                record.reason = "prior-zero"
            else:
                try:
                    evaluated = _pm_evaluate(
                        problem,
                        params_prop,
                        k,
                        rng,
                        u_warm=rto_map.u_star,
                        trust_region=trust_region,
                        workers=workers,
                    )
                except (ValueError, np.linalg.LinAlgError):
                    evaluated = None
                if evaluated is None:
                    record.reason = "solver-failures"
                    failed_steps += 1
                else:
                    log_pm_prop, map_prop, stock_prop, weights_prop = evaluated
                    record.u_star_prop = map_prop.u_star
                    record.log_weights_prop = weights_prop
                    record.log_pm_prop = log_pm_prop
                    record.log_alpha = (log_pm_prop + log_prior_prop) - (
                        log_pm + log_prior
                    )
                    if _log_uniform(rng) < record.log_alpha:
                        record.accepted = True
                        accepted += 1
                        z, params = z_prop, params_prop
                        log_prior, log_pm = log_prior_prop, log_pm_prop
                        rto_map, stock, stock_weights = map_prop, stock_prop, weights_prop

        # Emit a field draw from the current stock, importance-resampled.
        probabilities = np.exp(stock_weights - stock_weights.max())
        probabilities /= probabilities.sum()
        u = stock[rng.choice(stock.shape[0], p=probabilities)]
        if records is not None:
            record.u_prop = u
            records.append(record)

        lam_chain[step] = params.lam
        delta_chain[step] = params.delta
        gamma_chain[step] = params.gamma
        pm_chain[step] = log_pm
        probe_chain[step] = u[probe_index]
        if step % store_fields_every == store_fields_every - 1:
            stored_fields.append(u.copy())
            stored_steps.append(step)
        if not (burn_in > 0 and step >= burn_in):
            tracker.update(z[mask])

    return PmResult(
        lam=lam_chain,
        delta=delta_chain,
        gamma=gamma_chain,
        log_pm=pm_chain,
        probe=probe_chain,
        fields=np.array(stored_fields) if stored_fields else np.empty((0, problem.n)),
        field_steps=np.array(stored_steps, dtype=int),
        accepted=accepted,
        failed_steps=failed_steps,
        final_params=params,
        final_u=u,
        probe_index=probe_index,
        debug=records,
    )


def log_pm_std(
    problem: BayesProblem,
    params: HyperParams,
    k: int,
    reps: int,
    rng: np.random.Generator,
    *,
    trust_region=None,
    workers: int = 1,
) -> float:
    """Spread of the ``k``-draw log marginal-likelihood estimator at one point.

    Builds the proposal map once, draws ``reps * k`` weights, reduces each
    row of ``k`` by log-mean-exp, and returns the sample standard deviation
    of the ``reps`` row values.  Rows without a single converged draw are
    dropped.
    """
    if k < 1 or reps < 2:
        raise ValueError("need k >= 1 and reps >= 2")
    rto_map = build_rto_map(problem, params, trust_region=trust_region)
    samples = sample_rto_batch(rto_map, reps * k, rng, workers=workers)
    rows = []
    for i in range(reps):
        chunk = samples[i * k : (i + 1) * k]
        weights = [s.log_weight for s in chunk if s.converged and s.log_weight is not None]
        if weights:
            rows.append(_log_mean_exp(np.array(weights)))
    if len(rows) < 2:
        raise RuntimeError("too few converged rows to estimate a spread")
    return float(np.std(rows, ddof=1))
