"""Oracle and property tests for the SPDE prior machinery."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from hibrto.grids import Grid
from hibrto.prior import (
    PrecisionFactor,
    PriorModel,
    PriorOperators,
    assemble_fem_operators,
    precision_matrix,
    prior_logdet,
    prior_logpdf,
    sample_prior,
)


def random_operators(n: int, seed: int, dimension: int = 1) -> PriorOperators:
    """Random diagonal mass plus a random PSD stiffness, via the public path."""
    rng = np.random.default_rng(seed)
    mbar = rng.uniform(0.5, 2.0, n)
    a = rng.standard_normal((n, n))
    stiffness = a @ a.T / n
    stiffness = 0.5 * (stiffness + stiffness.T)
    return PriorOperators.from_matrices(mbar, stiffness, dimension=dimension)


class TestAssembly:
    def test_two_node_hand_assembly(self):
        ops = assemble_fem_operators(Grid.interval(2))
        np.testing.assert_allclose(ops.mbar, [0.5, 0.5])
        np.testing.assert_allclose(
            ops.stiffness.toarray(), [[1.0, -1.0], [-1.0, 1.0]]
        )

    def test_two_node_spectrum(self):
        ops = assemble_fem_operators(Grid.interval(2))
        np.testing.assert_allclose(ops.chi, [0.0, 4.0], atol=1e-12)

    @pytest.mark.parametrize(
        "grid", [Grid.interval(7), Grid.interval(64), Grid.square(5)]
    )
    def test_constants_in_stiffness_nullspace(self, grid):
        ops = assemble_fem_operators(grid)
        ones = np.ones(ops.n)
        np.testing.assert_allclose(ops.stiffness @ ones, 0.0, atol=1e-12)

    def test_lumped_mass_totals_domain_measure(self):
        ops1 = assemble_fem_operators(Grid.interval(17))
        assert np.isclose(ops1.mbar.sum(), 1.0)
        ops2 = assemble_fem_operators(Grid.square(6))
        # The bilinear mesh spans the hull of the cell centers, one spacing
        # short of the full square per axis.
        h = ops2.grid.spacing
        assert np.isclose(ops2.mbar.sum(), (30.0 - h) ** 2)

    def test_degenerate_grid_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            Grid.interval(1)
        with pytest.raises(ValueError, match="degenerate"):
            Grid.interval(4, bounds=(1.0, 1.0))

    def test_asymmetric_stiffness_rejected(self):
        bad = np.array([[1.0, 0.5], [-0.5, 1.0]])
        with pytest.raises(ValueError, match="not symmetric"):
            PriorOperators.from_matrices(np.ones(2), bad)

    def test_indefinite_stiffness_rejected(self):
        with pytest.raises(ValueError, match="indefinite"):
            PriorOperators.from_matrices(np.ones(2), -np.eye(2))


class TestPrecisionMatrix:
    def test_two_node_gamma_two(self):
        ops = assemble_fem_operators(Grid.interval(2))
        p = precision_matrix(ops, 2.0).toarray()
        np.testing.assert_allclose(p, [[2.0, -1.0], [-1.0, 2.0]])

    def test_large_gamma_mass_dominates(self):
        ops = assemble_fem_operators(Grid.interval(16))
        gamma = 1e8
        p = precision_matrix(ops, gamma).toarray()
        target = gamma * np.diag(ops.mbar)
        np.testing.assert_allclose(p, target, rtol=3.0 / gamma, atol=2.0 / ops.grid.spacing)

    def test_2d_factored_form_identity(self):
        ops = assemble_fem_operators(Grid.square(4))
        gamma = 0.7
        a = gamma * np.diag(ops.mbar) + ops.stiffness.toarray()
        factored = a @ np.diag(1.0 / ops.mbar) @ a
        expanded = precision_matrix(ops, gamma).toarray()
        np.testing.assert_allclose(expanded, factored, atol=1e-12 * np.abs(factored).max())

    @pytest.mark.parametrize("grid", [Grid.interval(33), Grid.square(6)])
    @pytest.mark.parametrize("gamma", [1e-4, 0.3, 12.0])
    def test_symmetric_positive_definite(self, grid, gamma):
        ops = assemble_fem_operators(grid)
        p = precision_matrix(ops, gamma).toarray()
        np.testing.assert_allclose(p, p.T, atol=1e-12 * np.abs(p).max())
        evals = np.linalg.eigvalsh(p)
        assert evals[0] > 0.0

    def test_rejects_nonpositive_gamma(self):
        ops = assemble_fem_operators(Grid.interval(4))
        with pytest.raises(ValueError, match="gamma"):
            precision_matrix(ops, 0.0)
        with pytest.raises(ValueError, match="gamma"):
            prior_logdet(ops, -1.0)


class TestLogDet:
    def test_two_node_gamma_two_is_log_three(self):
        ops = assemble_fem_operators(Grid.interval(2))
        assert np.isclose(prior_logdet(ops, 2.0), np.log(3.0), rtol=1e-12)

    def test_random_operators_match_dense(self):
        ops = random_operators(64, seed=1234)
        for gamma in (0.05, 1.0, 40.0):
            dense = np.linalg.slogdet(precision_matrix(ops, gamma).toarray())
            assert dense[0] > 0
            assert np.isclose(prior_logdet(ops, gamma), dense[1], rtol=1e-8)

    @pytest.mark.parametrize(
        "grid", [Grid.interval(16), Grid.interval(256), Grid.square(4), Grid.square(16)]
    )
    @pytest.mark.parametrize("gamma", [1e-3, 0.5, 25.0])
    def test_fem_logdet_matches_dense(self, grid, gamma):
        ops = assemble_fem_operators(grid)
        sign, dense = np.linalg.slogdet(precision_matrix(ops, gamma).toarray())
        assert sign > 0
        assert np.isclose(prior_logdet(ops, gamma), dense, rtol=1e-8)

    def test_eigenvalue_shift_identity_1d(self):
        ops = assemble_fem_operators(Grid.interval(32))
        gamma = 0.8
        p = precision_matrix(ops, gamma).toarray()
        shifted = np.sort(np.linalg.eigvals(np.diag(1.0 / ops.mbar) @ p).real)
        np.testing.assert_allclose(shifted, ops.chi + gamma, atol=1e-10 * shifted[-1])


class TestPriorLogPdf:
    def test_value_at_mean(self):
        ops = assemble_fem_operators(Grid.interval(2))
        model = PriorModel(ops, mean=np.array([0.3, -0.1]), delta=2.5, gamma=2.0)
        expected = (
            -0.5 * 2 * np.log(2.0 * np.pi)
            + 0.5 * 2 * np.log(2.5)
            + 0.5 * np.log(3.0)
        )
        assert np.isclose(prior_logpdf(model, model.mean), expected, rtol=1e-12)

    def test_two_node_quadratic_term(self):
        ops = assemble_fem_operators(Grid.interval(2))
        model = PriorModel(ops, mean=np.zeros(2), delta=1.0, gamma=2.0)
        at_mean = prior_logpdf(model, np.zeros(2))
        at_e1 = prior_logpdf(model, np.array([1.0, 0.0]))
        # u^T P u = 2 for u = e1 and P = [[2,-1],[-1,2]].
        assert np.isclose(at_e1 - at_mean, -1.0, rtol=1e-12)

    def test_delta_rescaling(self):
        ops = assemble_fem_operators(Grid.interval(9))
        rng = np.random.default_rng(7)
        mean = rng.standard_normal(9)
        u = rng.standard_normal(9)
        base = PriorModel(ops, mean=mean, delta=1.3, gamma=0.6)
        scaled = PriorModel(ops, mean=mean, delta=4 * 1.3, gamma=0.6)
        quad = (u - mean) @ (precision_matrix(ops, 0.6) @ (u - mean))
        expected_diff = 0.5 * 9 * np.log(4.0) - 0.5 * 3 * 1.3 * quad
        assert np.isclose(
            prior_logpdf(scaled, u) - prior_logpdf(base, u), expected_diff, rtol=1e-10
        )

    def test_rejects_nonfinite(self):
        ops = assemble_fem_operators(Grid.interval(4))
        model = PriorModel(ops, mean=np.zeros(4), delta=1.0, gamma=1.0)
        with pytest.raises(ValueError, match="non-finite"):
            prior_logpdf(model, np.array([0.0, np.nan, 0.0, 0.0]))


class TestPrecisionFactor:
    @pytest.mark.parametrize(
        "ops",
        [
            assemble_fem_operators(Grid.interval(37)),
            assemble_fem_operators(Grid.square(7)),
            random_operators(12, seed=3),
        ],
        ids=["banded-1d", "banded-2d", "dense"],
    )
    def test_factor_squares_to_precision(self, ops):
        delta, gamma = 1.7, 0.4
        factor = PrecisionFactor(ops, delta, gamma)
        c = factor.matvec(np.eye(ops.n))
        target = delta * precision_matrix(ops, gamma).toarray()
        np.testing.assert_allclose(c.T @ c, target, atol=1e-10 * np.abs(target).max())

    @pytest.mark.parametrize(
        "ops",
        [
            assemble_fem_operators(Grid.interval(21)),
            assemble_fem_operators(Grid.square(5)),
            random_operators(9, seed=5),
        ],
        ids=["banded-1d", "banded-2d", "dense"],
    )
    def test_solves_invert_products(self, ops):
        rng = np.random.default_rng(11)
        factor = PrecisionFactor(ops, 0.9, 2.2)
        x = rng.standard_normal(ops.n)
        xs = rng.standard_normal((ops.n, 3))
        np.testing.assert_allclose(factor.solve(factor.matvec(x)), x, atol=1e-10)
        np.testing.assert_allclose(factor.tsolve(factor.tmatvec(x)), x, atol=1e-10)
        np.testing.assert_allclose(factor.matvec(factor.solve(xs)), xs, atol=1e-10)
        np.testing.assert_allclose(factor.tmatvec(factor.tsolve(xs)), xs, atol=1e-10)

    @given(
        delta=st.floats(1e-3, 1e3),
        gamma=st.floats(1e-4, 50.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_logdet_matches_spectrum_route(self, delta, gamma):
        ops = assemble_fem_operators(Grid.interval(15))
        factor = PrecisionFactor(ops, delta, gamma)
        via_spectrum = ops.n * np.log(delta) + prior_logdet(ops, gamma)
        assert np.isclose(factor.logdet_precision, via_spectrum, rtol=1e-10)

    def test_logdet_matches_spectrum_route_2d(self):
        ops = assemble_fem_operators(Grid.square(6))
        factor = PrecisionFactor(ops, 3.0, 0.2)
        via_spectrum = ops.n * np.log(3.0) + prior_logdet(ops, 0.2)
        assert np.isclose(factor.logdet_precision, via_spectrum, rtol=1e-10)


class TestSampling:
    def test_two_node_moments(self):
        ops = assemble_fem_operators(Grid.interval(2))
        mean = np.array([1.0, -2.0])
        model = PriorModel(ops, mean=mean, delta=1.5, gamma=2.0)
        rng = np.random.default_rng(42)
        draws = np.array([sample_prior(model, rng) for _ in range(10_000)])
        cov_target = np.linalg.inv(1.5 * precision_matrix(ops, 2.0).toarray())
        cov_hat = np.cov(draws.T)
        scale = np.sqrt(np.outer(np.diag(cov_target), np.diag(cov_target)))
        assert np.all(np.abs(cov_hat - cov_target) <= 0.05 * scale)
        se = np.sqrt(np.diag(cov_target) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3.0 * se)

    def test_fixed_seed_is_reproducible(self):
        ops = assemble_fem_operators(Grid.interval(12))
        model = PriorModel(ops, mean=np.zeros(12), delta=1.0, gamma=0.5)
        a = sample_prior(model, np.random.default_rng(123))
        b = sample_prior(model, np.random.default_rng(123))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize(
        "ops",
        [assemble_fem_operators(Grid.interval(50)), assemble_fem_operators(Grid.square(7))],
        ids=["1d", "2d"],
    )
    def test_whitened_draws_pass_moment_checks(self, ops):
        model = PriorModel(
            ops, mean=np.linspace(-1, 1, ops.n), delta=0.7, gamma=1.1
        )
        rng = np.random.default_rng(2024)
        pooled = []
        draws_needed = int(np.ceil(100_000 / ops.n))
        for _ in range(draws_needed):
            u = sample_prior(model, rng)
            pooled.append(model.factor.matvec(u - model.mean))
        z = np.concatenate(pooled)
        skew = np.mean(z**3) / np.mean(z**2) ** 1.5
        kurt = np.mean(z**4) / np.mean(z**2) ** 2
        assert abs(skew) < 0.1
        assert abs(kurt - 3.0) < 0.2
