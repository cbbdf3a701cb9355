"""Forward-model tests: analytic oracles, adjoint consistency, ray geometry."""

import numpy as np
import pytest

from hibrto.grids import Grid
from hibrto.models import (
    EllipticModel1D,
    LinearModel,
    PetGeometry,
    PetModel2D,
    elliptic_true_field,
    generate_synthetic_data,
    pet_system_matrix,
    pet_true_field,
    trace_ray,
)


def greens_value(s, load_pos):
    """Solution of -x'' = delta(load_pos) on (0, 1) with zero boundary values."""
    s = np.asarray(s)
    return np.where(s <= load_pos, s * (1.0 - load_pos), load_pos * (1.0 - s))


class TestLinearModel:
    def test_evaluate_and_jacobian(self):
        model = LinearModel([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]], offset=[0.0, 1.0, -2.0])
        u = np.array([2.0, -1.0])
        np.testing.assert_allclose(model.evaluate(u), [0.0, 2.0, 3.5])
        np.testing.assert_allclose(model.jacobian(u), [[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])

    def test_jacobian_is_immutable(self):
        model = LinearModel(np.eye(3))
        with pytest.raises(ValueError):
            model.jacobian(np.zeros(3))[0, 0] = 5.0

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            LinearModel(np.zeros(4))
        with pytest.raises(ValueError):
            LinearModel(np.eye(3), offset=np.zeros(2))
        with pytest.raises(ValueError):
            LinearModel(np.eye(3)).evaluate(np.zeros(2))

    def test_default_log_methods(self):
        model = LinearModel(np.eye(2), offset=[3.0, 5.0])
        u = np.array([1.0, -1.0])
        np.testing.assert_allclose(model.log_evaluate(u), np.log([4.0, 4.0]))
        np.testing.assert_allclose(model.log_jacobian(u), np.eye(2) / 4.0)
        with pytest.raises(ValueError):
            model.log_evaluate(np.array([-10.0, 0.0]))


class TestEllipticModel:
    def test_greens_function_oracle(self):
        # With u = 0 the conductivity is 1 and the discrete solution for a
        # nodal point load is the exact (piecewise linear) Green's function,
        # so every interpolated station value is exact up to roundoff.
        grid = Grid.interval(64)  # 63 elements; loads at 21/63 and 42/63 exactly
        model = EllipticModel1D(grid)
        values = model.evaluate(np.zeros(64))
        stations = np.arange(1, 64) / 64.0
        expected = np.concatenate(
            [1000.0 * greens_value(stations, 1.0 / 3.0), 1000.0 * greens_value(stations, 2.0 / 3.0)]
        )
        np.testing.assert_allclose(values, expected, rtol=1e-9)
        assert values.shape == (126,)
        assert abs(values[20] - 1000.0 * (21.0 / 64.0) * (2.0 / 3.0)) < 1e-7

    def test_constant_field_rescales_output(self):
        grid = Grid.interval(37)
        model = EllipticModel1D(grid)
        base = model.evaluate(np.zeros(37))
        shifted = model.evaluate(np.full(37, 1.7))
        np.testing.assert_allclose(shifted, np.exp(-1.7) * base, rtol=1e-12)

    def test_mirror_symmetry(self):
        model = EllipticModel1D(Grid.interval(64))
        values = model.evaluate(np.zeros(64))
        first, second = values[:63], values[63:]
        np.testing.assert_allclose(second, first[::-1], rtol=1e-10)

    def test_output_positive_for_random_fields(self):
        model = EllipticModel1D(Grid.interval(40))
        rng = np.random.default_rng(7)
        for _ in range(5):
            u = 0.6 * rng.standard_normal(40)
            assert np.all(model.evaluate(u) > 0.0)

    def test_jacobian_matches_finite_differences(self):
        grid = Grid.interval(24)
        model = EllipticModel1D(grid)
        u = 0.3 * np.sin(3.0 * grid.nodes) + 0.1
        values, jac = model.evaluate_with_jacobian(u)
        np.testing.assert_allclose(values, model.evaluate(u))
        rng = np.random.default_rng(11)
        eps = 1e-5
        for _ in range(5):
            v = rng.standard_normal(24)
            v /= np.linalg.norm(v)
            fd = (model.evaluate(u + eps * v) - model.evaluate(u - eps * v)) / (2.0 * eps)
            np.testing.assert_allclose(jac @ v, fd, rtol=2e-5, atol=1e-6)

    def test_jacobian_shift_identity(self):
        # F(u + c) = exp(-c) F(u), so differentiating in the constant direction
        # gives J(u) @ ones = -F(u).
        model = EllipticModel1D(Grid.interval(31))
        rng = np.random.default_rng(3)
        u = 0.4 * rng.standard_normal(31)
        values, jac = model.evaluate_with_jacobian(u)
        np.testing.assert_allclose(jac @ np.ones(31), -values, rtol=1e-10)

    def test_mesh_refinement_converges(self):
        coarse_grid = Grid.interval(1024)
        fine_grid = Grid.interval(8192)
        coarse = EllipticModel1D(coarse_grid).evaluate(elliptic_true_field(coarse_grid.nodes))
        fine = EllipticModel1D(fine_grid).evaluate(elliptic_true_field(fine_grid.nodes))
        assert np.max(np.abs(coarse - fine) / np.abs(fine)) < 5e-3

    def test_stations_do_not_depend_on_resolution(self):
        a = EllipticModel1D(Grid.interval(64))
        b = EllipticModel1D(Grid.interval(257))
        np.testing.assert_array_equal(a.stations, b.stations)

    def test_input_validation(self):
        model = EllipticModel1D(Grid.interval(16))
        with pytest.raises(ValueError):
            model.evaluate(np.zeros(15))
        with pytest.raises(ValueError):
            model.evaluate(np.full(16, np.nan))
        with pytest.raises(ValueError):
            model.evaluate(np.full(16, 1e3))
        with pytest.raises(ValueError):
            EllipticModel1D(Grid.square(4))
        with pytest.raises(ValueError):
            EllipticModel1D(Grid.interval(8), load_positions=(0.001,))


class TestPetGeometry:
    def test_fan_beam_layout(self):
        geom = PetGeometry.fan_beam((-15.0, 15.0))
        assert geom.n_rays == 400
        assert geom.n_sources == 10 and geom.rays_per_source == 40
        np.testing.assert_allclose(np.linalg.norm(geom.sources, axis=1), 22.0, rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(geom.detectors, axis=1), 22.0, rtol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(geom.directions, axis=1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(
            geom.sources[0], 22.0 * np.array([np.cos(np.pi / 6.0), np.sin(np.pi / 6.0)])
        )
        # Detectors sit forward of the source along each ray.
        travel = np.einsum("ij,ij->i", geom.detectors - geom.sources, geom.directions)
        assert np.all(travel > 0.0)

    def test_sources_must_sit_outside_domain(self):
        with pytest.raises(ValueError):
            PetGeometry.fan_beam((-15.0, 15.0), radius=20.0)

    def test_direction_normalization_enforced(self):
        with pytest.raises(ValueError):
            PetGeometry(
                sources=np.zeros((1, 2)),
                directions=np.array([[2.0, 0.0]]),
                detectors=np.ones((1, 2)),
            )


class TestTraceRay:
    def test_horizontal_ray_unit_cells(self):
        grid = Grid.square(30)  # spacing exactly 1
        cells, lengths = trace_ray(grid, [-20.0, -14.5], [1.0, 0.0])
        np.testing.assert_array_equal(np.sort(cells), np.arange(30))
        np.testing.assert_allclose(lengths, 1.0, rtol=1e-12)

    def test_vertical_ray_strides_by_row(self):
        grid = Grid.square(30)
        cells, lengths = trace_ray(grid, [-15.0 + 3.5, 40.0], [0.0, -1.0])
        np.testing.assert_array_equal(np.sort(cells), 3 + 30 * np.arange(30))
        np.testing.assert_allclose(lengths.sum(), 30.0, rtol=1e-12)

    def test_diagonal_ray(self):
        grid = Grid.square(30)
        cells, lengths = trace_ray(grid, [-16.0, -16.0], [1.0, 1.0])
        np.testing.assert_allclose(lengths.sum(), 30.0 * np.sqrt(2.0), rtol=1e-12)
        np.testing.assert_allclose(lengths, np.sqrt(2.0), rtol=1e-9)
        np.testing.assert_array_equal(np.sort(cells), 31 * np.arange(30))

    def test_missing_ray_is_empty(self):
        grid = Grid.square(8)
        cells, lengths = trace_ray(grid, [-20.0, 20.5], [1.0, 0.0])
        assert cells.size == 0 and lengths.size == 0
        cells, lengths = trace_ray(grid, [-20.0, 0.0], [-1.0, 0.0])
        assert cells.size == 0

    def test_direction_validation(self):
        grid = Grid.square(4)
        with pytest.raises(ValueError):
            trace_ray(grid, [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(ValueError):
            trace_ray(Grid.interval(5), [0.0, 0.0], [1.0, 0.0])

    def test_row_sums_equal_domain_chords(self):
        grid = Grid.square(20)
        geom = PetGeometry.fan_beam(grid.bounds[0])
        system = pet_system_matrix(geom, grid)
        assert system.missed_rays.size == 0
        row_sums = system.matrix.sum(axis=1)
        for i in range(geom.n_rays):
            o, d = geom.sources[i], geom.directions[i]
            ts = np.concatenate([(-15.0 - o) / d, (15.0 - o) / d])
            chord = min(max(ts[0], ts[2]), max(ts[1], ts[3])) - max(
                min(ts[0], ts[2]), min(ts[1], ts[3])
            )
            assert abs(row_sums[i] - chord) < 1e-10 * max(1.0, chord)

    def test_fan_chords_are_substantial(self):
        # The one-spacing inset keeps every ray inside the domain, but rays from
        # the arc-end sources still clip the far corners; the measured extremes
        # of the default layout are about [0.48, 41.1].
        grid = Grid.square(20)
        system = pet_system_matrix(PetGeometry.fan_beam(grid.bounds[0]), grid)
        row_sums = system.matrix.sum(axis=1)
        assert row_sums.min() > 0.3
        assert row_sums.max() <= 30.0 * np.sqrt(2.0) + 1e-9
        assert np.mean(row_sums > 1.0) > 0.95

    def test_missed_rays_reported_as_zero_rows(self):
        geom = PetGeometry(
            sources=np.array([[22.0, 0.0], [22.0, 0.0]]),
            directions=np.array([[-1.0, 0.0], [1.0, 0.0]]),
            detectors=np.array([[-22.0, 0.0], [44.0, 0.0]]),
        )
        system = pet_system_matrix(geom, Grid.square(6))
        np.testing.assert_array_equal(system.missed_rays, [1])
        assert np.all(system.matrix[1] == 0.0)
        assert system.matrix[0].sum() > 0.0


class TestPetModel:
    def build_small(self, g=4):
        grid = Grid.square(g)
        return PetModel2D.build(grid), grid

    def test_zero_field_uses_row_sums(self):
        model, _ = self.build_small(6)
        values = model.evaluate(np.zeros(36))
        np.testing.assert_allclose(values, np.exp(-model.system_matrix.sum(axis=1)), rtol=1e-12)
        assert np.all(values > 0.0) and np.all(values <= 1.0)

    def test_log_evaluate_consistent_with_evaluate(self):
        model, grid = self.build_small(5)
        rng = np.random.default_rng(2)
        u = -2.0 + 0.3 * rng.standard_normal(grid.n)
        np.testing.assert_allclose(model.log_evaluate(u), np.log(model.evaluate(u)), rtol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        model, grid = self.build_small(4)
        rng = np.random.default_rng(5)
        u = -1.5 + 0.4 * rng.standard_normal(grid.n)
        values, jac = model.evaluate_with_jacobian(u)
        np.testing.assert_allclose(values, model.evaluate(u))
        log_jac = model.log_jacobian(u)
        eps = 1e-6
        for _ in range(4):
            v = rng.standard_normal(grid.n)
            v /= np.linalg.norm(v)
            fd = (model.evaluate(u + eps * v) - model.evaluate(u - eps * v)) / (2.0 * eps)
            np.testing.assert_allclose(jac @ v, fd, rtol=2e-5, atol=1e-10)
            fd_log = (model.log_evaluate(u + eps * v) - model.log_evaluate(u - eps * v)) / (
                2.0 * eps
            )
            np.testing.assert_allclose(log_jac @ v, fd_log, rtol=2e-5, atol=1e-10)

    def test_log_jacobian_is_chain_rule_factor(self):
        model, grid = self.build_small(4)
        u = np.full(grid.n, -1.0)
        values, jac = model.evaluate_with_jacobian(u)
        np.testing.assert_allclose(model.log_jacobian(u), jac / values[:, None], rtol=1e-12)

    def test_overflow_guard(self):
        model, grid = self.build_small(4)
        with pytest.raises(ValueError):
            model.evaluate(np.full(grid.n, 701.0))

    def test_system_matrix_validation(self):
        grid = Grid.square(4)
        with pytest.raises(ValueError):
            PetModel2D(np.zeros((3, 5)), grid)
        with pytest.raises(ValueError):
            PetModel2D(-np.ones((3, 16)), grid)

    def test_attenuation_length_normalizes_optical_depth(self):
        grid = Grid.square(6)
        raw = pet_system_matrix(PetGeometry.fan_beam(grid.bounds[0]), grid).matrix
        model = PetModel2D.build(grid)
        # The default square domain spans 30 units, so one stored unit of
        # optical depth corresponds to a full side-to-side crossing.
        assert model.attenuation_length == pytest.approx(30.0)
        np.testing.assert_allclose(model.system_matrix, raw / 30.0, rtol=1e-15)
        # An empty domain costs at most one e-fold per crossing (sqrt(2)
        # along the diagonal), so every beam keeps a measurable share.
        survival = model.evaluate(np.zeros(grid.n))
        assert survival.min() > np.exp(-np.sqrt(2.0)) - 1e-12
        assert survival.max() < 1.0

    def test_attenuation_length_explicit_and_validated(self):
        grid = Grid.square(4)
        base = np.ones((3, 16))
        model = PetModel2D(base, grid, attenuation_length=4.0)
        np.testing.assert_allclose(model.system_matrix, base / 4.0)
        default = PetModel2D(base, grid)
        np.testing.assert_allclose(default.system_matrix, base)
        for bad in (0.0, -2.0, np.inf, np.nan):
            with pytest.raises(ValueError):
                PetModel2D(base, grid, attenuation_length=bad)
        unscaled = PetModel2D.build(grid, attenuation_length=1.0)
        raw = pet_system_matrix(PetGeometry.fan_beam(grid.bounds[0]), grid).matrix
        np.testing.assert_allclose(unscaled.system_matrix, raw)


class TestTrueFields:
    def test_elliptic_field_values(self):
        s = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(elliptic_true_field(s), [1.0, 1.0, 0.5, 1.0, 1.0])
        # The cap binds exactly where the sine goes negative.
        fine = np.linspace(0.0, 1.0, 1001)
        vals = elliptic_true_field(fine)
        assert np.all(vals <= 1.0) and vals.min() == pytest.approx(0.5, abs=1e-6)

    def test_pet_field_peaks_and_support(self):
        peaks = np.array([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0]])
        np.testing.assert_allclose(pet_true_field(peaks), 0.5 * np.pi, rtol=1e-12)
        grid = Grid.square(20)
        vals = pet_true_field(grid.nodes)
        assert vals.min() == 0.0 and vals.max() <= 0.5 * np.pi + 1e-12
        with pytest.raises(ValueError):
            pet_true_field(np.zeros(4))


class TestSyntheticData:
    def test_deterministic_given_seed(self):
        model = LinearModel(np.eye(5), offset=np.full(5, 2.0))
        u = np.zeros(5)
        a = generate_synthetic_data(model, u, kind="gaussian", lam=4.0, rng=np.random.default_rng(9))
        b = generate_synthetic_data(model, u, kind="gaussian", lam=4.0, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_gaussian_noise_scale(self):
        m = 4000
        model = LinearModel(np.zeros((m, 1)), offset=np.full(m, 3.0))
        y = generate_synthetic_data(
            model, np.zeros(1), kind="gaussian", lam=25.0, rng=np.random.default_rng(1)
        )
        resid = y - 3.0
        assert abs(resid.std() - 0.2) < 0.2 * 3.0 / np.sqrt(2 * m)
        assert abs(resid.mean()) < 3.0 * 0.2 / np.sqrt(m)

    def test_poisson_counts(self):
        m = 4000
        model = LinearModel(np.zeros((m, 1)), offset=np.full(m, 2.0))
        y = generate_synthetic_data(
            model, np.zeros(1), kind="poisson", lam=50.0, rng=np.random.default_rng(4)
        )
        assert np.all(y == np.round(y)) and np.all(y >= 0.0)
        assert abs(y.mean() - 100.0) < 3.0 * np.sqrt(100.0 / m)

    def test_error_cases(self):
        model = LinearModel(np.zeros((3, 1)), offset=np.array([1.0, 2.0, -1.0]))
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            generate_synthetic_data(model, np.zeros(1), kind="poisson", lam=1.0, rng=rng)
        with pytest.raises(ValueError):
            generate_synthetic_data(model, np.zeros(1), kind="gaussian", lam=0.0, rng=rng)
        with pytest.raises(ValueError):
            generate_synthetic_data(model, np.zeros(1), kind="uniform", lam=1.0, rng=rng)
        positive = LinearModel(np.zeros((2, 1)), offset=np.full(2, 1.0))
        with pytest.raises(ValueError):
            generate_synthetic_data(positive, np.zeros(1), kind="poisson", lam=1e17, rng=rng)
