import numpy as np
import pydantic
import pytest

from app.core.exceptions import CoincidentPointsError, GridMismatchError, ValidationError
from app.models.fields import Grid2D, Measure2D, ScalarField2D, VectorField2D
from app.models.points import Configuration, TruncationVector, load_samples, save_samples
from app.models.schemas import (
    CLTPrediction,
    ExperimentConfig,
    ExperimentKind,
    FluctuationCase,
    SamplerConfig,
)
from app.services import library


def test_grid_geometry():
    grid = Grid2D.centered(1.5, 60)
    assert grid.spacing == pytest.approx(0.05)
    assert grid.x[0] == pytest.approx(-1.5 + 0.025)
    assert grid.extent == pytest.approx((-1.5, 1.5, -1.5, 1.5))
    i, j = grid.cell_index(np.array([[0.01, -0.01]]))
    assert (i[0], j[0]) == (30, 29)
    assert grid.contains(np.array([[1.6, 0.0], [0.0, 0.0]])).tolist() == [False, True]


def test_grid_rejects_bad_spacing():
    with pytest.raises(ValidationError):
        Grid2D((0.0, 0.0), -1.0, 8, 8)
    with pytest.raises(ValidationError):
        Grid2D((0.0, 0.0), 0.1, 2, 8)


def test_fields_on_different_grids_do_not_mix():
    a = ScalarField2D.zeros(Grid2D.centered(1.0, 8))
    b = ScalarField2D.zeros(Grid2D.centered(1.0, 16))
    with pytest.raises(GridMismatchError):
        a + b


def test_scalar_field_rejects_nan():
    grid = Grid2D.centered(1.0, 8)
    values = np.zeros(grid.shape)
    values[3, 3] = np.nan
    with pytest.raises(ValidationError):
        ScalarField2D(grid, values)


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_field_files_preserve_values(tmp_path, suffix):
    grid = Grid2D.centered(1.0, 12, center=(0.3, -0.2))
    field = ScalarField2D.from_function(grid, lambda x, y: np.sin(3 * x) * y)
    loaded = ScalarField2D.load(field.save(tmp_path / f"f{suffix}"))
    assert loaded.grid.same_as(grid)
    np.testing.assert_array_equal(loaded.values, field.values)

    vec = field.gradient()
    loaded_vec = VectorField2D.load(vec.save(tmp_path / f"v{suffix}"))
    np.testing.assert_array_equal(loaded_vec.values, vec.values)


def test_jacobian_of_linear_field_is_exact():
    grid = Grid2D.centered(1.0, 16)
    field = VectorField2D.from_function(grid, lambda x, y: (x + 3 * y, 2 * y))
    jac = field.jacobian()
    np.testing.assert_allclose(jac[..., 0, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(jac[..., 0, 1], 3.0, atol=1e-12)
    np.testing.assert_allclose(jac[..., 1, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(field.divergence(), 3.0, atol=1e-12)


def test_measure_validation_and_mass():
    grid = Grid2D.centered(1.0, 10)
    density = np.full(grid.shape, 0.25)
    mu = Measure2D.from_density(grid, density)
    assert mu.mass() == pytest.approx(1.0)
    assert mu.integrate(np.ones(grid.shape)) == pytest.approx(1.0)
    density[0, 0] = -1.0
    with pytest.raises(ValidationError):
        Measure2D.from_density(grid, density, np.ones(grid.shape, dtype=bool))


def test_configuration_checks():
    X = Configuration(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
    assert X.N == 3
    with pytest.raises(CoincidentPointsError):
        X.require_distinct()
    with pytest.raises(ValidationError):
        Configuration(np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        Configuration(np.array([[np.inf, 0.0]]))
    assert Configuration(np.zeros((0, 2))).N == 0
    z = Configuration.from_complex(np.array([1 + 2j]))
    assert z.points.tolist() == [[1.0, 2.0]]


def test_truncation_vector_is_positive():
    with pytest.raises(ValidationError):
        TruncationVector(np.array([0.1, 0.0]))
    assert TruncationVector(np.array([0.1, 0.2])).scaled(0.5).eta.tolist() == pytest.approx([0.05, 0.1])


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_sample_streams_with_varying_n(tmp_path, rng, suffix):
    samples = [Configuration(rng.normal(size=(n, 2))) for n in (3, 5, 1)]
    loaded = load_samples(save_samples(tmp_path / f"s{suffix}", samples))
    assert [c.N for c in loaded] == [3, 5, 1]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.points, b.points)


def test_experiment_config_validation():
    with pytest.raises(pydantic.ValidationError) as info:
        ExperimentConfig(kind="clt-verify", seed=1, sampler={"beta": -2.0})
    assert info.value.errors()[0]["loc"] == ("sampler", "beta")
    with pytest.raises(pydantic.ValidationError):
        ExperimentConfig(kind="beta-sweep", seed=1, betas=[1.0, 0.0])
    with pytest.raises(pydantic.ValidationError):
        ExperimentConfig(kind="clt-verify", seed=1, unknown_field=3)
    with pytest.raises(pydantic.ValidationError):
        ExperimentConfig(kind="clt-verify")
    config = ExperimentConfig(kind="rider-virag", seed=5)
    assert config.kind == ExperimentKind.RIDER_VIRAG
    assert SamplerConfig().N == 64


def test_mesoscopic_prediction_is_centred():
    assert CLTPrediction(mean=0.0, variance=1.0, case=FluctuationCase.MESOSCOPIC).std == 1.0
    with pytest.raises(pydantic.ValidationError):
        CLTPrediction(mean=0.1, variance=1.0, case=FluctuationCase.MESOSCOPIC)


def test_test_function_derivatives_match_finite_differences():
    xi = library.get_test_function("bump_offset")
    x0, y0, e = 0.45, 0.1, 1e-5
    gx, gy = xi.grad(x0, y0)
    assert gx == pytest.approx((xi(x0 + e, y0) - xi(x0 - e, y0)) / (2 * e), rel=1e-6)
    assert gy == pytest.approx((xi(x0, y0 + e) - xi(x0, y0 - e)) / (2 * e), rel=1e-6)
    e = 1e-4
    lap = (xi(x0 + e, y0) + xi(x0 - e, y0) + xi(x0, y0 + e) + xi(x0, y0 - e) - 4 * xi(x0, y0)) / e ** 2
    assert xi.lap(x0, y0) == pytest.approx(lap, rel=1e-3)


def test_test_function_scaling():
    xi = library.mesoscopic_template((0.2, 0.1), 0.1)
    assert xi.support_radius == pytest.approx(0.1)
    assert xi(0.2, 0.1) == pytest.approx(1.0)
    assert xi(0.35, 0.1) == 0.0
    doubled = library.get_test_function("bump_center", amplitude=2.0)
    assert doubled(0.0, 0.0) == pytest.approx(2.0)
    assert doubled.seminorms()["sup"] == pytest.approx(2.0)


def test_linear_plateau_is_x1_near_the_disk():
    xi = library.linear_plateau()
    assert xi(0.7, 0.3) == pytest.approx(0.7)
    assert xi(1.5, 0.0) == 0.0
    gx, gy = xi.grad(0.5, -0.5)
    assert (gx, gy) == pytest.approx((1.0, 0.0))


def test_unknown_library_names():
    from app.core.exceptions import ConfigurationError
    with pytest.raises(ConfigurationError):
        library.get_test_function("no_such_function")
    with pytest.raises(ConfigurationError):
        library.get_potential("no_such_potential")
