import numpy as np
import pytest
from scipy import integrate

from app.core.exceptions import SupportViolationError
from app.models.fields import Grid2D, Measure2D, ScalarField2D
from app.services import field_grid, library
from app.services.equilibrium import equilibrium_from_closed_form


def _disk(grid: Grid2D, radius: float = 1.0) -> np.ndarray:
    X, Y = grid.mesh()
    return np.hypot(X, Y) <= radius


@pytest.mark.parametrize("dx,dy", [(0.3, -0.1), (0.1, 0.0), (0.2, 0.1)])
def test_cell_log_integral_matches_quadrature(dx, dy):
    h = 0.1
    exact = float(field_grid.cell_log_integral(np.array(dx), np.array(dy), h))
    value, _ = integrate.dblquad(
        lambda y, x: -0.5 * np.log(x * x + y * y),
        dx - h / 2, dx + h / 2, dy - h / 2, dy + h / 2,
        epsabs=1e-13, epsrel=1e-11,
    )
    assert exact == pytest.approx(value, rel=1e-7, abs=1e-10)


def test_direct_and_fft_potentials_agree(grid64):
    mu = equilibrium_from_closed_form(grid64).mu0
    direct = field_grid.log_potential(mu, method="direct")
    fft = field_grid.log_potential(mu, method="fft")
    np.testing.assert_allclose(direct.values, fft.values, atol=1e-10)
    points = np.array([[0.1, 0.2], [-0.7, 0.4], [1.3, -1.1]])
    np.testing.assert_allclose(
        field_grid.log_potential_at(mu, points), direct.interpolate(points), atol=5e-3
    )


def test_circular_law_potential(circular_law):
    """h = (1 - |x|^2)/2 inside the unit disk and -log|x| far away."""
    mu = circular_law.mu0
    h = field_grid.log_potential(mu)
    X, Y = h.grid.mesh()
    r = np.hypot(X, Y)
    inner = r < 0.8
    np.testing.assert_allclose(h.values[inner], 0.5 * (1 - r[inner] ** 2), atol=2e-2)
    far = field_grid.log_potential_at(mu, np.array([[4.0, 0.0], [0.0, -6.0]]))
    np.testing.assert_allclose(far, -mu.mass() * np.log([4.0, 6.0]), rtol=1e-3)
    assert field_grid.log_energy(mu) == pytest.approx(0.25, abs=2e-2)


def test_discrete_laplacian_of_quadratic(grid64):
    f = ScalarField2D.from_function(grid64, lambda x, y: x * x + 3 * y * y)
    lap = field_grid.discrete_laplacian(f)
    valid = field_grid.laplacian_valid_mask(grid64)
    np.testing.assert_allclose(lap.values[valid], 8.0, atol=1e-8)
    assert np.all(lap.values[~valid] == 0)


def test_quadrature_over_region(grid64):
    ones = ScalarField2D.constant(grid64, 1.0)
    area = field_grid.quadrature(ones, _disk(grid64))
    assert area == pytest.approx(np.pi, rel=2e-2)
    assert field_grid.quadrature(ones) == pytest.approx(9.0)


def test_mask_utilities(grid64):
    disk = _disk(grid64, 0.5)
    edge = field_grid.boundary_cells(disk)
    assert edge.any() and not (edge & ~disk).any()
    dist = field_grid.distance_to_mask(disk, grid64.spacing)
    assert np.all(dist[disk] == 0)
    assert dist[0, 0] > 1.0
    assert np.all(np.isinf(field_grid.distance_to_mask(np.zeros_like(disk), grid64.spacing)))
    assert field_grid.mask_diameter(grid64, disk) == pytest.approx(1.0, abs=3 * grid64.spacing)

    two = _disk(grid64, 0.3)
    X, Y = grid64.mesh()
    two |= np.hypot(X - 1.0, Y) < 0.2
    _, count = field_grid.label_components(two)
    assert count == 2


def test_sor_and_sparse_solvers_agree(rng):
    n = 24
    initial = np.zeros((n, n))
    initial[0, :], initial[-1, :] = rng.normal(size=n), rng.normal(size=n)
    initial[:, 0], initial[:, -1] = rng.normal(size=n), rng.normal(size=n)
    fixed = np.zeros((n, n), dtype=bool)
    fixed[10:14, 10:14] = True
    initial[fixed] = 0.5
    sor = field_grid.sor_solve(initial, fixed, 0.1, tol=1e-12)
    direct = field_grid.sparse_solve(initial, fixed, 0.1)
    np.testing.assert_allclose(sor.values, direct.values, atol=1e-8)
    assert direct.residual < 1e-8
    np.testing.assert_array_equal(sor.values[fixed], 0.5)


def test_obstacle_sor_respects_the_lower_bound():
    n = 20
    lower = np.full((n, n), -1.0)
    lower[8:12, 8:12] = 0.3
    result = field_grid.sor_solve(np.zeros((n, n)), np.zeros((n, n), dtype=bool), 0.1, lower=lower)
    assert np.all(result.values >= lower - 1e-12)
    assert result.values[9, 9] == pytest.approx(0.3)


def test_extension_of_a_constant_is_constant(grid64):
    sigma = _disk(grid64, 0.6)
    ext = field_grid.harmonic_extension(lambda x, y: np.ones_like(x), sigma, grid64, box_factor=10)
    np.testing.assert_allclose(ext.field.values, 1.0, atol=1e-8)
    assert ext.far_field_value == pytest.approx(1.0)
    jump = field_grid.neumann_jump(ext)
    np.testing.assert_allclose(jump.values, 0.0, atol=1e-6)
    np.testing.assert_allclose(field_grid.component_fluxes(ext.field, sigma), 0.0, atol=1e-8)


def test_extension_of_x1_outside_the_disk(grid128):
    """x_1 on the unit disk extends to x_1/|x|^2 outside, with normal jump 2 cos(theta)."""
    sigma = _disk(grid128)
    xi = library.linear_plateau()
    ext = field_grid.harmonic_extension(xi, sigma, grid128)
    far = np.array([[1.3, 0.0], [0.0, 1.3], [-1.2, 0.2]])
    expected = far[:, 0] / np.sum(far ** 2, axis=1)
    np.testing.assert_allclose(ext.field.interpolate(far), expected, atol=5e-2)

    jump = field_grid.neumann_jump(ext, inner_gradient=xi.grad)
    theta = np.arctan2(jump.points[:, 1], jump.points[:, 0])
    assert np.median(np.abs(jump.values - 2 * np.cos(theta))) < 0.25
    assert jump.nearest((1.0, 0.0)) == pytest.approx(2.0, abs=0.4)


def test_extension_needs_a_support(grid64):
    with pytest.raises(SupportViolationError):
        field_grid.harmonic_extension(lambda x, y: x, np.zeros(grid64.shape, dtype=bool), grid64)
    edge = np.zeros(grid64.shape, dtype=bool)
    edge[0, 5] = True
    with pytest.raises(SupportViolationError):
        field_grid.harmonic_extension(lambda x, y: x, edge, grid64)


def test_dirichlet_energy_of_linear_field(grid64):
    f = ScalarField2D.from_function(grid64, lambda x, y: 2 * x - y)
    assert field_grid.dirichlet_energy(f) == pytest.approx(5.0 * 9.0)
    mu = Measure2D.from_density(grid64, np.where(_disk(grid64), 1.0, 0.0))
    assert field_grid.dirichlet_energy(f, mu) == pytest.approx(5.0 * mu.mass())
