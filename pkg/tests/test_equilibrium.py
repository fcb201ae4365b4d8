import numpy as np
import pytest

from app.core.exceptions import AssumptionViolation, SupportViolationError, ValidationError
from app.models.fields import Grid2D, Measure2D
from app.services import equilibrium, library


def test_closed_form_circular_law(circular_law):
    assert circular_law.c0 == pytest.approx(0.5)
    assert circular_law.IV == pytest.approx(0.75)
    assert circular_law.support_radius() == pytest.approx(1.0, abs=circular_law.grid.spacing)
    assert circular_law.min_density() == pytest.approx(1 / np.pi)


def test_solved_quadratic_matches_the_circular_law(solved_circular_law):
    eq = solved_circular_law
    h = eq.grid.spacing
    assert eq.mu0.mass() == pytest.approx(1.0, abs=1e-9)
    assert eq.support_radius() == pytest.approx(1.0, abs=2 * h)
    assert eq.c0 == pytest.approx(0.5, abs=2e-2)
    assert eq.IV == pytest.approx(0.75, abs=2e-2)
    assert eq.residuals is not None and eq.residuals.passed
    assert eq.mu0.sup() == pytest.approx(1 / np.pi, rel=1e-9)
    assert np.all(eq.zeta0.values >= -1e-12)


def test_euler_lagrange_detects_a_wrong_constant(solved_circular_law):
    from dataclasses import replace
    broken = replace(solved_circular_law, c0=solved_circular_law.c0 + 0.5)
    report = equilibrium.verify_euler_lagrange(broken, h_mu0=solved_circular_law.h_mu0)
    assert not report.passed
    assert report.min_zeta >= 0.4


def test_quartic_radius():
    V = library.quartic()
    assert equilibrium.radial_support_radius(V) == pytest.approx(0.5 ** 0.25, rel=1e-10)
    r = np.array([0.2, 0.5, 1.0])
    np.testing.assert_allclose(equilibrium.radial_density(V, r), [4 * 0.04 / np.pi, 4 * 0.25 / np.pi, 0.0])


def test_solved_quartic(grid64):
    eq = equilibrium.solve_equilibrium(library.quartic(), grid64)
    assert eq.support_radius() == pytest.approx(0.5 ** 0.25, abs=3 * grid64.spacing)
    assert eq.mu0.mass() == pytest.approx(1.0, abs=1e-9)


def test_small_box_cannot_hold_the_measure():
    with pytest.raises(SupportViolationError):
        equilibrium.solve_equilibrium(library.quadratic(), Grid2D.centered(0.5, 16))


def test_unknown_method(grid64):
    with pytest.raises(ValidationError):
        equilibrium.solve_equilibrium(library.quadratic(), grid64, method="newton")


def test_t_max_and_interior_classification(circular_law, bump_center, bump_boundary):
    assert equilibrium.is_interior(bump_center, circular_law)
    assert not equilibrium.is_interior(bump_boundary, circular_law)
    assert equilibrium.t_max(circular_law, bump_boundary, 2.0) is None
    tm = equilibrium.t_max(circular_law, bump_center, 2.0)
    lap_sup = equilibrium.laplacian_sup(bump_center, circular_law.grid)
    assert tm == pytest.approx(2 * np.pi * 2.0 * (1 / np.pi) / (2 * lap_sup))
    with pytest.raises(ValidationError):
        equilibrium.t_max(circular_law, bump_center, 0.0)


def test_interior_perturbation(circular_law, bump_center):
    beta = 2.0
    tm = equilibrium.t_max(circular_law, bump_center, beta)
    same = equilibrium.perturbed_equilibrium(circular_law, bump_center, 0.0, beta)
    assert same.mu_t is circular_law.mu0

    pert = equilibrium.perturbed_equilibrium(circular_law, bump_center, 0.5 * tm, beta)
    assert pert.is_interior_regime
    np.testing.assert_array_equal(pert.sigma_mask, circular_law.sigma_mask)
    assert pert.mu_t.mass() == pytest.approx(circular_law.mu0.mass(), abs=1e-6)
    assert pert.mu_t.values[circular_law.sigma_mask].min() > 0


def test_save_and_load(tmp_path, circular_law):
    files = equilibrium.save_equilibrium(circular_law, tmp_path / "eq")
    assert set(files) == {"mu0", "zeta0", "h_mu0", "sigma", "manifest"}
    loaded = equilibrium.load_equilibrium(tmp_path / "eq", circular_law.potential)
    assert loaded.c0 == circular_law.c0
    np.testing.assert_array_equal(loaded.sigma_mask, circular_law.sigma_mask)
    np.testing.assert_array_equal(loaded.mu0.values, circular_law.mu0.values)


def test_growth_condition_is_enforced():
    weak = library.polynomial([[0.0, 0.0, 0.1], [0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    with pytest.raises(AssumptionViolation):
        equilibrium.solve_equilibrium(weak, Grid2D.centered(3.0, 32))


def test_logarithmic_energy_and_entropy_of_circular_law(circular_law):
    mass = circular_law.mu0.mass()
    assert equilibrium.logarithmic_energy(circular_law.mu0, circular_law.potential) == pytest.approx(0.75, abs=2e-2)
    assert equilibrium.entropy(circular_law.mu0) == pytest.approx(-np.log(np.pi) * mass, abs=3e-2)


def test_entropy_ignores_empty_cells(grid64):
    density = np.zeros(grid64.shape)
    density[:32, :] = 1.0
    mu = Measure2D.from_density(grid64, density / (density.sum() * grid64.cell_area))
    assert equilibrium.entropy(mu) == pytest.approx(-np.log(4.5), rel=1e-12)


def test_compare_masks_counts(grid64):
    Xg, Yg = grid64.mesh()
    r = np.hypot(Xg, Yg)
    inner, outer = r < 0.8, r < 1.0
    report = equilibrium.compare_masks(inner, outer)
    assert report["only_a"] == 0
    assert report["only_b"] == int(np.sum(outer & ~inner))
    assert report["symmetric_difference"] == report["only_b"]
    assert equilibrium.compare_masks(outer, outer)["symmetric_difference"] == 0
