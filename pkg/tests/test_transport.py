"""Transport maps, push-forwards, anisotropy and transported fields."""

import json

import numpy as np
import pytest

from app.core.exceptions import AssumptionViolation, InvertibilityError, SupportViolationError, ValidationError
from app.models.fields import ScalarField2D
from app.models.points import Configuration
from app.services import library
from app.services.energy import nn_truncation
from app.services.equilibrium import t_max
from app.services.transport import (
    TransportMap,
    anisotropy,
    anisotropy_matrix,
    anisotropy_sweep,
    approximate_family,
    approximation_orders,
    boundary_displacement_check,
    boundary_rho,
    build_psi_boundary,
    build_psi_interior,
    energy_transport_check,
    energy_transport_study,
    pushforward,
    transported_divergence_check,
    transported_field,
)

BETA = 2.0
SPREAD = Configuration(np.array([
    [0.0, 0.0], [0.35, 0.1], [-0.3, 0.25], [0.1, -0.4], [-0.45, -0.2], [0.5, 0.45],
]))


@pytest.fixture(scope="module")
def interior_map(circular_law, bump_center):
    return build_psi_interior(bump_center, circular_law)


def test_interior_psi_is_gradient_over_two(interior_map, circular_law, bump_center):
    grid = circular_law.grid
    X, Y = grid.mesh()
    gx, gy = bump_center.grad(X, Y)
    support = interior_map.region
    assert support.any()
    assert np.allclose(interior_map.psi.x[support], gx[support] / 2.0, atol=1e-12)
    assert np.allclose(interior_map.psi.y[support], gy[support] / 2.0, atol=1e-12)
    assert np.all(interior_map.psi.values[~support] == 0.0)
    assert interior_map.residual < 1e-2
    assert interior_map.kind == "interior"
    assert interior_map.meta["C0"] > 0


def test_interior_psi_rejects_boundary_function(circular_law, bump_boundary):
    with pytest.raises(SupportViolationError):
        build_psi_interior(bump_boundary, circular_law)


def test_norms_and_ttilde(interior_map):
    assert interior_map.c01_norm == pytest.approx(interior_map.sup + interior_map.lipschitz)
    assert interior_map.c11_norm >= interior_map.c01_norm
    assert interior_map.ttilde_max(BETA) == pytest.approx(BETA / (2 * interior_map.c01_norm))
    # discrete difference quotients stay close to the grid Jacobian bound
    assert interior_map.lipschitz_estimate() <= 1.5 * interior_map.lipschitz

    zero = TransportMap.from_function(interior_map.grid, lambda x, y: (0 * x, 0 * y))
    assert zero.ttilde_max(BETA) == np.inf


def test_identity_cells_are_exactly_fixed(interior_map):
    far = np.array([[1.2, 1.2], [-1.3, 0.9]])
    assert np.array_equal(interior_map.phi(far, 0.3), far)
    assert np.all(interior_map.jacobian_at(far) == 0.0)


def test_invert_round_trip(interior_map):
    step = 0.5 * interior_map.ttilde_max(BETA) / BETA
    targets = np.array([[0.1, 0.05], [-0.2, 0.3], [0.0, -0.35], [0.9, 0.9]])
    x = interior_map.invert(targets, step)
    assert np.allclose(interior_map.phi(x, step), targets, atol=1e-10)
    assert np.array_equal(interior_map.invert(targets, 0.0), targets)


def test_pushforward_preserves_mass(interior_map, circular_law):
    mu = circular_law.mu0
    assert pushforward(mu, interior_map, 0.0) is mu

    step = interior_map.ttilde_max(BETA) / (8 * BETA)
    pushed = pushforward(mu, interior_map, step)
    assert pushed.mass() == pytest.approx(mu.mass(), abs=1e-3)
    assert np.all(pushed.values >= 0)
    # outside the support of psi nothing moves
    X, Y = circular_law.grid.mesh()
    ring = (np.hypot(X, Y) > 0.7) & (np.hypot(X, Y) < 0.9)
    assert np.allclose(pushed.values[ring], mu.values[ring])


def test_approximate_family(interior_map, circular_law, tmp_path):
    tt = interior_map.ttilde_max(BETA)
    with pytest.raises(AssumptionViolation):
        approximate_family(interior_map, circular_law, 1.5 * tt, BETA)

    still = approximate_family(interior_map, circular_law, 0.0, BETA)
    assert still.mu_tilde is circular_law.mu0
    assert still.zeta_tilde is circular_law.zeta0

    fam = approximate_family(interior_map, circular_law, 0.25 * tt, BETA)
    assert fam.step == pytest.approx(0.125 * tt)
    files = fam.save(tmp_path)
    assert set(files) >= {"psi", "manifest", "mu_tilde", "zeta_tilde", "family"}
    meta = json.loads(files["family"].read_text())
    assert meta["ttilde_max"] == pytest.approx(tt)
    assert meta["mass_defect"] == pytest.approx(fam.mass_defect)
    assert fam.mass_defect < 1e-3


def test_pushforward_mass_tolerance(circular_law):
    # fixes the left edge and stretches to the right: mass beyond x = 1.5 leaves the grid
    tm = TransportMap.from_function(circular_law.grid, lambda x, y: (0.5 * (x + 1.5), 0.0 * y))
    pushed = pushforward(circular_law.mu0, tm, 1.0)
    lost = (np.arccos(0.5) - 0.5 * np.sqrt(0.75)) / np.pi
    assert pushed.mass() == pytest.approx(1.0 - lost, abs=3e-2)
    with pytest.raises(InvertibilityError) as excinfo:
        pushforward(circular_law.mu0, tm, 1.0, mass_tol=1e-3)
    assert excinfo.value.context["mass"] == pytest.approx(pushed.mass())
    assert pushforward(circular_law.mu0, tm, 0.0, mass_tol=1e-12) is circular_law.mu0


def test_density_approximation_is_second_order(interior_map, circular_law, bump_center):
    tm_limit = t_max(circular_law, bump_center, BETA)
    t0 = 0.5 * min(interior_map.ttilde_max(BETA), tm_limit)
    ts = [t0, t0 / 2, t0 / 4]
    report = approximation_orders(interior_map, circular_law, bump_center, BETA, ts)
    assert len(report["mu_errors"]) == 3
    assert len(report["zeta_orders"]) == 2
    assert report["mu_errors"][0] > report["mu_errors"][1] > report["mu_errors"][2]
    assert report["mu_orders"][0] is not None and report["mu_orders"][0] > 1.5


def test_anisotropy_matrix_is_trace_free_and_linear(circular_law, bump_center):
    grid = circular_law.grid
    a = build_psi_interior(bump_center, circular_law)
    b = TransportMap.from_function(grid, lambda x, y: (np.sin(x) * y, x * x - y))
    combo = TransportMap.from_field(a.psi.scaled(2.0) + b.psi.scaled(-0.5))

    for tm in (a, b, combo):
        A = anisotropy_matrix(tm)
        assert np.max(np.abs(A[..., 0, 0] + A[..., 1, 1])) < 1e-12

    assert np.allclose(anisotropy_matrix(combo), 2.0 * anisotropy_matrix(a) - 0.5 * anisotropy_matrix(b), atol=1e-9)

    va = anisotropy(a, SPREAD, circular_law.mu0, 0.25).value
    vb = anisotropy(b, SPREAD, circular_law.mu0, 0.25).value
    vc = anisotropy(combo, SPREAD, circular_law.mu0, 0.25).value
    assert vc == pytest.approx(2.0 * va - 0.5 * vb, rel=1e-8, abs=1e-10)


def test_anisotropy_vanishes_for_dilation(circular_law):
    dilation = TransportMap.from_function(circular_law.grid, lambda x, y: (x, y))
    result = anisotropy(dilation, SPREAD, circular_law.mu0, 0.25)
    assert abs(result.value) < 1e-8
    assert result.trace_defect < 1e-12


@pytest.mark.parametrize("s", [0.0, 0.5, 0.7])
def test_anisotropy_truncation_range(interior_map, circular_law, s):
    with pytest.raises(ValidationError):
        anisotropy(interior_map, SPREAD, circular_law.mu0, s)


def test_anisotropy_sweep_keys(interior_map, circular_law):
    sweep = anisotropy_sweep(interior_map, SPREAD, circular_law.mu0, (0.1, 0.3))
    assert set(sweep) == {0.1, 0.3}
    assert all(np.isfinite(v) for v in sweep.values())


def test_transported_field_at_zero_step_is_gradient(interior_map, grid128):
    f = ScalarField2D.from_function(grid128, lambda x, y: x * x + y)
    E = transported_field(f, interior_map, 0.0)
    assert np.allclose(E.values, f.gradient().values, atol=1e-12)


def test_transported_field_weak_divergence(interior_map, circular_law):
    eta = nn_truncation(SPREAD)
    step = 0.25 * interior_map.ttilde_max(BETA) / BETA
    E = transported_field((SPREAD, circular_law.mu0, eta), interior_map, step)
    report = transported_divergence_check(E, SPREAD, circular_law.mu0, eta, interior_map, step)
    assert len(report["tests"]) == 3
    assert report["max_relative_error"] < 0.1


def test_energy_transport_trivial_and_limits(interior_map, circular_law):
    zero = TransportMap.from_function(circular_law.grid, lambda x, y: (0 * x, 0 * y))
    row = energy_transport_check(SPREAD, circular_law.mu0, zero, 0.1, BETA)
    assert row["lhs"] == 0.0 and row["residual"] == 0.0

    row = energy_transport_check(SPREAD, circular_law.mu0, interior_map, 0.0, BETA)
    assert row["rhs"] == 0.0

    too_far = 0.6 * BETA / interior_map.c01_norm
    with pytest.raises(AssumptionViolation):
        energy_transport_check(SPREAD, circular_law.mu0, interior_map, too_far, BETA)


def test_energy_transport_study_structure(interior_map, circular_law):
    t0 = 0.5 * interior_map.ttilde_max(BETA)
    ts = [t0, t0 / 2, t0 / 4, t0 / 8]
    study = energy_transport_study(SPREAD, circular_law.mu0, interior_map, BETA, ts)
    assert [r["t"] for r in study["rows"]] == sorted(ts)
    assert len(study["second_differences"]) == 3
    for row in study["rows"]:
        assert row["residual"] == pytest.approx(row["lhs"] - row["rhs"])
    assert np.isfinite(study["linear_coefficient"])


def test_boundary_rho_of_interior_bump_is_zero(circular_law, bump_center):
    rho = boundary_rho(bump_center, circular_law)
    assert len(rho.rho) > 0
    assert np.max(np.abs(rho.rho)) < 1e-2
    assert rho.at_angle((0.0, 0.0), 0.3) == pytest.approx(0.0, abs=1e-2)


def test_transport_map_save_and_summary(interior_map, tmp_path):
    files = interior_map.save(tmp_path, beta=BETA)
    manifest = json.loads(files["manifest"].read_text())
    assert manifest["kind"] == "interior"
    assert manifest["test_function"] == "bump_center"
    assert manifest["ttilde_max"] == pytest.approx(interior_map.ttilde_max(BETA))
    assert files["psi"].exists()


@pytest.mark.slow
def test_boundary_psi_for_linear_plateau(circular_law):
    xi = library.linear_plateau()
    tm = build_psi_boundary(xi, circular_law)
    assert tm.kind == "boundary"
    grid = circular_law.grid
    X, Y = grid.mesh()
    core = np.hypot(X, Y) < 0.8
    err = np.hypot(tm.psi.x[core] - 1.0, tm.psi.y[core])
    assert np.median(err) < 0.1
    assert tm.residual < 0.1


@pytest.mark.slow
def test_boundary_displacement_matches_first_order(solved_circular_law, bump_boundary):
    result = boundary_displacement_check(bump_boundary, solved_circular_law, 0.02, BETA)
    assert np.linalg.norm(result["predicted"]) > 0
    assert result["relative_error"] <= 0.2
