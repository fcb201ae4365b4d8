import dataclasses

import numpy as np
import pytest

from app.core.exceptions import CoincidentPointsError, ValidationError
from app.models.points import Configuration, TruncationVector
from app.services import energy, library
from app.services.sampler import ginibre_batch

SPREAD = np.array([
    [0.0, 0.0], [0.5, 0.0], [-0.3, 0.4], [0.1, -0.6], [-0.5, -0.3], [0.6, 0.5],
])


def test_pair_sum_methods_agree(ginibre16):
    direct = energy.pairwise_log_sum(ginibre16.points)
    blocked = energy.pairwise_log_sum(ginibre16.points, method="blocked", block_size=5, threads=2)
    assert blocked == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValidationError):
        energy.pairwise_log_sum(ginibre16.points, method="tree")


def test_two_point_hamiltonian():
    X = Configuration(np.array([[-0.5, 0.0], [0.5, 0.0]]))
    assert energy.hamiltonian(X, library.quadratic()) == pytest.approx(1.0)
    Y = Configuration(np.array([[0.0, 0.0], [0.5, 0.0]]))
    assert energy.hamiltonian(Y, library.quadratic()) == pytest.approx(2 * np.log(2) + 2 * 0.25)


def test_hamiltonian_is_permutation_invariant(ginibre16, rng):
    V = library.quartic()
    order = rng.permutation(ginibre16.N)
    assert energy.hamiltonian(ginibre16.permuted(order), V) == pytest.approx(energy.hamiltonian(ginibre16, V), rel=1e-13)


def test_coincident_points_are_rejected():
    X = Configuration(np.array([[0.1, 0.1], [0.1, 0.1]]))
    with pytest.raises(CoincidentPointsError):
        energy.hamiltonian(X, library.quadratic())


def test_gradient_matches_finite_differences():
    X = Configuration(SPREAD)
    V = library.quadratic_bump()
    grad = energy.energy_gradient(X, V)
    e = 1e-6
    for i, axis in [(0, 0), (3, 1), (5, 0)]:
        step = np.zeros_like(SPREAD)
        step[i, axis] = e
        fd = (energy.hamiltonian(Configuration(SPREAD + step), V)
              - energy.hamiltonian(Configuration(SPREAD - step), V)) / (2 * e)
        assert grad[i, axis] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_nearest_neighbour_truncation():
    X = Configuration(np.array([[0.0, 0.0], [0.1, 0.0], [2.0, 0.0]]))
    r = energy.nn_truncation(X)
    assert r.eta == pytest.approx([0.025, 0.025, 0.25 * 3 ** -0.5])
    with pytest.raises(ValidationError):
        energy.nn_truncation(Configuration(np.array([[0.0, 0.0]])))


def test_single_charge_at_the_centre(circular_law):
    """F_1 at the origin is -2 h(0) + iint = -1 + 1/4."""
    report = energy.next_order_energy(Configuration(np.array([[0.0, 0.0]])), circular_law.mu0)
    assert report.pairwise_sum == 0.0
    assert report.FN == pytest.approx(-0.75, abs=2e-2)
    assert report.FN == pytest.approx(report.pairwise_sum + report.cross_term + report.background_term)


def test_splitting_formula(solved_circular_law):
    X = Configuration(SPREAD[:4])
    assert energy.splitting_residual(X, solved_circular_law) <= 0.1 * X.N


def test_lower_bound_constant_is_moderate(circular_law):
    batch = ginibre_batch(12, 5, seed=3)
    result = energy.fn_lower_bound_constant(batch, circular_law.mu0)
    assert result["samples"] == 5
    assert np.isfinite(result["C"])
    assert result["C"] < 10


def test_smearing_kernel():
    x = np.array([0.0, 0.05, 0.2])
    values = energy.f_eta(x, np.zeros(3), 0.1)
    assert np.isinf(values[0])
    assert values[1] == pytest.approx(np.log(2.0))
    assert values[2] == 0.0
    for eta in (1e-3, 1e-2, 0.1, 1.0):
        result = energy.smearing_integral(eta)
        assert result["closed_form"] == pytest.approx(np.pi * eta ** 2 / 2)
        assert result["error"] <= 1e-9 * max(1.0, result["closed_form"])


def test_smeared_integral_against_uniform_density(circular_law):
    X = Configuration(np.array([[0.1, 0.1], [-0.2, 0.3]]))
    eta = TruncationVector(np.array([0.05, 0.1]))
    values = energy.smeared_mu_integral(X, circular_law.mu0, eta)
    np.testing.assert_allclose(values, eta.eta ** 2 / 2, rtol=1e-4)


def test_smeared_potential_caps_the_singularity():
    pts = np.array([[0.0, 0.0]])
    value = energy.smeared_potential(pts, np.array([0.1]), np.array([0.0, 1.0]), np.array([0.0, 0.0]))
    assert value == pytest.approx([-np.log(0.1), 0.0])


def test_truncated_energy_identity(circular_law):
    X = Configuration(SPREAD)
    result = energy.truncated_energy_identity(X, circular_law.mu0)
    assert result["exact_truncation"]
    assert result["relative_residual"] <= 5e-2
    assert result["smearing_ok"]
    assert result["within_bounds"]
    assert result["smearing_crosscheck"] <= 1e-2


def test_overlapping_truncation_stays_within_bounds(circular_law):
    X = Configuration(SPREAD)
    eta = TruncationVector(np.full(X.N, 0.3))
    result = energy.truncated_energy_identity(X, circular_law.mu0, eta)
    assert not result["exact_truncation"]
    assert result["upper_bound"] > 0


def test_fluctuation_energy_bound(circular_law, bump_center):
    X = ginibre_batch(10, 1, seed=11)[0]
    result = energy.fluct_energy_bound_check(X, circular_law.mu0, bump_center)
    assert result["holds"]
    with pytest.raises(ValidationError):
        energy.fluct_energy_bound_check(X, circular_law.mu0, bump_center, TruncationVector(np.ones(X.N)))


def test_truncated_potential_of_single_charge(circular_law):
    X = Configuration(np.array([[0.0, 0.0]]))
    eta = TruncationVector(np.array([0.1]))
    H = energy.truncated_potential_field(X, circular_law.mu0, eta)
    grid = circular_law.grid
    Xg, Yg = grid.mesh()
    r = np.hypot(Xg, Yg)
    # a charge screened by the circular law: flat inside the cut-off, neutral outside the disk
    assert np.allclose(H.values[r < 0.05], -np.log(0.1) - 0.5, atol=1e-2)
    assert np.max(np.abs(H.values[(r > 1.1) & (r < 1.4)])) < 1e-2

    with pytest.raises(ValidationError):
        energy.truncated_potential_field(X, circular_law.mu0, TruncationVector(np.array([0.1, 0.2])))


@pytest.mark.parametrize("excess, holds", [(1.005, True), (1.02, False)])
def test_fluctuation_bound_allows_one_percent_slack(circular_law, bump_center, monkeypatch, excess, holds):
    X = ginibre_batch(10, 1, seed=11)[0]
    base = energy.fluct_energy_bound_check(X, circular_law.mu0, bump_center)
    assert base["lhs"] > 0
    # shrink the field energy until lhs exceeds rhs by the given factor
    factor = (base["lhs"] / (excess * base["rhs"])) ** 2
    field_energy = energy.field_energy

    def scaled(*args, **kwargs):
        fe = field_energy(*args, **kwargs)
        return dataclasses.replace(fe, grid_integral=fe.grid_integral * factor, tail=fe.tail * factor)

    monkeypatch.setattr(energy, "field_energy", scaled)
    result = energy.fluct_energy_bound_check(X, circular_law.mu0, bump_center)
    assert result["lhs"] / result["rhs"] == pytest.approx(excess, rel=1e-9)
    assert result["holds"] is holds
