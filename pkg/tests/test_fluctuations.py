import numpy as np
import pytest

from app.core.exceptions import AssumptionViolation, DegenerateDataError, ValidationError
from app.models.fields import ScalarField2D
from app.models.points import Configuration
from app.models.schemas import CLTPrediction, FluctuationCase
from app.services import fluctuations, library
from app.services.equilibrium import t_max

SPREAD = np.array([
    [0.0, 0.0], [0.5, 0.0], [-0.3, 0.4], [0.1, -0.6], [-0.5, -0.3], [0.6, 0.5],
])


def test_fluct_of_simple_configurations(circular_law, bump_center):
    empty = Configuration(np.zeros((0, 2)))
    assert fluctuations.fluct(empty, bump_center, circular_law) == 0.0
    X = Configuration(np.array([[0.0, 0.0]]))
    Xg, Yg = circular_law.grid.mesh()
    mean = circular_law.mu0.integrate(bump_center(Xg, Yg))
    assert fluctuations.fluct(X, bump_center, circular_law) == pytest.approx(1.0 - mean)
    assert fluctuations.fluct(X, bump_center, circular_law.mu0) == pytest.approx(1.0 - mean)


def test_batch_statistics_and_files(tmp_path, rng, circular_law, bump_center, ginibre16):
    batch = fluctuations.FluctuationBatch(rng.normal(1.0, 2.0, size=400), {"N": 16})
    assert batch.mean == pytest.approx(1.0, abs=0.3)
    assert batch.variance == pytest.approx(4.0, rel=0.2)
    assert batch.mean_se == pytest.approx(np.sqrt(batch.variance / 400))
    assert np.isfinite(batch.variance_se)
    assert (-batch).mean == pytest.approx(-batch.mean)

    files = batch.save(tmp_path / "fluct.csv")
    loaded = fluctuations.FluctuationBatch.load(files["values"])
    np.testing.assert_array_equal(loaded.values, batch.values)
    assert loaded.meta["N"] == 16

    from_samples = fluctuations.FluctuationBatch.from_samples([ginibre16], bump_center, circular_law, beta=2.0)
    assert from_samples.values[0] == pytest.approx(fluctuations.fluct(ginibre16, bump_center, circular_law))
    assert from_samples.meta["test_function"] == "bump_center"
    with pytest.raises(DegenerateDataError):
        fluctuations.FluctuationBatch(np.array([1.0, np.nan]))


def test_classification(circular_law, bump_center, bump_boundary):
    assert fluctuations.classify(bump_center, circular_law) == FluctuationCase.INTERIOR
    assert fluctuations.classify(bump_boundary, circular_law) == FluctuationCase.BOUNDARY
    meso = library.mesoscopic_template((0.1, 0.0), 0.1)
    assert fluctuations.classify(meso, circular_law) == FluctuationCase.MESOSCOPIC


def test_interior_prediction_for_the_circular_law(circular_law, bump_center):
    pred = fluctuations.predict(bump_center, circular_law, beta=2.0)
    assert pred.case == FluctuationCase.INTERIOR
    # log lap V is constant and lap(xi) integrates to zero
    assert pred.mean == pytest.approx(0.0, abs=1e-5)
    energy = fluctuations.gradient_pairing(bump_center, bump_center)
    assert pred.variance == pytest.approx(energy / (4 * np.pi))
    assert fluctuations.predicted_mean(bump_center, circular_law, beta=4.0) == 0.0
    assert fluctuations.predicted_variance(bump_center, circular_law, beta=1.0) == pytest.approx(2 * pred.variance)


def test_interior_variance_matches_the_closed_form(circular_law):
    for name in ("bump_center", "bump_offset", "bump_wide"):
        xi = library.get_test_function(name)
        predicted = fluctuations.predicted_variance(xi, circular_law, beta=2.0)
        assert predicted == pytest.approx(fluctuations.rider_virag_variance(xi), rel=1e-3)


@pytest.mark.slow
def test_boundary_variance_matches_the_closed_form(circular_law, bump_boundary):
    predicted = fluctuations.predicted_variance(bump_boundary, circular_law, beta=2.0)
    assert predicted == pytest.approx(fluctuations.rider_virag_variance(bump_boundary), rel=5e-2)
    compat = fluctuations.check_compatibility(bump_boundary, circular_law)
    assert compat["components"] == 1


def test_covariance_is_bilinear(circular_law):
    a = library.get_test_function("bump_center")
    b = library.get_test_function("bump_offset")
    cov = fluctuations.predicted_covariance(a, b, circular_law, beta=2.0)
    assert cov == pytest.approx(fluctuations.gradient_pairing(a, b) / (4 * np.pi))
    assert fluctuations.predicted_covariance(a, a, circular_law, 2.0) == pytest.approx(
        fluctuations.predicted_variance(a, circular_law, 2.0))


def test_mesoscopic_prediction(circular_law):
    meso = library.mesoscopic_template((0.1, 0.0), 0.1)
    pred = fluctuations.predict(meso, circular_law, beta=2.0)
    assert pred.mean == 0.0
    # scale invariance of the Dirichlet energy
    unit = library.mesoscopic_template((0.0, 0.0), 1.0)
    assert pred.variance == pytest.approx(fluctuations.gradient_pairing(unit, unit) / (4 * np.pi), rel=1e-3)
    with pytest.raises(AssumptionViolation):
        fluctuations.predict(library.mesoscopic_template((0.9, 0.0), 0.1), circular_law, beta=2.0)


def test_laplace_estimates(rng):
    values = rng.normal(0.0, 1.0, size=5000)
    zero = fluctuations.estimate_laplace(values, 0.0)
    assert zero.value == pytest.approx(0.0, abs=1e-12)
    half = fluctuations.estimate_laplace(values, 0.5)
    assert half.value == pytest.approx(0.125, abs=3 * half.se + 0.01)
    assert half.reliable
    with pytest.raises(ValidationError):
        fluctuations.estimate_laplace([], 1.0)


def test_joint_covariance(rng):
    a = rng.normal(size=2000)
    b = 0.5 * a + rng.normal(size=2000)
    cov, se = fluctuations.joint_covariance(a, b)
    assert cov == pytest.approx(0.5, abs=4 * se)
    with pytest.raises(ValidationError):
        fluctuations.joint_covariance(a, b[:10])


def test_gaussianity_test(rng):
    pred = CLTPrediction(mean=0.0, variance=1.0, case=FluctuationCase.INTERIOR)
    report = fluctuations.gaussianity_test(rng.normal(size=1000), pred)
    assert report.passed
    assert abs(report.skewness) < 4 * report.skewness_se
    shifted = fluctuations.gaussianity_test(rng.normal(1.0, 1.0, size=1000), pred)
    assert not shifted.passed
    with pytest.raises(ValidationError):
        fluctuations.gaussianity_test(rng.normal(size=50), pred)
    with pytest.raises(DegenerateDataError):
        fluctuations.gaussianity_test(np.ones(300), pred)


def test_empirical_cdf(rng):
    pred = CLTPrediction(mean=0.0, variance=1.0, case=FluctuationCase.INTERIOR)
    frame = fluctuations.empirical_cdf(rng.normal(size=300), pred)
    assert list(frame.columns) == ["value", "empirical_cdf", "gaussian_cdf"]
    assert frame["value"].is_monotonic_increasing
    assert frame["empirical_cdf"].iloc[-1] == 1.0


def test_moderate_deviations_of_a_gaussian(rng):
    values = rng.normal(0.0, 1.0, size=5000)
    report = fluctuations.moderate_deviation_check(values, [-1.0, -0.5, 0.5, 1.0])
    assert report.quadratic_coefficient == pytest.approx(0.5, abs=0.1)
    assert report.linear_coefficient == pytest.approx(0.0, abs=0.1)
    assert report.convex
    assert report.tail_bound_holds
    assert len(report.estimates) == 4


def test_moderate_deviation_constant_uses_magnitudes(rng):
    values = rng.normal(-3.0, 0.5, size=4000)
    report = fluctuations.moderate_deviation_check(values, [0.5, 1.0])
    assert all(e.value < 0 for e in report.estimates)
    expected = max(abs(e.value) / (e.tau ** 2 + abs(e.tau)) for e in report.estimates)
    assert report.bound_constant == pytest.approx(expected)
    assert report.bound_constant > 1.0


def test_laplace_identity(circular_law, bump_center):
    beta = 2.0
    tm = t_max(circular_law, bump_center, beta)
    X = Configuration(SPREAD)
    result = fluctuations.laplace_identity_check(X, bump_center, circular_law, 0.5 * tm, beta)
    assert result["relative_residual"] <= 5e-2
    with pytest.raises(AssumptionViolation):
        fluctuations.laplace_identity_check(X, bump_center, circular_law, 2 * tm, beta)


def test_random_potential_pairs_to_the_fluctuation(circular_law, bump_center, ginibre16):
    gff = fluctuations.gff_field(ginibre16, circular_law)
    paired = fluctuations.gff_pairing(gff, bump_center)
    assert paired == pytest.approx(fluctuations.fluct(ginibre16, bump_center, circular_law), abs=5e-2)
    empty = fluctuations.gff_field(Configuration(np.zeros((0, 2))), circular_law)
    assert np.all(empty.values == 0)


def dirichlet_pairing(field: ScalarField2D, xi) -> float:
    Xg, Yg = field.grid.mesh()
    gx, gy = xi.grad(Xg, Yg)
    grad = field.gradient()
    return float(np.sum(gx * grad.x + gy * grad.y) * field.grid.cell_area)


def test_pairing_matches_dirichlet_form_for_smooth_fields(grid128, bump_center):
    field = ScalarField2D.from_function(grid128, lambda x, y: np.exp(-(x - 0.2) ** 2 - 2 * y ** 2) * np.cos(x + y))
    paired = fluctuations.gff_pairing(field, bump_center)
    assert paired == pytest.approx(dirichlet_pairing(field, bump_center), rel=1e-3, abs=1e-8)


def test_pairing_matches_dirichlet_form_for_the_random_potential(circular_law, bump_center, ginibre16):
    gff = fluctuations.gff_field(ginibre16, circular_law)
    assert fluctuations.gff_pairing(gff, bump_center) == pytest.approx(dirichlet_pairing(gff, bump_center), abs=0.15)
