"""Experiment runners on small grids: check names, artifacts and config errors."""

import json

import pytest

from app.core.exceptions import ConfigurationError
from app.models.schemas import CheckKind, ExperimentConfig
from app.services import library
from app.services.experiments import run_experiment


def make_config(kind: str, n: int = 64, **extra) -> ExperimentConfig:
    raw = {"kind": kind, "seed": 11, "threads": 1, "grid": {"n": n, "half_width": 1.5}}
    raw.update(extra)
    return ExperimentConfig.model_validate(raw)


def test_equilibrium_oracle_writes_checks(tmp_path):
    outcome = run_experiment(make_config("equilibrium-oracle", n=32), tmp_path)
    names = {c.name for c in outcome.checks}
    assert names == {"support_radius", "density", "c0", "euler_lagrange"}
    assert outcome.metrics["equilibrium"]["potential"] == "quadratic"
    assert any(key.startswith("equilibrium/") for key in outcome.files)
    assert all(path.exists() for path in outcome.files.values())


def test_equilibrium_oracle_needs_quadratic(tmp_path):
    config = make_config("equilibrium-oracle", n=32, potential={"name": "quartic"})
    with pytest.raises(ConfigurationError):
        run_experiment(config, tmp_path)


def test_unknown_potential(tmp_path):
    config = make_config("equilibrium-oracle", n=32, potential={"name": "sextic"})
    with pytest.raises(ConfigurationError):
        run_experiment(config, tmp_path)


def test_rider_virag_table(tmp_path):
    outcome = run_experiment(make_config("rider-virag", save_fields=False), tmp_path)
    names = {c.name for c in outcome.checks}
    assert names == {f"rider_virag_{name}" for name in library.LIBRARY_NAMES}
    assert (tmp_path / "rider_virag.csv").exists()


def test_clt_verify_with_ginibre(tmp_path):
    config = make_config("clt-verify", n_values=[16], sampler={"n_samples": 200}, save_fields=False)
    outcome = run_experiment(config, tmp_path)
    names = {c.name for c in outcome.checks}
    assert names == {"variance_ratio_N16", "ks_pvalue_N16"}
    assert all(c.kind == CheckKind.STATISTICAL for c in outcome.checks)
    assert (tmp_path / "cdf_N16.csv").exists()
    report = json.loads((tmp_path / "gaussianity_N16.json").read_text())
    assert report["n"] == 200


def test_ginibre_needs_beta_two(tmp_path):
    config = make_config("clt-verify", n_values=[16], sampler={"beta": 4.0, "n_samples": 200}, save_fields=False)
    with pytest.raises(ConfigurationError):
        run_experiment(config, tmp_path)


def test_missing_boundary_test_function(tmp_path):
    config = make_config("clt-mean", n_values=[16], save_fields=False)
    with pytest.raises(ConfigurationError, match="boundary"):
        run_experiment(config, tmp_path)


def test_moddev_report(tmp_path):
    config = make_config("moddev", n_values=[16], sampler={"n_samples": 300}, save_fields=False)
    outcome = run_experiment(config, tmp_path)
    assert {c.name for c in outcome.checks} == {"laplace_convex", "laplace_bound", "tail_bound"}
    report = json.loads((tmp_path / "moderate_deviations.json").read_text())
    assert len(report["estimates"]) == len(config.tau_values)


def test_identity_suite_judges_refinement(tmp_path):
    config = make_config("identity-suite", n=32, n_values=[8], n_configurations=3, save_fields=False)
    outcome = run_experiment(config, tmp_path)
    names = {c.name for c in outcome.checks}
    assert {"splitting_N8_refinement", "truncated_identity_N8_refinement", "fn_lower_bound_constant_N8"} <= names
    assert "splitting_N8_refinement_ratio" in outcome.metrics
    refinement = next(c for c in outcome.checks if c.name == "splitting_N8_refinement")
    assert refinement.kind == CheckKind.ORDER
