"""
CoulombGasLab command line.

    main.py run --config cfg.json [--out DIR] [--threads K] [--seed S]
    main.py <experiment-kind> [--config cfg.json] --seed S [...]
    main.py compare RUN_A RUN_B
    main.py health

A run writes manifest.json, metrics.json, config.json and the experiment's
CSV/JSON artifacts; the exit status is 0 iff every check passed.
"""

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from app.core.config import get_settings_dict, settings
from app.core.error_handlers import create_error_response, exit_code_for, with_error_handling
from app.core.exceptions import ConfigurationError, ValidationError
from app.core.health import HealthCheck
from app.core.logging import get_logger
from app.core.utils import config_hash, file_checksum, read_json, write_json
from app.models.schemas import (
    CheckResult,
    CompareReport,
    ExperimentConfig,
    ExperimentKind,
    MetricDiff,
    RunManifest,
)
from app.services.experiments import run_experiment

logger = get_logger("main")

MANIFEST = "manifest.json"
METRICS = "metrics.json"


# ---------------------------------------------------------------------------
# Configuration loading
# ---------------------------------------------------------------------------

def load_config(
    path: Optional[Path],
    kind: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    acceptance: bool = False,
) -> ExperimentConfig:
    """Parse and validate an experiment config, applying command-line overrides.

    ``acceptance`` pins the grid to GRID_SIZE_ACCEPTANCE cells per side.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = read_json(path)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"Config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(
                f"Config {path} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}",
                context={"line": exc.lineno, "column": exc.colno},
            ) from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"Config {path} must be a JSON object")
    if kind is not None:
        if raw.get("kind") not in (None, kind):
            logger.warning(f"Subcommand '{kind}' overrides config kind '{raw['kind']}'")
        raw["kind"] = kind
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    if acceptance:
        grid = raw.get("grid") or {}
        if not isinstance(grid, dict):
            raise ValidationError("Config field 'grid' must be an object", context={"field": "grid"})
        raw["grid"] = {**grid, "n": settings.GRID_SIZE_ACCEPTANCE}
    if "seed" not in raw:
        raise ConfigurationError("A seed is required (config 'seed' or --seed)", context={"field": "seed"})
    return ExperimentConfig.model_validate(raw)


def output_directory(config: ExperimentConfig, out: Optional[Path]) -> Path:
    if out is not None:
        return Path(out)
    if config.output_dir:
        return Path(config.output_dir)
    return Path(settings.OUTPUT_DIR) / f"{config.kind.value}-{config_hash(config)[:12]}"


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _metrics_payload(checks: List[CheckResult], metrics: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "checks": {c.name: c.model_dump(mode="json") for c in checks},
        "metrics": metrics,
    }


@with_error_handling
def run(config: ExperimentConfig, out_dir: Path) -> RunManifest:
    """Execute one experiment and write its manifest."""
    started = datetime.now(timezone.utc)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", config)

    outcome = run_experiment(config, out_dir, config.threads)
    write_json(out_dir / METRICS, _metrics_payload(outcome.checks, outcome.metrics))

    files = {"config": out_dir / "config.json", "metrics": out_dir / METRICS, **outcome.files}
    checksums = {}
    for path in sorted(set(Path(p) for p in files.values())):
        rel = path.relative_to(out_dir) if path.is_relative_to(out_dir) else path
        checksums[str(rel)] = file_checksum(path)

    manifest = RunManifest(
        kind=config.kind,
        config_hash=config_hash(config),
        code_version=settings.APP_VERSION,
        seed=config.seed,
        threads=config.threads,
        started_at=started,
        finished_at=datetime.now(timezone.utc),
        checks=outcome.checks,
        files=checksums,
        environment={**HealthCheck.environment_fingerprint(), "settings": get_settings_dict()},
        passed=outcome.passed,
    )
    write_json(out_dir / MANIFEST, manifest)
    logger.info(f"Run written to {out_dir}: {'PASS' if manifest.passed else 'FAIL'}")
    return manifest


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def load_manifest(run_dir: Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise ConfigurationError(f"No {MANIFEST} in {run_dir}")
    return RunManifest.model_validate(read_json(path))


def _allowance(a: CheckResult, b: CheckResult) -> Optional[float]:
    if a.se is not None and b.se is not None:
        return float(3.0 * np.hypot(a.se, b.se))
    if a.tolerance is not None:
        return float(a.tolerance)
    return None


@with_error_handling
def compare(run_a: Path, run_b: Path) -> CompareReport:
    """Metric differences between two runs of the same experiment kind.

    A regression is a check that passed in A and fails in B, or a metric
    whose difference exceeds the stored allowance (3 combined SEs for
    statistical checks, the tolerance otherwise).
    """
    a, b = load_manifest(run_a), load_manifest(run_b)
    if a.kind != b.kind:
        raise ValidationError("Runs have incompatible experiment kinds",
                              context={"a": a.kind.value, "b": b.kind.value})
    checks_a = {c.name: c for c in a.checks}
    checks_b = {c.name: c for c in b.checks}
    diffs = []
    for name in sorted(set(checks_a) & set(checks_b)):
        ca, cb = checks_a[name], checks_b[name]
        difference = cb.value - ca.value
        allowance = _allowance(ca, cb)
        exceeded = allowance is not None and np.isfinite(difference) and abs(difference) > allowance
        diffs.append(MetricDiff(
            name=name, a=ca.value, b=cb.value, difference=difference, allowance=allowance,
            regression=bool((ca.passed and not cb.passed) or exceeded),
        ))
    return CompareReport(
        kind=a.kind,
        diffs=diffs,
        only_in_a=sorted(set(checks_a) - set(checks_b)),
        only_in_b=sorted(set(checks_b) - set(checks_a)),
        regressions=sum(d.regression for d in diffs),
    )


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_run_flags(parser: argparse.ArgumentParser, config_required: bool) -> None:
    parser.add_argument("--config", type=Path, required=config_required, help="experiment config (JSON)")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    parser.add_argument("--acceptance", action="store_true",
                        help="run at the acceptance grid size (GRID_SIZE_ACCEPTANCE)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coulomb-gas-lab", description=settings.APP_DESCRIPTION)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run the experiment named in the config"), config_required=True)
    for kind in ExperimentKind:
        _add_run_flags(sub.add_parser(kind.value, help=f"run the {kind.value} experiment"), config_required=False)
    cmp = sub.add_parser("compare", help="compare two run directories")
    cmp.add_argument("run_a", type=Path)
    cmp.add_argument("run_b", type=Path)
    cmp.add_argument("--out", type=Path, default=None, help="write the report as JSON here")
    sub.add_parser("health", help="print the environment report")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir: Optional[Path] = None
    try:
        if args.command == "health":
            print(json.dumps(HealthCheck.check_all(), indent=2, default=str))
            return 0
        if args.command == "compare":
            report = compare(args.run_a, args.run_b)
            if args.out is not None:
                write_json(args.out, report)
            print(report.model_dump_json(indent=2))
            return 0 if report.regressions == 0 else 1

        kind = None if args.command == "run" else args.command
        config = load_config(args.config, kind=kind, seed=args.seed, threads=args.threads,
                             acceptance=args.acceptance)
        out_dir = output_directory(config, args.out)
        manifest = run(config, out_dir)
        return 0 if manifest.passed else 1
    except Exception as exc:
        payload = create_error_response(exc)
        logger.error(f"{payload['name']}: {payload['detail']}")
        if out_dir is not None and out_dir.exists():
            write_json(out_dir / "error.json", payload)
        print(json.dumps(payload, indent=2, default=str), file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
