"""
Experiment runners behind the command line.

Each named experiment composes the service modules, writes its CSV/JSON
artifacts into the run directory and returns judged checks. The CLI turns
the outcome into manifest.json and metrics.json.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.core.exceptions import ConfigurationError
from app.core.logging import get_logger
from app.core.utils import create_dir_if_not_exists, spawn_rng, write_json
from app.models.fields import Grid2D
from app.models.functions import Potential, TestFunction
from app.models.points import Configuration
from app.models.schemas import (
    CheckKind,
    CheckResult,
    ExperimentConfig,
    ExperimentKind,
    FluctuationCase,
    SamplerSource,
)
from app.services import energy, fluctuations, library, sampler, transport
from app.services.equilibrium import (
    EquilibriumData,
    radial_support_radius,
    save_equilibrium,
    solve_equilibrium,
    t_max,
    verify_euler_lagrange,
)
from app.services.fluctuations import FluctuationBatch

logger = get_logger("experiments")

# coarse/fine residual ratio required when the grid spacing halves (first order)
REFINEMENT_RATIO = 1.8
LOWER_BOUND_CONSTANT_MAX = 10.0
BOUNDARY_DISPLACEMENT_T = 0.02
BOUNDARY_DISPLACEMENT_TOL = 0.2
MINIMIZER_SEEDS = 2


@dataclass
class ExperimentOutcome:
    checks: List[CheckResult] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    files: Dict[str, Path] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class ExperimentService:
    """Runs one configured experiment into an output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, threads: Optional[int] = None):
        self.config = config
        self.out_dir = create_dir_if_not_exists(out_dir)
        self.threads = threads or config.threads
        self.outcome = ExperimentOutcome()
        self._runners: Dict[ExperimentKind, Callable[[], None]] = {
            ExperimentKind.IDENTITY_SUITE: self.run_identity_suite,
            ExperimentKind.EQUILIBRIUM_ORACLE: self.run_equilibrium_oracle,
            ExperimentKind.SAMPLER_CROSSVAL: self.run_sampler_crossval,
            ExperimentKind.CLT_VERIFY: self.run_clt_verify,
            ExperimentKind.CLT_MEAN: self.run_clt_mean,
            ExperimentKind.RIDER_VIRAG: self.run_rider_virag,
            ExperimentKind.MESO_VERIFY: self.run_meso_verify,
            ExperimentKind.BETA_SWEEP: self.run_beta_sweep,
            ExperimentKind.MINIMIZE: self.run_minimize,
            ExperimentKind.TRANSPORT_CHECK: self.run_transport_check,
            ExperimentKind.MODDEV: self.run_moddev,
        }

    def run(self) -> ExperimentOutcome:
        kind = self.config.kind
        logger.info(f"Running experiment '{kind.value}' (seed {self.config.seed}) into {self.out_dir}")
        self._runners[kind]()
        failed = [c.name for c in self.outcome.checks if not c.passed]
        if failed:
            logger.warning(f"Experiment '{kind.value}': {len(failed)} check(s) failed: {', '.join(failed)}")
        else:
            logger.info(f"Experiment '{kind.value}': all {len(self.outcome.checks)} checks passed")
        return self.outcome

    # ------------------------------------------------------------------
    # shared inputs
    # ------------------------------------------------------------------
    @cached_property
    def potential(self) -> Potential:
        spec = self.config.potential
        if spec.coefficients is not None:
            return library.polynomial(spec.coefficients)
        return library.get_potential(spec.name, spec.params)

    @cached_property
    def test_functions(self) -> List[TestFunction]:
        return [
            library.get_test_function(s.name, s.center, s.scale, s.amplitude, s.params or None)
            for s in self.config.test_functions
        ]

    @cached_property
    def grid(self) -> Grid2D:
        g = self.config.grid
        return Grid2D.centered(g.half_width, g.n, g.center)

    @cached_property
    def equilibrium(self) -> EquilibriumData:
        eq = solve_equilibrium(self.potential, self.grid)
        if self.config.save_fields:
            self.outcome.files.update({f"equilibrium/{k}": p for k, p in
                                       save_equilibrium(eq, self.out_dir / "fields" / "equilibrium").items()})
        return eq

    @property
    def beta(self) -> float:
        return self.config.sampler.beta

    def n_values(self, default: Sequence[int]) -> List[int]:
        return list(self.config.n_values) or list(default)

    def derived_seed(self, *labels) -> int:
        return int(spawn_rng(self.config.seed, *labels).integers(0, 2 ** 63))

    def pick(self, case: FluctuationCase) -> TestFunction:
        for xi in self.test_functions:
            if fluctuations.classify(xi, self.equilibrium) == case:
                return xi
        raise ConfigurationError(f"Experiment needs a test function of the {case.value} case",
                                 context={"test_functions": [x.name for x in self.test_functions]})

    def _ginibre_allowed(self, beta: float) -> bool:
        V = self.potential
        return beta == 2.0 and V.name == "quadratic" and float(V.params.get("a", 1.0)) == 1.0

    def samples(self, N: int, beta: float, label: str, n_samples: Optional[int] = None,
                source: Optional[SamplerSource] = None) -> List[Configuration]:
        """Configurations from exact Ginibre sampling or from MCMC chains."""
        n = n_samples or self.config.sampler.n_samples
        source = source or self.config.source
        seed = self.derived_seed(label, N, str(beta))
        if source == SamplerSource.GINIBRE:
            if not self._ginibre_allowed(beta):
                raise ConfigurationError("Ginibre sampling is exact only for V = |x|^2 at beta = 2",
                                         context={"potential": self.potential.name, "beta": beta})
            return sampler.ginibre_batch(N, n, seed, self.threads)
        chains = max(1, self.threads)
        per_chain = int(np.ceil(n / chains))
        cfg = self.config.sampler.model_copy(update={"N": N, "beta": beta, "seed": seed, "n_samples": per_chain})
        results = sampler.run_chains(cfg, self.potential, chains, self.threads, self.equilibrium)
        self.outcome.metrics.setdefault("chains", {})[f"{label}_N{N}_beta{beta:g}"] = [r.stats for r in results]
        if self.config.save_fields:
            self._record(sampler.save_chain(results, self.out_dir / "samples" / f"{label}_N{N}_beta{beta:g}.bin", cfg),
                         prefix=f"samples/{label}_N{N}_beta{beta:g}")
        return [c for r in results for c in r.samples][:n]

    def batch(self, xi: TestFunction, samples: List[Configuration], name: str, **meta) -> FluctuationBatch:
        b = FluctuationBatch.from_samples(samples, xi, self.equilibrium, **meta)
        self._record(b.save(self.out_dir / f"{name}.csv"), prefix=name)
        return b

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    def _record(self, files: Dict[str, Path], prefix: str) -> None:
        for key, path in files.items():
            self.outcome.files[f"{prefix}/{key}"] = Path(path)

    def check(
        self,
        name: str,
        value: float,
        passed: bool,
        tolerance: Optional[float] = None,
        se: Optional[float] = None,
        kind: CheckKind = CheckKind.NUMERIC,
        detail: str = "",
    ) -> CheckResult:
        value = float(value) if value is not None and np.isfinite(value) else float("nan")
        result = CheckResult(name=name, value=value, tolerance=tolerance, se=se, kind=kind,
                             passed=bool(passed), detail=detail)
        self.outcome.checks.append(result)
        logger.info(f"check {name}: {value:.6g} {'PASS' if passed else 'FAIL'}")
        return result

    def write_table(self, name: str, rows: List[Dict[str, Any]]) -> Path:
        path = self.out_dir / f"{name}.csv"
        pd.DataFrame(rows).to_csv(path, index=False, float_format="%.12g")
        self.outcome.files[name] = path
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        path = write_json(self.out_dir / f"{name}.json", payload)
        self.outcome.files[name] = path
        return path

    def _refinement(self, name: str, coarse: float, fine: float, floor: float) -> CheckResult:
        """Coarse over fine residual; halving the grid spacing must roughly halve the residual."""
        ratio = coarse / fine if fine > 0 else float("inf")
        self.outcome.metrics[f"{name}_refinement_ratio"] = ratio
        return self.check(f"{name}_refinement", ratio, ratio >= REFINEMENT_RATIO or fine <= floor,
                          tolerance=REFINEMENT_RATIO, kind=CheckKind.ORDER,
                          detail="coarse over fine residual" if fine > floor else "fine residual at floor")

    # ------------------------------------------------------------------
    # runners
    # ------------------------------------------------------------------
    def run_identity_suite(self) -> None:
        eq = self.equilibrium
        el = verify_euler_lagrange(eq, h_mu0=eq.h_mu0)
        self.check("euler_lagrange", max(el.min_zeta, el.max_abs_zeta_on_support, el.constancy_defect),
                   el.passed, tolerance=el.tolerance)

        for eta in (1e-3, 1e-2, 0.1, 1.0):
            s = energy.smearing_integral(eta)
            self.check(f"smearing_constant_eta{eta:g}", s["error"], s["error"] <= 1e-9, tolerance=1e-9)

        coarse_grid = Grid2D.centered(self.config.grid.half_width, max(8, self.config.grid.n // 2),
                                      self.config.grid.center)
        coarse = solve_equilibrium(self.potential, coarse_grid)
        rows = []
        for N in self.n_values([16]):
            configs = self.samples(N, self.beta, "identity", n_samples=self.config.n_configurations)
            X = configs[0]
            fine_res = energy.splitting_residual(X, eq)
            coarse_res = energy.splitting_residual(X, coarse)
            self.check(f"splitting_N{N}", fine_res, fine_res <= 1e-2 * N, tolerance=1e-2 * N)
            self._refinement(f"splitting_N{N}", coarse_res, fine_res, floor=1e-8)

            identity = energy.truncated_energy_identity(X, eq.mu0)
            self.check(f"truncated_identity_N{N}", identity["relative_residual"],
                       identity["relative_residual"] <= 5e-2, tolerance=5e-2)
            coarse_identity = energy.truncated_energy_identity(X, coarse.mu0)
            self._refinement(f"truncated_identity_N{N}", coarse_identity["relative_residual"],
                             identity["relative_residual"], floor=1e-6)

            within = 0
            for k, Y in enumerate(configs):
                report = identity if k == 0 else energy.truncated_energy_identity(Y, eq.mu0)
                within += int(report["within_bounds"])
                rows.append({"N": N, "sample": k, "gap": report["gap"], "lower": report["lower_bound"],
                             "upper": report["upper_bound"], "within": report["within_bounds"]})
            self.check(f"sandwich_bounds_N{N}", within / len(configs), within == len(configs),
                       kind=CheckKind.BOUND, detail=f"{within}/{len(configs)} configurations")

            lb = energy.fn_lower_bound_constant(configs, eq.mu0)
            self.outcome.metrics[f"fn_lower_bound_constant_N{N}"] = lb["C"]
            self.check(f"fn_lower_bound_constant_N{N}", lb["C"], lb["C"] < LOWER_BOUND_CONSTANT_MAX,
                       tolerance=LOWER_BOUND_CONSTANT_MAX, kind=CheckKind.BOUND,
                       detail=f"max over {lb['samples']} configurations")
        self.write_table("sandwich", rows)

    def run_equilibrium_oracle(self) -> None:
        V = self.potential
        if V.name != "quadratic":
            raise ConfigurationError("equilibrium-oracle compares against the circular law (quadratic potential)")
        a = float(V.params.get("a", 1.0))
        eq = self.equilibrium
        h = self.grid.spacing
        R = radial_support_radius(V)
        radius = eq.support_radius()
        self.check("support_radius", abs(radius - R), abs(radius - R) <= h, tolerance=h)
        core = eq.core_mask
        density_err = float(np.max(np.abs(eq.mu0.values[core] - a / np.pi))) / (a / np.pi)
        self.check("density", density_err, density_err <= 1e-3, tolerance=1e-3)
        c0 = 0.5 + 0.5 * np.log(a)
        self.check("c0", abs(eq.c0 - c0), abs(eq.c0 - c0) <= 1e-3, tolerance=1e-3)
        el = verify_euler_lagrange(eq, tol=1e-3, h_mu0=eq.h_mu0)
        self.check("euler_lagrange", max(el.min_zeta, el.max_abs_zeta_on_support, el.constancy_defect),
                   el.passed, tolerance=1e-3)
        self.outcome.metrics["equilibrium"] = eq.summary()

    def run_sampler_crossval(self) -> None:
        xi = self.test_functions[0]
        for N in self.n_values([64]):
            mcmc = self.batch(xi, self.samples(N, self.beta, "mcmc", source=SamplerSource.MCMC),
                              f"fluct_mcmc_N{N}", source="mcmc", N=N)
            exact = self.batch(xi, self.samples(N, self.beta, "ginibre", source=SamplerSource.GINIBRE),
                               f"fluct_ginibre_N{N}", source="ginibre", N=N)
            se = float(np.hypot(mcmc.mean_se, exact.mean_se))
            diff = mcmc.mean - exact.mean
            self.check(f"mean_agreement_N{N}", diff, abs(diff) <= 3 * se, se=se, kind=CheckKind.STATISTICAL)
            se_var = float(np.hypot(mcmc.variance_se, exact.variance_se))
            dvar = mcmc.variance - exact.variance
            self.check(f"variance_agreement_N{N}", dvar, abs(dvar) <= 3 * se_var, se=se_var,
                       kind=CheckKind.STATISTICAL)

    def _clt(self, xi: TestFunction, N: int, label: str):
        eq = self.equilibrium
        pred = fluctuations.predict(xi, eq, self.beta)
        b = self.batch(xi, self.samples(N, self.beta, label), f"fluct_{label}_{xi.name}_N{N}",
                       N=N, beta=self.beta, case=pred.case.value)
        return pred, b

    def run_clt_verify(self) -> None:
        xi = self.pick(FluctuationCase.INTERIOR)
        for N in self.n_values([256]):
            pred, b = self._clt(xi, N, "clt")
            ratio = b.variance / pred.variance
            self.check(f"variance_ratio_N{N}", ratio, abs(ratio - 1) <= 0.10, tolerance=0.10,
                       se=b.variance_se / pred.variance, kind=CheckKind.STATISTICAL)
            report = fluctuations.gaussianity_test(b, pred)
            self.check(f"ks_pvalue_N{N}", report.p_value, report.passed, tolerance=report.alpha,
                       kind=CheckKind.STATISTICAL)
            self.write_json(f"gaussianity_N{N}", report)
            cdf = fluctuations.empirical_cdf(b, pred)
            path = self.out_dir / f"cdf_N{N}.csv"
            cdf.to_csv(path, index=False, float_format="%.12g")
            self.outcome.files[f"cdf_N{N}"] = path

    def run_clt_mean(self) -> None:
        xi = self.pick(FluctuationCase.BOUNDARY)
        compat = fluctuations.check_compatibility(xi, self.equilibrium)
        self.outcome.metrics["compatibility"] = compat
        for N in self.n_values([256]):
            pred, b = self._clt(xi, N, "clt_mean")
            diff = b.mean - pred.mean
            self.check(f"boundary_mean_N{N}", diff, abs(diff) <= 3 * b.mean_se, se=b.mean_se,
                       kind=CheckKind.STATISTICAL, detail=f"predicted {pred.mean:.6g}")
            self.outcome.metrics[f"variance_ratio_N{N}"] = b.variance / pred.variance if pred.variance else None

    def run_rider_virag(self) -> None:
        eq = self.equilibrium
        rows = []
        for name in library.LIBRARY_NAMES:
            xi = library.get_test_function(name)
            ours = fluctuations.predicted_variance(xi, eq, 2.0)
            rv = fluctuations.rider_virag_variance(xi)
            rel = abs(ours - rv) / max(abs(rv), 1e-300)
            rows.append({"test_function": name, "variance": ours, "rider_virag": rv, "relative_difference": rel})
            self.check(f"rider_virag_{name}", rel, rel <= 1e-2, tolerance=1e-2)
        self.write_table("rider_virag", rows)

    def run_meso_verify(self) -> None:
        spec = self.config.test_functions[0]
        rows = []
        for N in self.n_values([64, 256]):
            scale = N ** -0.25
            xi = library.mesoscopic_template(spec.center or (0.0, 0.0), scale) * spec.amplitude
            pred, b = self._clt(xi, N, "meso")
            self.check(f"meso_mean_N{N}", b.mean, abs(b.mean) <= 3 * b.mean_se, se=b.mean_se,
                       kind=CheckKind.STATISTICAL)
            ratio = b.variance / pred.variance
            self.check(f"meso_variance_ratio_N{N}", ratio, abs(ratio - 1) <= 0.15, tolerance=0.15,
                       se=b.variance_se / pred.variance, kind=CheckKind.STATISTICAL)
            rows.append({"N": N, "scale": scale, "mean": b.mean, "mean_se": b.mean_se,
                         "variance": b.variance, "predicted_variance": pred.variance})
        self.write_table("mesoscopic", rows)

    def run_beta_sweep(self) -> None:
        betas = list(self.config.betas) or [1.0, 2.0, 4.0]
        N = self.n_values([128])[0]
        interior = self.pick(FluctuationCase.INTERIOR)
        boundary = next((x for x in self.test_functions
                         if fluctuations.classify(x, self.equilibrium) == FluctuationCase.BOUNDARY), None)
        scaled, rows = {}, []
        for beta in betas:
            configs = self.samples(N, beta, "beta_sweep", source=SamplerSource.MCMC)
            b = self.batch(interior, configs, f"fluct_beta{beta:g}_{interior.name}", N=N, beta=beta)
            scaled[beta] = b.variance * beta
            rows.append({"beta": beta, "variance": b.variance, "variance_times_beta": b.variance * beta,
                         "mean": b.mean, "mean_se": b.mean_se})
            if boundary is not None and beta == 4.0:
                bb = self.batch(boundary, configs, f"fluct_beta{beta:g}_{boundary.name}", N=N, beta=beta)
                self.check("boundary_mean_beta4", bb.mean, abs(bb.mean) <= 3 * bb.mean_se, se=bb.mean_se,
                           kind=CheckKind.STATISTICAL)
        for i, a in enumerate(betas):
            for c in betas[i + 1:]:
                ratio = scaled[a] / scaled[c]
                self.check(f"variance_scaling_{a:g}_{c:g}", ratio, abs(ratio - 1) <= 0.15, tolerance=0.15,
                           kind=CheckKind.STATISTICAL)
        self.write_table("beta_sweep", rows)

    def run_minimize(self) -> None:
        cfg = self.config.minimizer.model_copy(update={"seed": self.derived_seed("minimize")})
        if self.potential.name == "quadratic" and float(self.potential.params.get("a", 1.0)) == 1.0:
            pair = sampler.minimize_energy(2, self.potential, cfg, threads=self.threads)
            sep = float(np.linalg.norm(pair.config.points[0] - pair.config.points[1]))
            self.check("two_particle_separation", abs(sep - 1.0), abs(sep - 1.0) <= 1e-6, tolerance=1e-6)
        xi = self.pick(FluctuationCase.INTERIOR)
        scale = xi.seminorms()["sup"]
        rows = []
        for N in self.n_values([100]):
            runs = [sampler.minimize_energy(N, self.potential,
                                            cfg.model_copy(update={"seed": self.derived_seed("minimize", N, k)}),
                                            self.equilibrium, self.threads)
                    for k in range(MINIMIZER_SEEDS)]
            energies = [r.energy for r in runs]
            spread = max(energies) - min(energies)
            self.check(f"minimizer_seed_agreement_N{N}", spread, spread <= 1e-4 * N, tolerance=1e-4 * N,
                       detail=f"H_N over {MINIMIZER_SEEDS} seeds")
            result = runs[int(np.argmin(energies))]
            value = fluctuations.fluct(result.config, xi, self.equilibrium)
            self.check(f"minimizer_fluct_N{N}", abs(value), abs(value) <= 0.05 * scale, tolerance=0.05 * scale,
                       kind=CheckKind.BOUND)
            self.check(f"minimizer_confined_N{N}", float(bool(result.confined)), bool(result.confined))
            rows.append({"N": N, "energy": result.energy, "energy_spread": spread, "grad_inf": result.grad_inf,
                         "converged": result.converged, "fluct": value})
            pd.DataFrame(result.config.points, columns=["x", "y"]).to_csv(self.out_dir / f"minimizer_N{N}.csv",
                                                                          index=False, float_format="%.17g")
            self.outcome.files[f"minimizer_N{N}"] = self.out_dir / f"minimizer_N{N}.csv"
        self.write_table("minimizer", rows)

    def run_transport_check(self) -> None:
        eq = self.equilibrium
        beta = self.beta
        xi = self.pick(FluctuationCase.INTERIOR)
        tm = transport.build_psi_interior(xi, eq)
        self.outcome.metrics["psi"] = tm.summary()
        if self.config.save_fields:
            self._record(tm.save(self.out_dir / "fields" / "psi", beta), prefix="fields/psi")

        N = self.n_values([32])[0]
        X = self.samples(N, beta, "transport", n_samples=1)[0]
        mu = eq.mu0
        s_values = list(self.config.s_values)

        # algebraic properties of the anisotropy
        ani = transport.anisotropy(tm, X, mu, s_values[len(s_values) // 2])
        self.check("anisotropy_trace_free", ani.trace_defect, ani.trace_defect <= 1e-12, tolerance=1e-12)
        other = transport.TransportMap.from_function(eq.grid, lambda x, y: (np.sin(y) * x, 0.5 * x * y))
        a, b = 0.7, -1.3
        combined = transport.TransportMap.from_field(tm.psi.scaled(a) + other.psi.scaled(b))
        s = ani.s
        lhs = transport.anisotropy(combined, X, mu, s).value
        rhs = a * ani.value + b * transport.anisotropy(other, X, mu, s).value
        lin = abs(lhs - rhs) / max(1.0, abs(lhs))
        self.check("anisotropy_linear", lin, lin <= 1e-10, tolerance=1e-10)
        self.outcome.metrics["anisotropy_sweep"] = transport.anisotropy_sweep(tm, X, mu, s_values, tm.region)

        # push-forward and the approximate family
        tt = tm.ttilde_max(beta)
        fam = transport.approximate_family(tm, eq, 0.5 * tt, beta)
        self.check("pushforward_mass", fam.mass_defect, fam.mass_defect <= 1e-6, tolerance=1e-6)
        t0 = min(tt, 0.9 * (t_max(eq, xi, beta) or tt))
        orders = transport.approximation_orders(tm, eq, xi, beta, [t0 / 2, t0 / 4, t0 / 8])
        self.write_json("approximation_orders", orders)
        mu_order = min((o for o in orders["mu_orders"] if o is not None), default=None)
        self.check("mu_tilde_order", mu_order if mu_order is not None else float("nan"),
                   mu_order is None or mu_order >= 1.8, tolerance=1.8, kind=CheckKind.ORDER,
                   detail="errors at floor" if mu_order is None else "")
        zeta_order = min((o for o in orders["zeta_orders"] if o is not None), default=None)
        self.check("zeta_tilde_order", zeta_order if zeta_order is not None else float("nan"),
                   zeta_order is None or zeta_order >= 1.8, tolerance=1.8, kind=CheckKind.ORDER,
                   detail="errors at floor" if zeta_order is None else "")

        # energy comparison under transport
        ts = list(self.config.t_values) or [1e-2, 5e-3, 2.5e-3]
        study = transport.energy_transport_study(X, mu, tm, beta, ts, s=s)
        self.write_table("energy_transport", study["rows"])
        order = study["order"]
        self.check("energy_transport_order", order if order is not None else float("nan"),
                   order is None or order >= 1.8, tolerance=1.8, kind=CheckKind.ORDER)
        self.outcome.metrics["energy_transport_linear_coefficient"] = study["linear_coefficient"]

        # transported field compatibility
        step = ts[0] / beta
        eta = energy.nn_truncation(X)
        E = transport.transported_field((X, mu, eta), tm, step)
        div = transport.transported_divergence_check(E, X, mu, eta, tm, step)
        self.check("transported_divergence", div["max_relative_error"], div["max_relative_error"] <= 2e-2,
                   tolerance=2e-2)

        boundary = next((x for x in self.test_functions
                         if fluctuations.classify(x, eq) == FluctuationCase.BOUNDARY), None)
        if boundary is not None:
            tb = transport.build_psi_boundary(boundary, eq)
            self.outcome.metrics["psi_boundary"] = tb.summary()
            shift = transport.boundary_displacement_check(boundary, eq, BOUNDARY_DISPLACEMENT_T, beta)
            self.write_json("boundary_displacement", shift)
            self.check("boundary_displacement", shift["relative_error"],
                       shift["relative_error"] <= BOUNDARY_DISPLACEMENT_TOL, tolerance=BOUNDARY_DISPLACEMENT_TOL,
                       detail=f"first moment of mu_t - mu0 at t = {BOUNDARY_DISPLACEMENT_T:g}")

    def run_moddev(self) -> None:
        xi = self.pick(FluctuationCase.INTERIOR)
        N = self.n_values([128])[0]
        b = self.batch(xi, self.samples(N, self.beta, "moddev"), f"fluct_moddev_N{N}", N=N)
        report = fluctuations.moderate_deviation_check(b, self.config.tau_values)
        self.write_json("moderate_deviations", report)
        self.check("laplace_convex", float(report.convex), report.convex, kind=CheckKind.BOUND)
        reliable = [e for e in report.estimates if e.reliable]
        c = report.bound_constant
        worst = max((abs(e.value) - c * (e.tau ** 2 + abs(e.tau)) - 3 * e.se for e in reliable), default=0.0)
        self.check("laplace_bound", c, worst <= 0, kind=CheckKind.BOUND,
                   detail=f"{len(reliable)} reliable tau values")
        self.check("tail_bound", float(report.tail_bound_holds), report.tail_bound_holds, kind=CheckKind.BOUND)


def run_experiment(config: ExperimentConfig, out_dir: Path, threads: Optional[int] = None) -> ExperimentOutcome:
    return ExperimentService(config, out_dir, threads).run()
