"""
Linear statistics Fluct_N(xi) and their limiting Gaussian law.

The predicted law is

    mean     = (1/2pi) (1/beta - 1/4) int lap(xi) (1_Sigma + (log lap V)^Sigma)
    variance = (1/(2 pi beta)) int |grad xi^Sigma|^2

with xi^Sigma the bounded harmonic continuation of xi off Sigma. Batch
statistics (Laplace transforms, KS tests, moderate deviations) work on
plain arrays of sampled fluctuations.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from app.core.exceptions import AssumptionViolation, DegenerateDataError, ValidationError
from app.core.logging import get_logger
from app.core.utils import read_json, write_json
from app.models.fields import Grid2D, Measure2D, ScalarField2D
from app.models.functions import Regularity, TestFunction, combine
from app.models.points import Configuration
from app.models.schemas import (
    CLTPrediction,
    FluctuationCase,
    GaussianityReport,
    LaplaceEstimate,
    ModerateDeviationReport,
)
from app.services import field_grid
from app.services.energy import next_order_energy
from app.services.equilibrium import EquilibriumData, is_interior, perturbed_equilibrium, t_max

logger = get_logger("fluctuations")

MIN_ESS = 30
MIN_KS_BATCH = 200


# ---------------------------------------------------------------------------
# Fluctuations of sampled configurations
# ---------------------------------------------------------------------------

def fluct(X: Configuration, xi: TestFunction, eq: Union[EquilibriumData, Measure2D]) -> float:
    """sum_i xi(x_i) - N int xi dmu0."""
    mu = eq.mu0 if isinstance(eq, EquilibriumData) else eq
    Xg, Yg = mu.grid.mesh()
    points = float(np.sum(xi(X.x, X.y))) if X.N else 0.0
    return points - X.N * mu.integrate(xi(Xg, Yg))


@dataclass
class FluctuationBatch:
    """Fluct_N(xi) over a batch of configurations with provenance."""
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(self.values)):
            raise DegenerateDataError("Fluctuation batch contains non-finite values")

    @classmethod
    def from_samples(cls, samples: Iterable[Configuration], xi: TestFunction, eq: EquilibriumData,
                     **meta) -> "FluctuationBatch":
        mu = eq.mu0
        Xg, Yg = mu.grid.mesh()
        mean_xi = mu.integrate(xi(Xg, Yg))
        values = [float(np.sum(xi(X.x, X.y))) - X.N * mean_xi for X in samples]
        return cls(np.asarray(values), {"test_function": xi.name, **meta})

    def __len__(self) -> int:
        return int(self.values.size)

    def __neg__(self) -> "FluctuationBatch":
        return FluctuationBatch(-self.values, dict(self.meta))

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def variance(self) -> float:
        return float(np.var(self.values, ddof=1)) if len(self) > 1 else 0.0

    @property
    def mean_se(self) -> float:
        return float(np.sqrt(self.variance / len(self))) if len(self) > 1 else np.inf

    @property
    def variance_se(self) -> float:
        """Standard error of the sample variance from the fourth central moment."""
        n = len(self)
        if n < 4:
            return np.inf
        c = self.values - self.mean
        m4 = float(np.mean(c ** 4))
        return float(np.sqrt(max(m4 - self.variance ** 2 * (n - 3) / (n - 1), 0.0) / n))

    def save(self, path: Union[str, Path]) -> Dict[str, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"fluct": self.values}).to_csv(path, index=False, float_format="%.17g")
        sidecar = write_json(path.with_suffix(".json"), self.meta)
        return {"values": path, "meta": sidecar}

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FluctuationBatch":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        meta = read_json(meta_path) if meta_path.exists() else {}
        return cls(pd.read_csv(path)["fluct"].to_numpy(), meta)


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

def classify(xi: TestFunction, eq: EquilibriumData) -> FluctuationCase:
    if xi.regularity == Regularity.C21_MESOSCOPIC:
        return FluctuationCase.MESOSCOPIC
    return FluctuationCase.INTERIOR if is_interior(xi, eq) else FluctuationCase.BOUNDARY


def check_mesoscopic(xi: TestFunction, eq: EquilibriumData) -> float:
    """Distance from the blow-up centre to the complement of Sigma; must exceed 4 l_N."""
    grid = eq.grid
    dist = field_grid.distance_to_mask(~eq.sigma_mask, grid.spacing)
    ii, jj = grid.cell_index(np.array([xi.support_center]))
    d = float(dist[ii[0], jj[0]])
    if d < 4.0 * xi.scale:
        raise AssumptionViolation(
            "Mesoscopic blow-up centre is closer than 4 l_N to the edge of Sigma",
            context={"distance": d, "scale": xi.scale},
        )
    return d


def support_grid(*xis: TestFunction, n: int = 256) -> Grid2D:
    """Square grid covering the supports of the given test functions."""
    lo = np.min([np.array(x.support_center) - x.support_radius for x in xis], axis=0)
    hi = np.max([np.array(x.support_center) + x.support_radius for x in xis], axis=0)
    half = 0.5 * float(np.max(hi - lo)) * 1.02
    return Grid2D.centered(half, n, tuple(0.5 * (lo + hi)))


def gradient_pairing(a: TestFunction, b: TestFunction, n: int = 256) -> float:
    """int grad a . grad b over the plane, midpoint rule on a grid covering both supports."""
    grid = support_grid(a, b, n=n)
    X, Y = grid.mesh()
    ax, ay = a.grad(X, Y)
    bx, by = b.grad(X, Y)
    return float(np.sum(ax * bx + ay * by) * grid.cell_area)


def extension(xi: TestFunction, eq: EquilibriumData, **kwargs) -> field_grid.HarmonicExtension:
    return field_grid.harmonic_extension(xi, eq.sigma_mask, eq.grid, **kwargs)


def _lap_v_on_support(eq: EquilibriumData) -> np.ndarray:
    X, Y = eq.grid.mesh()
    lap = np.asarray(eq.potential.lapV(X, Y), dtype=float) * np.ones(X.shape)
    bad = eq.sigma_mask & (lap <= 0)
    if bad.any():
        raise AssumptionViolation(
            "lap V must be positive on Sigma",
            context={"cells": int(bad.sum()), "min_lap": float(lap[eq.sigma_mask].min())},
        )
    return lap


def predicted_mean(
    xi: TestFunction,
    eq: EquilibriumData,
    beta: float,
    case: Optional[FluctuationCase] = None,
) -> float:
    case = case or classify(xi, eq)
    if case == FluctuationCase.MESOSCOPIC:
        return 0.0
    coefficient = (1.0 / beta - 0.25) / (2.0 * np.pi)
    if coefficient == 0.0:
        return 0.0
    grid = eq.grid
    X, Y = grid.mesh()
    lap_xi = np.asarray(xi.lap(X, Y), dtype=float)
    lap_v = _lap_v_on_support(eq)
    log_lap = np.log(np.where(eq.sigma_mask, lap_v, 1.0))

    if case == FluctuationCase.INTERIOR:
        weight = np.where(eq.sigma_mask, 1.0 + log_lap, 0.0)
        return coefficient * float(np.sum(lap_xi * weight) * grid.cell_area)

    values = log_lap[eq.sigma_mask]
    if np.ptp(values) < 1e-12:
        log_ext = np.full(grid.shape, float(values.mean()))
    else:
        def log_lap_fn(x, y):
            lap = np.asarray(eq.potential.lapV(x, y), dtype=float) * np.ones(np.shape(x))
            return np.log(np.where(lap > 0, lap, 1.0))

        log_ext = extension(log_lap_fn, eq).field.values
    weight = eq.sigma_mask.astype(float) + log_ext
    return coefficient * float(np.sum(lap_xi * weight) * grid.cell_area)


def extension_energy(xi: TestFunction, eq: EquilibriumData) -> float:
    """int |grad xi^Sigma|^2 over the plane from the composite extension grid."""
    return extension(xi, eq).composite_energy()


def predicted_variance(
    xi: TestFunction,
    eq: EquilibriumData,
    beta: float,
    case: Optional[FluctuationCase] = None,
) -> float:
    case = case or classify(xi, eq)
    if case == FluctuationCase.BOUNDARY:
        energy = extension_energy(xi, eq)
    else:
        energy = gradient_pairing(xi, xi)
    return max(energy, 0.0) / (2.0 * np.pi * beta)


def predicted_covariance(a: TestFunction, b: TestFunction, eq: EquilibriumData, beta: float) -> float:
    """(1/(2 pi beta)) int grad a^Sigma . grad b^Sigma; polarisation when an extension is needed."""
    if a is b:
        return predicted_variance(a, eq, beta)
    if classify(a, eq) != FluctuationCase.BOUNDARY and classify(b, eq) != FluctuationCase.BOUNDARY:
        return gradient_pairing(a, b) / (2.0 * np.pi * beta)
    plus = extension_energy(combine(a, 1.0, b, 1.0), eq)
    minus = extension_energy(combine(a, 1.0, b, -1.0), eq)
    return 0.25 * (plus - minus) / (2.0 * np.pi * beta)


def predict(xi: TestFunction, eq: EquilibriumData, beta: float) -> CLTPrediction:
    case = classify(xi, eq)
    if case == FluctuationCase.MESOSCOPIC:
        check_mesoscopic(xi, eq)
    return CLTPrediction(
        mean=predicted_mean(xi, eq, beta, case),
        variance=predicted_variance(xi, eq, beta, case),
        case=case,
    )


def check_compatibility(xi: TestFunction, eq: EquilibriumData, tol: float = 5e-2) -> Dict[str, Any]:
    """Outward flux of xi^Sigma through each connected component of the support."""
    ext = extension(xi, eq)
    fluxes = field_grid.component_fluxes(ext.field, eq.sigma_mask)
    scale = max(1.0, float(np.max(np.abs(ext.field.values))))
    flagged = [int(k) for k in np.flatnonzero(np.abs(fluxes) > tol * scale)]
    if flagged and fluxes.size > 1:
        logger.warning(f"{xi.name}: compatibility fails on components {flagged}; no CLT for this xi")
    return {"fluxes": fluxes.tolist(), "components": int(fluxes.size), "flagged": flagged,
            "compatible": not flagged}


def rider_virag_variance(xi: TestFunction, n_circle: int = 1024, n_radial: int = 128, n_angular: int = 256) -> float:
    """(1/4pi) int_disk |grad xi|^2 + (1/2) sum_k |k| |xi_k|^2 with circle Fourier coefficients."""
    nodes, weights = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * (nodes + 1.0)
    wr = 0.5 * weights
    theta = 2.0 * np.pi * np.arange(n_angular) / n_angular
    R, T = np.meshgrid(r, theta, indexing="ij")
    gx, gy = xi.grad(R * np.cos(T), R * np.sin(T))
    disk = float(np.sum((gx * gx + gy * gy) * (wr * r)[:, None]) * 2.0 * np.pi / n_angular)

    phi = 2.0 * np.pi * np.arange(n_circle) / n_circle
    coeffs = np.fft.fft(xi(np.cos(phi), np.sin(phi))) / n_circle
    k = np.abs(np.fft.fftfreq(n_circle, d=1.0 / n_circle))
    return disk / (4.0 * np.pi) + 0.5 * float(np.sum(k * np.abs(coeffs) ** 2))


# ---------------------------------------------------------------------------
# Laplace transforms
# ---------------------------------------------------------------------------

def _values(batch: Union[FluctuationBatch, np.ndarray, Sequence[float]]) -> np.ndarray:
    values = batch.values if isinstance(batch, FluctuationBatch) else np.asarray(batch, dtype=float)
    if values.size == 0:
        raise ValidationError("Empty fluctuation batch")
    return values


def estimate_laplace(batch, tau: float) -> LaplaceEstimate:
    """log of the sample mean of exp(tau F) with a leave-one-out jackknife SE."""
    values = _values(batch)
    n = values.size
    a = tau * values
    m = float(np.max(a))
    w = np.exp(a - m)
    total = float(np.sum(w))
    value = m + float(np.log(total / n))
    ess = total * total / float(np.sum(w * w))
    se = np.inf
    if n > 1:
        rest = np.maximum(total - w, np.finfo(float).tiny)
        loo = m + np.log(rest / (n - 1))
        se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    reliable = ess >= MIN_ESS
    if not reliable:
        logger.warning(f"Laplace estimate at tau={tau:g}: effective sample size {ess:.1f} < {MIN_ESS}")
    return LaplaceEstimate(tau=float(tau), value=value, se=se, ess=ess, reliable=reliable)


def joint_covariance(batch_a, batch_b) -> Tuple[float, float]:
    """Sample covariance of paired fluctuations and its standard error."""
    a, b = _values(batch_a), _values(batch_b)
    if a.size != b.size:
        raise ValidationError("Paired batches must have equal length")
    n = a.size
    if n < 3:
        raise DegenerateDataError("Need at least three pairs for a covariance")
    prod = (a - a.mean()) * (b - b.mean())
    cov = float(np.sum(prod) / (n - 1))
    se = float(np.std(prod, ddof=1) / np.sqrt(n))
    return cov, se


def laplace_identity_check(
    X: Configuration,
    xi: TestFunction,
    eq: EquilibriumData,
    t: float,
    beta: float,
) -> Dict[str, float]:
    """Both sides of the interior energy relation behind the Laplace transform.

    With mu_t = mu0 - t lap(xi) / (2 pi beta):
    (2 N t / beta) Fluct = F_N(X, mu0) - F_N(X, mu_t) + (N^2 t^2 / (2 pi beta^2)) int |grad xi|^2.
    """
    tm = t_max(eq, xi, beta)
    if tm is None:
        raise AssumptionViolation("Laplace identity check needs xi supported inside Sigma")
    if abs(t) > tm:
        raise AssumptionViolation("|t| exceeds t_max", context={"t": t, "t_max": tm})
    pert = perturbed_equilibrium(eq, xi, t, beta)
    N = X.N
    lhs = 2.0 * N * t / beta * fluct(X, xi, eq)
    f0 = next_order_energy(X, eq.mu0).FN
    ft = next_order_energy(X, pert.mu_t).FN
    quad = N * N * t * t / (2.0 * np.pi * beta * beta) * gradient_pairing(xi, xi)
    rhs = f0 - ft + quad
    return {"t": t, "lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs),
            "relative_residual": abs(lhs - rhs) / max(1.0, abs(lhs)), "t_max": tm}


# ---------------------------------------------------------------------------
# Distributional tests
# ---------------------------------------------------------------------------

def gaussianity_test(batch, pred: CLTPrediction, alpha: float = 0.01) -> GaussianityReport:
    """KS test against Normal(pred.mean, pred.variance) plus skewness and excess kurtosis."""
    values = _values(batch)
    n = values.size
    if n < MIN_KS_BATCH:
        raise ValidationError(f"Gaussianity test needs at least {MIN_KS_BATCH} values, got {n}")
    if np.ptp(values) == 0:
        raise DegenerateDataError("Fluctuation batch has zero variance")
    if pred.variance <= 0:
        raise DegenerateDataError("Predicted variance is zero; nothing to test against")
    ks = stats.kstest(values, "norm", args=(pred.mean, pred.std))
    report = GaussianityReport(
        n=n,
        ks_statistic=float(ks.statistic),
        p_value=float(ks.pvalue),
        alpha=alpha,
        passed=bool(ks.pvalue >= alpha),
        sample_mean=float(values.mean()),
        sample_variance=float(values.var(ddof=1)),
        skewness=float(stats.skew(values)),
        skewness_se=float(np.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))),
        excess_kurtosis=float(stats.kurtosis(values)),
        kurtosis_se=float(np.sqrt(24.0 / n)),
        prediction=pred,
    )
    logger.info(f"KS D={report.ks_statistic:.4f} p={report.p_value:.3g} (n={n}, case {pred.case.value})")
    return report


def empirical_cdf(batch, pred: CLTPrediction) -> pd.DataFrame:
    """Sorted values with the empirical and predicted Gaussian CDFs."""
    values = np.sort(_values(batch))
    n = values.size
    return pd.DataFrame({
        "value": values,
        "empirical_cdf": np.arange(1, n + 1) / n,
        "gaussian_cdf": stats.norm.cdf(values, loc=pred.mean, scale=pred.std if pred.std > 0 else 1.0),
    })


def _convex(taus: np.ndarray, values: np.ndarray, ses: np.ndarray) -> bool:
    slopes = np.diff(values) / np.diff(taus)
    slack = (ses[:-2] + 2 * ses[1:-1] + ses[2:]) / np.minimum(np.diff(taus)[:-1], np.diff(taus)[1:])
    return bool(np.all(np.diff(slopes) >= -slack - 1e-12))


def moderate_deviation_check(batch, taus: Sequence[float]) -> ModerateDeviationReport:
    """Laplace curve on a tau grid, fitted to c tau^2 + b tau, with tail frequencies.

    The tail bound 2 exp(-a^2 / (4c)) is the Chernoff bound implied by a
    centred log-Laplace curve of curvature c.
    """
    values = _values(batch)
    taus = np.array(sorted(set(float(t) for t in taus) | {0.0}))
    estimates = [estimate_laplace(values, t) for t in taus]
    L = np.array([e.value for e in estimates])
    se = np.array([0.0 if e.tau == 0 else e.se for e in estimates])
    nz = taus != 0
    design = np.column_stack([taus[nz] ** 2, taus[nz]])
    (c, b), *_ = np.linalg.lstsq(design, L[nz], rcond=None)
    bound = float(np.max(np.abs(L[nz]) / (taus[nz] ** 2 + np.abs(taus[nz]))))

    centred = values - values.mean()
    sd = float(np.std(values))
    levels = [k * sd for k in (1.0, 1.5, 2.0, 2.5, 3.0)] if sd > 0 else []
    freqs = [float(np.mean(np.abs(centred) >= a)) for a in levels]
    curvature = max(float(c), 1e-300)
    bounds = [float(min(1.0, 2.0 * np.exp(-a * a / (4.0 * curvature)))) for a in levels]
    n = values.size
    holds = all(f <= bnd + 3.0 * np.sqrt(max(bnd * (1 - bnd), 1.0 / n) / n) for f, bnd in zip(freqs, bounds))

    return ModerateDeviationReport(
        estimates=[e for e in estimates if e.tau != 0],
        quadratic_coefficient=float(c),
        linear_coefficient=float(b),
        bound_constant=bound,
        convex=_convex(taus, L, se),
        tail_levels=levels,
        tail_frequencies=freqs,
        tail_bounds=bounds,
        tail_bound_holds=holds,
    )


# ---------------------------------------------------------------------------
# Random potential
# ---------------------------------------------------------------------------

def gff_field(
    X: Configuration,
    eq: Union[EquilibriumData, Measure2D],
    grid: Optional[Grid2D] = None,
) -> ScalarField2D:
    """(1/2pi)(sum_i -log|x - x_i| - N h^mu0(x)) on ``grid``.

    Cells containing a charge take the exact cell average of the log.
    """
    mu = eq.mu0 if isinstance(eq, EquilibriumData) else eq
    grid = grid or mu.grid
    if isinstance(eq, EquilibriumData) and grid.same_as(eq.grid):
        h = eq.h_mu0
    else:
        h = field_grid.log_potential(mu) if grid.same_as(mu.grid) else field_grid.log_potential(mu, grid)
    if X.N == 0:
        return ScalarField2D(grid, np.zeros(grid.shape))

    Xg, Yg = grid.mesh()
    total = np.zeros(grid.shape)
    hs = grid.spacing
    flagged = 0
    inside = grid.contains(X.points)
    ci, cj = grid.cell_index(X.points)
    for k, (px, py) in enumerate(X.points):
        d = np.hypot(Xg - px, Yg - py)
        contribution = -np.log(np.where(d > 0, d, 1.0))
        if inside[k]:
            i, j = ci[k], cj[k]
            contribution[i, j] = float(field_grid.cell_log_integral(Xg[i, j] - px, Yg[i, j] - py, hs)) / (hs * hs)
            flagged += 1
        total += contribution
    if flagged:
        logger.debug(f"gff field: {flagged} charge cells replaced by cell-averaged logs")
    return ScalarField2D(grid, (total - X.N * h.values) / (2.0 * np.pi))


def gff_pairing(gff: ScalarField2D, xi: TestFunction) -> float:
    """int grad xi . grad gff, evaluated after integrating by parts as -int lap(xi) gff."""
    Xg, Yg = gff.grid.mesh()
    return float(-np.sum(xi.lap(Xg, Yg) * gff.values) * gff.grid.cell_area)
