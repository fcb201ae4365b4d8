"""
Equilibrium measure service.

Computes the minimiser mu0 of the logarithmic energy I_V, its support
Sigma, the confinement zeta0 = h^mu0 + V/2 - c0, and the perturbed family
mu_t obtained by replacing V with V_t = V - 2 t xi / beta.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import integrate, optimize

from app.core.config import settings
from app.core.exceptions import (
    AssumptionViolation,
    ConvergenceError,
    SupportViolationError,
    ValidationError,
)
from app.core.logging import get_logger
from app.core.utils import read_json, write_json
from app.models.fields import Grid2D, Measure2D, ScalarField2D
from app.models.functions import Potential, TestFunction
from app.models.schemas import EulerLagrangeReport
from app.services import field_grid
from app.services.library import perturbed_potential, quadratic

logger = get_logger("equilibrium")


@dataclass(frozen=True, eq=False)
class EquilibriumData:
    potential: Potential
    mu0: Measure2D
    sigma_mask: np.ndarray
    zeta0: ScalarField2D
    c0: float
    IV: float
    h_mu0: ScalarField2D
    coincidence_mask: Optional[np.ndarray] = None
    residuals: Optional[EulerLagrangeReport] = None
    iterations: int = 0
    method: str = "mask"

    @property
    def grid(self) -> Grid2D:
        return self.mu0.grid

    @property
    def core_mask(self) -> np.ndarray:
        """Sigma without its boundary cells (the cells holding the full density)."""
        return self.sigma_mask & ~field_grid.boundary_cells(self.sigma_mask)

    def min_density(self) -> float:
        core = self.core_mask
        values = self.mu0.values[core] if core.any() else self.mu0.values[self.sigma_mask]
        return float(values.min())

    def support_radius(self, center: Tuple[float, float] = (0.0, 0.0)) -> float:
        """Largest distance from ``center`` to a Sigma cell centre."""
        X, Y = self.grid.mesh()
        r = np.hypot(X - center[0], Y - center[1])
        return float(r[self.sigma_mask].max())

    def summary(self) -> Dict[str, object]:
        return {
            "potential": self.potential.name,
            "params": self.potential.params,
            "c0": self.c0,
            "IV": self.IV,
            "mass": self.mu0.mass(),
            "support_cells": int(self.sigma_mask.sum()),
            "iterations": self.iterations,
            "method": self.method,
            "grid": self.grid.describe(),
            "residuals": self.residuals.model_dump() if self.residuals else None,
        }


@dataclass(frozen=True, eq=False)
class PerturbedEquilibrium:
    t: float
    beta: float
    mu_t: Measure2D
    zeta_t: ScalarField2D
    is_interior_regime: bool
    c_t: float
    sigma_mask: np.ndarray
    mu_bar_t: ScalarField2D
    potential: Potential
    t_max: Optional[float] = None


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

def _on_grid(V: Potential, grid: Grid2D) -> np.ndarray:
    X, Y = grid.mesh()
    return np.broadcast_to(np.asarray(V.V(X, Y), dtype=float), grid.shape)


def logarithmic_energy(mu: Measure2D, V: Potential) -> float:
    """I_V(mu) = double integral of -log|x - y| plus the integral of V."""
    mass = mu.mass()
    if abs(mass - 1.0) > 1e-3:
        logger.warning(f"logarithmic_energy: measure has mass {mass:.6f}, expected 1")
    return field_grid.log_energy(mu) + mu.integrate(_on_grid(V, mu.grid))


def entropy(mu: Measure2D) -> float:
    """Integral of mu log mu over the support, with 0 log 0 = 0."""
    values = mu.values
    positive = values > 0
    return float(np.sum(values[positive] * np.log(values[positive])) * mu.grid.cell_area)


# ---------------------------------------------------------------------------
# Radial oracle
# ---------------------------------------------------------------------------

def radial_support_radius(V: Potential, r_max: float = 10.0) -> float:
    """R with integral_0^R lapV(r)/(4 pi) 2 pi r dr = 1, for radial V."""
    if not V.is_radial:
        raise ValidationError(f"Potential '{V.name}' has no radial profile")

    def excess(R: float) -> float:
        value, _ = integrate.quad(lambda r: 0.5 * float(V.radial_lap(r)) * r, 0.0, R, limit=200)
        return value - 1.0

    hi = r_max
    while excess(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ConvergenceError("Radial equilibrium mass never reaches 1", context={"potential": V.name})
    return float(optimize.brentq(excess, 1e-12, hi, xtol=1e-14))


def radial_density(V: Potential, r: np.ndarray) -> np.ndarray:
    """Oracle density lapV/(4 pi) inside the oracle radius, 0 outside."""
    R = radial_support_radius(V)
    r = np.asarray(r, dtype=float)
    return np.where(r <= R, V.radial_lap(r) / (4.0 * np.pi), 0.0)


def equilibrium_from_closed_form(grid: Grid2D, a: float = 1.0) -> EquilibriumData:
    """Circular-law data for V = a|x|^2 built from the exact formulas.

    mu0 = a/pi on the disk of radius R = a^(-1/2), h = (a/2)(R^2 - r^2) - log R
    inside and -log r outside, c0 = 1/2 + (log a)/2, I_V = 3/4 + (log a)/2.
    """
    V = quadratic(a)
    R = 1.0 / np.sqrt(a)
    X, Y = grid.mesh()
    r = np.hypot(X, Y)
    sigma = r <= R
    mu0 = Measure2D.from_density(grid, np.where(sigma, a / np.pi, 0.0), sigma)
    with np.errstate(divide="ignore"):
        h = np.where(r <= R, 0.5 * a * (R * R - r * r) - np.log(R), -np.log(np.maximum(r, 1e-300)))
    c0 = 0.5 + 0.5 * np.log(a)
    zeta = np.where(sigma, 0.0, h + 0.5 * a * r * r - c0)
    return EquilibriumData(
        potential=V,
        mu0=mu0,
        sigma_mask=sigma,
        zeta0=ScalarField2D(grid, zeta),
        c0=float(c0),
        IV=float(0.75 + 0.5 * np.log(a)),
        h_mu0=ScalarField2D(grid, h),
        coincidence_mask=sigma,
        method="closed_form",
    )


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _fill(key: np.ndarray, density: np.ndarray, candidate: np.ndarray, cell_area: float):
    """Take candidate cells in increasing ``key`` until the mass reaches 1.

    The last cell gets the fractional density that makes the mass exact.
    Returns the density array, the mask and the key level of the last cell.
    """
    flat_key = key.ravel()
    idx = np.flatnonzero(candidate.ravel())
    order = idx[np.argsort(flat_key[idx], kind="stable")]
    cum = np.cumsum(density.ravel()[order] * cell_area)
    if cum.size == 0 or cum[-1] < 1.0:
        raise SupportViolationError(
            "Grid box cannot hold a unit-mass equilibrium measure",
            context={"available_mass": float(cum[-1]) if cum.size else 0.0},
        )
    k = int(np.searchsorted(cum, 1.0))
    chosen = order[:k + 1]
    values = np.zeros(density.size)
    values[chosen] = density.ravel()[chosen]
    values[order[k]] -= (cum[k] - 1.0) / cell_area
    values = values.reshape(density.shape)
    return values, values > 0, float(flat_key[order[k]])


def _growth_check(V: Potential, grid: Grid2D) -> None:
    xmin, xmax, ymin, ymax = grid.extent
    r_test = 0.95 * min(abs(xmin), abs(xmax), abs(ymin), abs(ymax))
    if r_test > 1.0:
        V.check_growth(r_test)
    else:
        logger.debug(f"Grid box too small for a growth check (r_test={r_test:.3g}); skipped")


def _mask_iteration(
    V_grid: np.ndarray,
    density: np.ndarray,
    candidate: np.ndarray,
    grid: Grid2D,
    start_key: np.ndarray,
    max_iters: int,
):
    values, mask, level = _fill(start_key, density, candidate, grid.cell_area)
    seen: List[bytes] = [np.packbits(mask).tobytes()]
    best = None
    for iteration in range(1, max_iters + 1):
        h = field_grid.log_potential(ScalarField2D(grid, values))
        U = h.values + 0.5 * V_grid
        new_values, new_mask, level = _fill(U, density, candidate, grid.cell_area)
        defect = float(np.ptp(U[mask]))
        if best is None or defect < best[0]:
            best = (defect, values, mask, iteration)
        changed = int(np.sum(new_mask != mask))
        logger.debug(f"mask iteration {iteration}: {changed} cells changed, U defect on mask {defect:.3e}")
        signature = np.packbits(new_mask).tobytes()
        if changed == 0:
            return new_values, new_mask, iteration, True
        if signature in seen:
            # cycling between boundary cells: keep the iterate with the flattest U
            logger.debug(f"mask iteration cycles after {iteration} steps; keeping iterate {best[3]}")
            return best[1], best[2], iteration, True
        seen.append(signature)
        values, mask = new_values, new_mask
    return values, mask, max_iters, False


def _obstacle_start(V_grid, density, candidate, grid, tol) -> np.ndarray:
    """Projected SOR on the obstacle problem for h^mu0; returns h as an ordering key.

    h >= c0 - V/2, harmonic off the contact set, -log|x - x_c| on the box
    edge; c0 is bisected until the contact set carries unit mass.
    """
    X, Y = grid.mesh()
    i0, j0 = np.unravel_index(np.argmin(V_grid), V_grid.shape)
    xc, yc = X[i0, j0], Y[i0, j0]
    far = -np.log(np.maximum(np.hypot(X - xc, Y - yc), grid.spacing))
    state = {"u": far.copy()}

    def contact_mass(c: float) -> float:
        lower = c - 0.5 * V_grid
        initial = np.maximum(state["u"], lower)
        initial[0, :], initial[-1, :], initial[:, 0], initial[:, -1] = far[0, :], far[-1, :], far[:, 0], far[:, -1]
        result = field_grid.sor_solve(initial, np.zeros(grid.shape, dtype=bool), grid.spacing, lower=lower, tol=tol)
        state["u"] = result.values
        contact = (result.values - lower <= 1e-9 * max(1.0, abs(c))) & candidate
        return float(np.sum(density[contact]) * grid.cell_area) - 1.0

    c_lo = float(np.min(far) + 0.5 * np.min(V_grid) - 1.0)
    c_hi = c_lo + 1.0
    while contact_mass(c_hi) < 0:
        c_hi += 2.0 * (c_hi - c_lo)
        if c_hi - c_lo > 1e4:
            raise ConvergenceError("Obstacle bisection could not bracket c0")
    c0 = optimize.brentq(contact_mass, c_lo, c_hi, xtol=1e-6)
    logger.info(f"Obstacle fallback: c0 ~ {c0:.6f}")
    return state["u"] + 0.5 * V_grid


def solve_equilibrium(
    V: Potential,
    grid: Grid2D,
    method: str = "mask",
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
) -> EquilibriumData:
    """Equilibrium measure of V on the grid.

    ``method="mask"`` runs the support-mask fixed point (density lapV/4pi
    on the mask, mask = lowest cells of h^mu + V/2 carrying unit mass) and
    falls back to projected SOR when it does not settle; ``"obstacle"``
    starts from the projected SOR solution directly.
    """
    _growth_check(V, grid)
    X, Y = grid.mesh()
    V_grid = _on_grid(V, grid)
    lap = np.broadcast_to(np.asarray(V.lapV(X, Y), dtype=float), grid.shape)
    candidate = lap > 0
    density = np.where(candidate, lap / (4.0 * np.pi), 0.0)
    max_iters = max_iters or settings.MASK_MAX_ITERS

    used = method
    if method == "mask":
        values, mask, iterations, ok = _mask_iteration(V_grid, density, candidate, grid, V_grid, max_iters)
        if not ok:
            logger.warning("Support-mask iteration did not settle; falling back to projected SOR")
            used = "obstacle"
    elif method != "obstacle":
        raise ValidationError(f"Unknown equilibrium method '{method}'")
    if used == "obstacle":
        key = _obstacle_start(V_grid, density, candidate, grid, tol)
        values, mask, iterations, ok = _mask_iteration(V_grid, density, candidate, grid, key, max_iters)
        if not ok:
            raise ConvergenceError("Equilibrium support did not converge", context={"iterations": iterations})

    mu0 = Measure2D.from_density(grid, values, mask)
    h = field_grid.log_potential(mu0)
    U = h.values + 0.5 * V_grid
    c0 = float(U.min())
    zeta = ScalarField2D(grid, U - c0)

    eps = 10.0 * grid.spacing if tol is None else tol
    level = float(U[mask].max())
    bad = (~candidate) & (U <= level)
    if bad.any():
        raise AssumptionViolation(
            "lapV <= 0 on the coincidence set",
            context={"cells": int(bad.sum()), "min_lapV": float(lap[bad].min())},
        )
    coincidence = zeta.values <= eps
    IV = float(np.sum(h.values * values) * grid.cell_area + np.sum(V_grid * values) * grid.cell_area)

    eq = EquilibriumData(
        potential=V, mu0=mu0, sigma_mask=mask, zeta0=zeta, c0=c0, IV=IV, h_mu0=h,
        coincidence_mask=coincidence, iterations=iterations, method=used,
    )
    report = verify_euler_lagrange(eq, tol=eps, h_mu0=h)
    eq = replace(eq, residuals=report)
    sym = compare_masks(mask, coincidence)
    logger.info(
        f"Equilibrium of '{V.name}': {int(mask.sum())} support cells, c0={c0:.6f}, I_V={IV:.6f}, "
        f"{iterations} iterations ({used}); Sigma vs coincidence differ on {sym['symmetric_difference']} cells"
    )
    return eq


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def verify_euler_lagrange(
    eq: EquilibriumData,
    tol: Optional[float] = None,
    h_mu0: Optional[ScalarField2D] = None,
) -> EulerLagrangeReport:
    """Residuals of h^mu0 + V/2 = c0 on Sigma and >= c0 elsewhere.

    zeta is recomputed from (mu0, V, c0), so perturbing any one of them
    shows up in the report.
    """
    tol = 10.0 * eq.grid.spacing if tol is None else tol
    h = h_mu0 if h_mu0 is not None else field_grid.log_potential(eq.mu0)
    U = h.values + 0.5 * _on_grid(eq.potential, eq.grid)
    zeta = U - eq.c0
    sigma = eq.sigma_mask
    min_zeta = max(0.0, float(np.max(-zeta)))
    on_support = float(np.max(np.abs(zeta[sigma]))) if sigma.any() else 0.0
    defect = float(np.ptp(U[sigma])) if sigma.any() else 0.0
    return EulerLagrangeReport(
        min_zeta=min_zeta,
        max_abs_zeta_on_support=on_support,
        constancy_defect=defect,
        tolerance=tol,
        passed=bool(min_zeta <= tol and on_support <= tol and defect <= tol),
    )


def compare_masks(a: np.ndarray, b: np.ndarray) -> Dict[str, int]:
    """Cell counts of a minus b, b minus a and the symmetric difference."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    only_a = int(np.sum(a & ~b))
    only_b = int(np.sum(b & ~a))
    return {"only_a": only_a, "only_b": only_b, "symmetric_difference": only_a + only_b}


def is_interior(xi: TestFunction, eq: EquilibriumData, pad_cells: float = 1.0) -> bool:
    """True when the support of xi (padded by a few cells) lies inside Sigma."""
    X, Y = eq.grid.mesh()
    support = xi.support_mask(X, Y, pad=pad_cells * eq.grid.spacing)
    return not bool(np.any(support & ~eq.sigma_mask))


def laplacian_sup(xi: TestFunction, grid: Grid2D) -> float:
    X, Y = grid.mesh()
    return float(np.max(np.abs(xi.lap(X, Y))))


def t_max(eq: EquilibriumData, xi: TestFunction, beta: float) -> Optional[float]:
    """2 pi beta min_Sigma mu0 / (2 sup|lap xi|); None outside the interior regime."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    if not is_interior(xi, eq):
        return None
    lap_sup = laplacian_sup(xi, eq.grid)
    if lap_sup == 0:
        return np.inf
    return float(2.0 * np.pi * beta * eq.min_density() / (2.0 * lap_sup))


def perturbed_equilibrium(
    eq: EquilibriumData,
    xi: TestFunction,
    t: float,
    beta: float,
) -> PerturbedEquilibrium:
    """mu_t for V_t = V - 2 t xi / beta.

    In the interior regime (|t| <= t_max) mu_t = mu0 - t lap(xi) / (2 pi beta)
    on the same support; otherwise the equilibrium problem is re-solved.
    """
    grid = eq.grid
    X, Y = grid.mesh()
    lap_xi = np.asarray(xi.lap(X, Y), dtype=float)
    mu_bar = ScalarField2D(grid, eq.mu0.values - t / (2.0 * np.pi * beta) * lap_xi)
    V_t = perturbed_potential(eq.potential, xi, -2.0 * t / beta)
    tm = t_max(eq, xi, beta)

    if t == 0:
        return PerturbedEquilibrium(
            t=0.0, beta=beta, mu_t=eq.mu0, zeta_t=eq.zeta0, is_interior_regime=tm is not None,
            c_t=eq.c0, sigma_mask=eq.sigma_mask, mu_bar_t=mu_bar, potential=V_t, t_max=tm,
        )

    if tm is not None and abs(t) <= tm:
        values = np.where(eq.sigma_mask, mu_bar.values, 0.0)
        if np.any(values[eq.sigma_mask] < 0):
            raise AssumptionViolation(
                "Perturbed density is negative although |t| <= t_max",
                context={"t": t, "t_max": tm, "min_density": float(values[eq.sigma_mask].min())},
            )
        mu_t = Measure2D.from_density(grid, values, eq.sigma_mask)
        h = field_grid.log_potential(mu_t)
        U = h.values + 0.5 * _on_grid(V_t, grid)
        c_t = float(U.min())
        logger.debug(f"Interior perturbation t={t:g}: mass {mu_t.mass():.12f}, c_t={c_t:.6f}")
        return PerturbedEquilibrium(
            t=t, beta=beta, mu_t=mu_t, zeta_t=ScalarField2D(grid, U - c_t), is_interior_regime=True,
            c_t=c_t, sigma_mask=eq.sigma_mask, mu_bar_t=mu_bar, potential=V_t, t_max=tm,
        )

    logger.info(f"Perturbation t={t:g} outside the interior regime; re-solving the equilibrium for V_t")
    eq_t = solve_equilibrium(V_t, grid)
    return PerturbedEquilibrium(
        t=t, beta=beta, mu_t=eq_t.mu0, zeta_t=eq_t.zeta0, is_interior_regime=False,
        c_t=eq_t.c0, sigma_mask=eq_t.sigma_mask, mu_bar_t=mu_bar, potential=V_t, t_max=tm,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_equilibrium(eq: EquilibriumData, directory: Union[str, Path]) -> Dict[str, Path]:
    """Write mu0, zeta0, h^mu0 and Sigma as field files plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "mu0": eq.mu0.density.save(directory / "mu0.bin"),
        "zeta0": eq.zeta0.save(directory / "zeta0.bin"),
        "h_mu0": eq.h_mu0.save(directory / "h_mu0.bin"),
        "sigma": ScalarField2D(eq.grid, eq.sigma_mask.astype(float)).save(directory / "sigma.bin"),
    }
    files["manifest"] = write_json(directory / "manifest.json", eq.summary())
    return files


def load_equilibrium(directory: Union[str, Path], V: Potential) -> EquilibriumData:
    directory = Path(directory)
    meta = read_json(directory / "manifest.json")
    density = ScalarField2D.load(directory / "mu0.bin")
    sigma = ScalarField2D.load(directory / "sigma.bin").values > 0.5
    residuals = meta.get("residuals")
    return EquilibriumData(
        potential=V,
        mu0=Measure2D(density, sigma),
        sigma_mask=sigma,
        zeta0=ScalarField2D.load(directory / "zeta0.bin"),
        c0=float(meta["c0"]),
        IV=float(meta["IV"]),
        h_mu0=ScalarField2D.load(directory / "h_mu0.bin"),
        residuals=EulerLagrangeReport(**residuals) if residuals else None,
        iterations=int(meta.get("iterations", 0)),
        method=str(meta.get("method", "mask")),
    )
