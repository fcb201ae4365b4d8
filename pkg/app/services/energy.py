"""
Coulomb energies of point configurations.

Conventions: g(x) = -log|x|; pair sums run over ordered pairs i != j, so
each physical pair is counted twice. The next-order energy is

    F_N(X, mu) = sum_{i!=j} g(x_i - x_j) - 2N sum_i h^mu(x_i) + N^2 iint g dmu dmu

and the truncated potential smears charge i on the circle of radius eta_i.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist

from app.core.exceptions import ValidationError
from app.core.logging import get_logger
from app.models.fields import Grid2D, Measure2D, ScalarField2D
from app.models.functions import Potential, TestFunction
from app.models.points import Configuration, TruncationVector
from app.models.schemas import EnergyReport
from app.services import field_grid

logger = get_logger("energy")

CIRCLE_NODES = 64
# relative slack granted to grid-evaluated bounds
BOUND_MARGIN = 1e-2


# ---------------------------------------------------------------------------
# Pair sums and the Hamiltonian
# ---------------------------------------------------------------------------

def pairwise_log_sum(
    points: np.ndarray,
    method: str = "direct",
    block_size: int = 256,
    threads: int = 1,
) -> float:
    """sum_{i != j} -log|x_i - x_j| over ordered pairs.

    ``direct`` uses the condensed distance vector; ``blocked`` sums row
    blocks of the distance matrix (optionally on a thread pool) and adds
    the block totals in block order.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n < 2:
        return 0.0
    if method == "direct":
        return float(-2.0 * np.sum(np.log(pdist(pts))))
    if method != "blocked":
        raise ValidationError(f"Unknown pair-sum method '{method}'")

    def block_total(start: int) -> float:
        stop = min(n, start + block_size)
        d = cdist(pts[start:stop], pts)
        rows = np.arange(start, stop)
        d[rows - start, rows] = 1.0  # log 1 = 0 on the diagonal
        return float(-np.sum(np.log(d)))

    starts = list(range(0, n, block_size))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            totals = list(pool.map(block_total, starts))
    else:
        totals = [block_total(s) for s in starts]
    return float(np.sum(totals))


def hamiltonian(X: Configuration, V: Potential, method: str = "direct") -> float:
    """H_N(X) = sum_{i!=j} -log|x_i - x_j| + N sum_i V(x_i)."""
    X.require_distinct()
    return pairwise_log_sum(X.points, method=method) + X.N * float(np.sum(V.at_points(X.points)))


def energy_gradient(X: Configuration, V: Potential) -> np.ndarray:
    """dH_N/dx_i = -2 sum_{j!=i} (x_i - x_j)/|x_i - x_j|^2 + N grad V(x_i)."""
    pts = X.points
    diff = pts[:, None, :] - pts[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    np.fill_diagonal(r2, np.inf)
    pair = -2.0 * np.sum(diff / r2[..., None], axis=1)
    return pair + X.N * V.grad_at_points(pts)


def nn_truncation(X: Configuration) -> TruncationVector:
    """r(x_i) = min(nearest-neighbour distance, N^(-1/2)) / 4."""
    if X.N < 2:
        raise ValidationError("Nearest-neighbour truncation needs at least two points")
    X.require_distinct()
    dist, _ = cKDTree(X.points).query(X.points, k=2)
    return TruncationVector(0.25 * np.minimum(dist[:, 1], X.N ** -0.5))


# ---------------------------------------------------------------------------
# Next-order energy
# ---------------------------------------------------------------------------

def next_order_energy(
    X: Configuration,
    mu: Measure2D,
    background: Optional[float] = None,
) -> EnergyReport:
    """F_N(X, mu) with each term stored; ``background`` reuses iint g dmu dmu."""
    X.require_distinct()
    N = X.N
    pair = pairwise_log_sum(X.points)
    cross = -2.0 * N * float(np.sum(field_grid.log_potential_at(mu, X.points)))
    if background is None:
        background = field_grid.log_energy(mu)
    back = N * N * float(background)
    return EnergyReport(FN=pair + cross + back, pairwise_sum=pair, cross_term=cross, background_term=back, N=N)


def splitting_residual(X: Configuration, eq, V: Optional[Potential] = None) -> float:
    """|H_N - (N^2 I_V(mu0) + 2N sum zeta0(x_i) + F_N(X, mu0))| with zeta0 interpolated."""
    V = V or eq.potential
    N = X.N
    H = hamiltonian(X, V)
    zeta = float(np.sum(eq.zeta0.interpolate(X.points)))
    F = next_order_energy(X, eq.mu0).FN
    residual = abs(H - (N * N * eq.IV + 2.0 * N * zeta + F))
    logger.debug(f"splitting residual N={N}: {residual:.3e} (H_N={H:.6f})")
    return float(residual)


def fn_lower_bound_constant(samples: Iterable[Configuration], mu: Measure2D) -> Dict[str, float]:
    """Empirical C in F_N >= -(1/2) N log N - C N over a batch."""
    background = field_grid.log_energy(mu)
    worst = -np.inf
    count = 0
    for X in samples:
        F = next_order_energy(X, mu, background=background).FN
        worst = max(worst, -(F + 0.5 * X.N * np.log(X.N)) / X.N)
        count += 1
    return {"C": float(worst), "samples": count}


# ---------------------------------------------------------------------------
# Truncated fields
# ---------------------------------------------------------------------------

def smeared_potential(points: np.ndarray, eta: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """sum_i -log max(|x - x_i|, eta_i) at the given coordinates."""
    out = np.zeros(np.broadcast(x, y).shape)
    for (px, py), e in zip(points, eta):
        out -= np.log(np.maximum(np.hypot(x - px, y - py), e))
    return out


def field_box(mu_grid: Grid2D, points: np.ndarray, cushion: float = 2.0) -> Grid2D:
    """Grid aligned with mu's lattice covering mu and the points, enlarged by ``cushion``."""
    xmin, xmax, ymin, ymax = mu_grid.extent
    reach = max(abs(xmin), abs(xmax), abs(ymin), abs(ymax))
    if len(points):
        reach = max(reach, float(np.max(np.abs(points))))
    return Grid2D.aligned_box(mu_grid, cushion * reach)


def _h_on(mu: Measure2D, grid: Grid2D) -> ScalarField2D:
    if mu.grid.same_as(grid):
        return field_grid.log_potential(mu)
    return field_grid.log_potential(mu, grid)


def truncated_potential_field(
    X: Configuration,
    mu: Measure2D,
    eta: TruncationVector,
    grid: Optional[Grid2D] = None,
    h_mu: Optional[ScalarField2D] = None,
) -> ScalarField2D:
    """H_{N,eta}(x) = sum_i -log max(|x - x_i|, eta_i) - N h^mu(x)."""
    if len(eta) != X.N:
        raise ValidationError("Truncation vector length differs from N")
    grid = grid or mu.grid
    h_mu = h_mu if h_mu is not None else _h_on(mu, grid)
    Xg, Yg = grid.mesh()
    return ScalarField2D(grid, smeared_potential(X.points, eta.eta, Xg, Yg) - X.N * h_mu.values)


def truncated_field_gradient(
    X: Configuration,
    mu: Measure2D,
    eta: TruncationVector,
    grid: Grid2D,
    h_mu: Optional[ScalarField2D] = None,
) -> np.ndarray:
    """grad H_{N,eta} per cell: exact for the smeared charges, centred differences for h^mu."""
    h_mu = h_mu if h_mu is not None else _h_on(mu, grid)
    Xg, Yg = grid.mesh()
    grad = -X.N * h_mu.gradient().values
    gx, gy = grad[..., 0].copy(), grad[..., 1].copy()
    for (px, py), e in zip(X.points, eta.eta):
        dx, dy = Xg - px, Yg - py
        r2 = dx * dx + dy * dy
        k = np.where(r2 > e * e, 1.0 / np.where(r2 > 0, r2, 1.0), 0.0)
        gx -= k * dx
        gy -= k * dy
    return np.stack([gx, gy], axis=-1)


@dataclass
class FieldEnergy:
    """integral of |grad H_{N,eta}|^2 split into the grid part and the far tail."""
    grid_integral: float
    tail: float
    grid: Grid2D
    gradient: np.ndarray

    @property
    def total(self) -> float:
        return self.grid_integral + self.tail


def field_energy(
    X: Configuration,
    mu: Measure2D,
    eta: TruncationVector,
    grid: Optional[Grid2D] = None,
    supersample: int = 12,
) -> FieldEnergy:
    """Quadrature of |grad H_{N,eta}|^2 plus a dipole tail estimate.

    Cells cut by a truncation circle are integrated on an s x s sub-grid
    (the charge's own field is discontinuous there); the tail beyond the
    box is pi |p|^2 / L^2 for the dipole moment p of the neutral system.
    """
    grid = grid or field_box(mu.grid, X.points)
    h_mu = _h_on(mu, grid)
    grad = truncated_field_gradient(X, mu, eta, grid, h_mu)
    density = np.sum(grad * grad, axis=-1)

    h = grid.spacing
    Xg, Yg = grid.mesh()
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    OX, OY = np.meshgrid(offsets * h, offsets * h, indexing="ij")
    OX, OY = OX.ravel(), OY.ravel()
    for (px, py), e in zip(X.points, eta.eta):
        dist = np.hypot(Xg - px, Yg - py)
        cut = np.abs(dist - e) <= 0.75 * h
        if not cut.any():
            continue
        cx, cy = Xg[cut], Yg[cut]
        # the charge's own contribution at the centre, removed before supersampling
        dx, dy = cx - px, cy - py
        r2 = dx * dx + dy * dy
        k = np.where(r2 > e * e, 1.0 / r2, 0.0)
        ax = grad[..., 0][cut] + k * dx
        ay = grad[..., 1][cut] + k * dy
        sx = cx[:, None] + OX[None, :] - px
        sy = cy[:, None] + OY[None, :] - py
        s2 = sx * sx + sy * sy
        ks = np.where(s2 > e * e, 1.0 / s2, 0.0)
        fx = ax[:, None] - ks * sx
        fy = ay[:, None] - ks * sy
        density[cut] = np.mean(fx * fx + fy * fy, axis=1)

    grid_integral = float(np.sum(density) * grid.cell_area)
    Xm, Ym = mu.grid.mesh()
    p = np.sum(X.points, axis=0) - X.N * np.array([mu.integrate(Xm), mu.integrate(Ym)])
    xmin, xmax, ymin, ymax = grid.extent
    L = min(-xmin, xmax, -ymin, ymax)
    tail = float(np.pi * np.dot(p, p) / (L * L)) if L > 0 else np.inf
    return FieldEnergy(grid_integral=grid_integral, tail=tail, grid=grid, gradient=grad)


# ---------------------------------------------------------------------------
# Smearing kernel f_eta
# ---------------------------------------------------------------------------

def f_eta(x: np.ndarray, y: np.ndarray, eta: float) -> np.ndarray:
    """max(log(eta/|x|), 0): the difference between a point charge and its smeared circle."""
    r = np.hypot(x, y)
    with np.errstate(divide="ignore"):
        return np.where(r < eta, np.log(eta / r), 0.0)


def smearing_integral(eta: float) -> Dict[str, float]:
    """integral over B(0, eta) of f_eta by 1D quadrature, against pi eta^2 / 2."""
    value, err = integrate.quad(lambda r: np.log(eta / r) * 2.0 * np.pi * r, 0.0, eta, epsabs=1e-14, epsrel=1e-13)
    exact = 0.5 * np.pi * eta * eta
    return {"quadrature": float(value), "closed_form": float(exact), "error": float(abs(value - exact)), "quad_error": float(err)}


def _polar_rule(n_r: int = 32, n_theta: int = 64):
    nodes, weights = np.polynomial.legendre.leggauss(n_r)
    s = 0.5 * (nodes + 1.0)
    ws = 0.5 * weights
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    return s, ws, theta


def smeared_mu_integral(X: Configuration, mu: Measure2D, eta: TruncationVector) -> np.ndarray:
    """Per point, the integral of f_{eta_i}(x - x_i) dmu(x) by polar Gauss-Legendre quadrature."""
    s, ws, theta = _polar_rule()
    grid = mu.grid
    out = np.zeros(X.N)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for i, ((px, py), e) in enumerate(zip(X.points, eta.eta)):
        r = e * s
        qx = px + r[:, None] * cos_t[None, :]
        qy = py + r[:, None] * sin_t[None, :]
        pts = np.column_stack([qx.ravel(), qy.ravel()])
        inside = grid.contains(pts)
        ii, jj = grid.cell_index(pts)
        dens = np.where(inside, mu.values[ii, jj], 0.0).reshape(qx.shape)
        radial = np.log(1.0 / s) * r * e * ws  # f = log(eta/r), dr = eta ds, area element r
        out[i] = float(np.sum(radial[:, None] * dens) * (2.0 * np.pi / theta.size))
    return out


def circle_average(func: Callable[[np.ndarray, np.ndarray], np.ndarray], center, radius: float,
                   n: int = CIRCLE_NODES) -> float:
    theta = 2.0 * np.pi * np.arange(n) / n
    return float(np.mean(func(center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta))))


# ---------------------------------------------------------------------------
# Truncated-energy identity and the fluctuation bound
# ---------------------------------------------------------------------------

def truncated_energy_identity(
    X: Configuration,
    mu: Measure2D,
    eta: Optional[TruncationVector] = None,
    grid: Optional[Grid2D] = None,
) -> Dict[str, float]:
    """Both sides of F_N = (1/2pi) int|grad H_eta|^2 + sum log eta_i - 2N sum int f_eta_i dmu.

    For eta <= r (nearest-neighbour truncation) the sides agree up to
    discretisation; otherwise the gap must lie between the overlap bounds
    sum_{i!=j, overlap} (g(x_i - x_j) - min(g(eta_i), g(eta_j))) and
    sum_{i!=j, overlap} g(x_i - x_j).
    """
    r = nn_truncation(X)
    eta = eta if eta is not None else r
    report = next_order_energy(X, mu)
    fe = field_energy(X, mu, eta, grid)
    smear = smeared_mu_integral(X, mu, eta)
    rhs = fe.total / (2.0 * np.pi) + float(np.sum(np.log(eta.eta))) - 2.0 * X.N * float(np.sum(smear))
    gap = report.FN - rhs

    # circle averages of h^mu equal h^mu(x_i) - int f_eta dmu
    h_points = field_grid.log_potential_at(mu, X.points)
    h_circle = np.array([
        circle_average(lambda x, y: field_grid.log_potential_at(mu, np.column_stack([x, y])), p, e)
        for p, e in zip(X.points, eta.eta)
    ])
    d = cdist(X.points, X.points)
    overlap = (d <= eta.eta[:, None] + eta.eta[None, :]) & ~np.eye(X.N, dtype=bool)
    g = -np.log(np.where(np.eye(X.N, dtype=bool), 1.0, d))
    g_eta = -np.log(eta.eta)
    lower = float(np.sum((g - np.minimum(g_eta[:, None], g_eta[None, :]))[overlap]))
    upper = float(np.sum(g[overlap]))

    smear_bound = 2.0 * X.N * mu.sup() * float(np.sum(0.5 * np.pi * eta.eta ** 2))
    smear_term = 2.0 * X.N * float(np.sum(smear))
    result = {
        "lhs": report.FN,
        "rhs": rhs,
        "gap": gap,
        "relative_residual": abs(gap) / max(1.0, abs(report.FN)),
        "field_integral": fe.grid_integral,
        "tail": fe.tail,
        "lower_bound": lower,
        "upper_bound": upper,
        "within_bounds": bool(lower - BOUND_MARGIN * max(1.0, abs(lower)) <= gap
                              <= upper + BOUND_MARGIN * max(1.0, abs(upper))),
        "smearing_term": smear_term,
        "smearing_bound": smear_bound,
        "smearing_ok": bool(abs(smear_term) <= smear_bound * (1.0 + 1e-9)),
        "exact_truncation": bool(np.all(eta.eta <= r.eta * (1.0 + 1e-12))),
        # disjoint circles: each smeared pair interacts exactly as two points
        "field_integral_circles": 2.0 * np.pi * float(
            report.pairwise_sum + np.sum(g_eta) - 2.0 * X.N * np.sum(h_circle) + report.background_term
        ),
        "smearing_crosscheck": float(np.max(np.abs(h_circle - (h_points - smear)))) if X.N else 0.0,
    }
    logger.debug(f"truncated-energy identity N={X.N}: gap {gap:.3e} (tail {fe.tail:.3e})")
    return result


def fluct_energy_bound_check(
    X: Configuration,
    mu: Measure2D,
    phi: TestFunction,
    eta: Optional[TruncationVector] = None,
    grid: Optional[Grid2D] = None,
) -> Dict[str, float]:
    """|int phi d(sum delta^(eta_i) - N mu)| <= (1/2pi) |grad phi|_2 |grad H_eta|_2."""
    if eta is None:
        eta = TruncationVector(np.full(X.N, X.N ** -0.5))
    if np.any(eta.eta > X.N ** -0.5 * (1 + 1e-12)):
        raise ValidationError("fluct_energy_bound_check needs eta_i <= N^(-1/2)")
    grid = grid or field_box(mu.grid, X.points)
    Xm, Ym = mu.grid.mesh()
    charges = sum(circle_average(phi, p, e) for p, e in zip(X.points, eta.eta))
    lhs = abs(charges - X.N * mu.integrate(phi(Xm, Ym)))

    fe = field_energy(X, mu, eta, grid)
    Xg, Yg = grid.mesh()
    gx, gy = phi.grad(Xg, Yg)
    grad_phi = float(np.sqrt(np.sum(gx * gx + gy * gy) * grid.cell_area))
    rhs = grad_phi * np.sqrt(fe.total) / (2.0 * np.pi)
    return {"lhs": float(lhs), "rhs": float(rhs), "slack": float(rhs - lhs),
            "holds": bool(lhs <= (1.0 + BOUND_MARGIN) * rhs)}
