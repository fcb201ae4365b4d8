"""
Grid numerics shared by every other service: midpoint quadrature, exact
cell-integrated logarithmic potentials, the 5-point Laplacian, SOR and
sparse solvers, harmonic extension outside a support mask, Neumann jumps
and Dirichlet energies.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage, signal, sparse
from scipy.sparse.linalg import spsolve

from app.core.config import settings
from app.core.exceptions import (
    ConvergenceError,
    GridMismatchError,
    SupportViolationError,
    ValidationError,
)
from app.core.logging import get_logger
from app.models.fields import Grid2D, Measure2D, ScalarField2D

logger = get_logger("field_grid")

FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)

XiData = Union[ScalarField2D, Callable[[np.ndarray, np.ndarray], np.ndarray]]


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def quadrature(f: ScalarField2D, region: Optional[np.ndarray] = None) -> float:
    """Midpoint rule: sum of f over the selected cells times spacing^2."""
    values = f.values
    if region is not None:
        region = _mask_on(f.grid, region)
        values = np.where(region, values, 0.0)
    return float(values.sum() * f.grid.cell_area)


def _mask_on(grid: Grid2D, region) -> np.ndarray:
    if isinstance(region, Measure2D):
        grid.require_same(region.grid, "region")
        return region.support_mask
    if isinstance(region, ScalarField2D):
        grid.require_same(region.grid, "region")
        return region.values != 0
    mask = np.asarray(region, dtype=bool)
    if mask.shape != grid.shape:
        raise GridMismatchError(
            f"Region mask shape {mask.shape} does not match grid {grid.shape}"
        )
    return mask


# ---------------------------------------------------------------------------
# Logarithmic potentials
# ---------------------------------------------------------------------------

def _log_antiderivative(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """G with d2G/dxdy = log(x^2 + y^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = x * x + y * y
    with np.errstate(divide="ignore", invalid="ignore"):
        t_log = np.where(r2 > 0, x * y * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)
        t_x = np.where(x != 0, x * x * np.arctan(y / np.where(x != 0, x, 1.0)), 0.0)
        t_y = np.where(y != 0, y * y * np.arctan(x / np.where(y != 0, y, 1.0)), 0.0)
    return t_log - 3.0 * x * y + t_x + t_y


def cell_log_integral(dx: np.ndarray, dy: np.ndarray, h: float) -> np.ndarray:
    """Exact integral of -log|z| over the square of side h centred at (dx, dy)."""
    a0, a1 = dx - 0.5 * h, dx + 0.5 * h
    b0, b1 = dy - 0.5 * h, dy + 0.5 * h
    total = (
        _log_antiderivative(a1, b1) - _log_antiderivative(a0, b1)
        - _log_antiderivative(a1, b0) + _log_antiderivative(a0, b0)
    )
    return -0.5 * total


def _offset_kernel(d0: int, length_x: int, e0: int, length_y: int, h: float) -> np.ndarray:
    """Cell integrals for integer offsets d0..d0+length_x-1 (x) and e0..e0+length_y-1 (y)."""
    cx = (np.arange(d0, d0 + length_x + 1) - 0.5) * h
    cy = (np.arange(e0, e0 + length_y + 1) - 0.5) * h
    CX, CY = np.meshgrid(cx, cy, indexing="ij")
    G = _log_antiderivative(CX, CY)
    return -0.5 * (G[1:, 1:] - G[:-1, 1:] - G[1:, :-1] + G[:-1, :-1])


def log_potential(
    mu: Union[Measure2D, ScalarField2D],
    eval_grid: Optional[Grid2D] = None,
    method: str = "auto",
) -> ScalarField2D:
    """h^mu(x) = integral of -log|x - y| dmu(y) at the cell centres of eval_grid.

    The density is treated as piecewise constant and every source cell
    contributes its exact cell integral, so the direct and FFT paths compute
    the same discrete sum. Signed densities are accepted as ScalarField2D.
    """
    density = mu.density if isinstance(mu, Measure2D) else mu
    source = density.grid
    eval_grid = eval_grid or source
    mass = float(density.values.sum() * source.cell_area)
    if mass == 0.0:
        logger.warning("log_potential called with a zero-mass measure")

    try:
        di, dj = _lattice_offset(eval_grid, source)
    except ValidationError:
        values = log_potential_at(density, eval_grid.centers()).reshape(eval_grid.shape)
        return ScalarField2D(eval_grid, values)

    kernel = _offset_kernel(
        di - (source.nx - 1), eval_grid.nx + source.nx - 1,
        dj - (source.ny - 1), eval_grid.ny + source.ny - 1,
        source.spacing,
    )
    if method == "auto":
        method = "fft" if source.size > settings.FFT_MIN_CELLS else "direct"
    if method not in ("fft", "direct"):
        raise ValidationError(f"Unknown log_potential method '{method}'")
    full = signal.convolve(density.values, kernel, mode="full", method=method)
    values = full[source.nx - 1: source.nx - 1 + eval_grid.nx, source.ny - 1: source.ny - 1 + eval_grid.ny]
    return ScalarField2D(eval_grid, values)


def _lattice_offset(eval_grid: Grid2D, source: Grid2D) -> Tuple[int, int]:
    """Integer cell offset of eval_grid on the source lattice (may be negative)."""
    h = source.spacing
    if abs(eval_grid.spacing - h) > 1e-12 * h:
        raise ValidationError("Evaluation grid spacing differs from the source grid")
    di = (eval_grid.origin[0] - source.origin[0]) / h
    dj = (eval_grid.origin[1] - source.origin[1]) / h
    i, j = int(round(di)), int(round(dj))
    if abs(di - i) > 1e-6 or abs(dj - j) > 1e-6:
        raise ValidationError("Evaluation grid is not aligned with the source lattice")
    return i, j


def log_potential_at(
    mu: Union[Measure2D, ScalarField2D],
    points: np.ndarray,
    chunk_size: int = 2_000_000,
) -> np.ndarray:
    """h^mu at arbitrary points by the direct sum of exact cell integrals."""
    density = mu.density if isinstance(mu, Measure2D) else mu
    grid = density.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        return np.zeros(0)
    active = density.values != 0
    weights = density.values[active]
    X, Y = grid.mesh()
    cx, cy = X[active], Y[active]
    out = np.empty(pts.shape[0])
    rows = max(1, chunk_size // max(1, weights.size))
    for start in range(0, pts.shape[0], rows):
        block = pts[start:start + rows]
        dx = cx[None, :] - block[:, 0:1]
        dy = cy[None, :] - block[:, 1:2]
        out[start:start + rows] = cell_log_integral(dx, dy, grid.spacing) @ weights
    return out


def log_energy(mu: Union[Measure2D, ScalarField2D]) -> float:
    """Double integral of -log|x - y| dmu dmu for a piecewise-constant density."""
    density = mu.density if isinstance(mu, Measure2D) else mu
    h_mu = log_potential(density)
    return float(np.sum(h_mu.values * density.values) * density.grid.cell_area)


# ---------------------------------------------------------------------------
# Laplacian and masks
# ---------------------------------------------------------------------------

def discrete_laplacian(f: ScalarField2D) -> ScalarField2D:
    """5-point Laplacian. Edge cells have no full stencil: they are set to 0
    and reported invalid by laplacian_valid_mask."""
    u = f.values
    h2 = f.grid.cell_area
    lap = np.zeros_like(u)
    lap[1:-1, 1:-1] = (u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]) / h2
    return ScalarField2D(f.grid, lap)


def laplacian_valid_mask(grid: Grid2D) -> np.ndarray:
    valid = np.zeros(grid.shape, dtype=bool)
    valid[1:-1, 1:-1] = True
    return valid


def boundary_cells(mask: np.ndarray) -> np.ndarray:
    """Cells of the mask having a 4-neighbour outside it."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=FOUR_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def distance_to_mask(mask: np.ndarray, spacing: float) -> np.ndarray:
    """Euclidean distance from each cell centre to the nearest mask cell centre."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask) * spacing


def mask_diameter(grid: Grid2D, mask: np.ndarray) -> float:
    X, Y = grid.mesh()
    xs, ys = X[mask], Y[mask]
    return float(np.hypot(xs.max() - xs.min(), ys.max() - ys.min()) + grid.spacing)


def label_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Connected components of a mask (8-connectivity flood fill)."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return labels, int(count)


# ---------------------------------------------------------------------------
# Linear solvers
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    values: np.ndarray
    iterations: int
    change: float
    residual: float


def optimal_omega(n: int) -> float:
    return 2.0 / (1.0 + np.sin(np.pi / max(n, 2)))


def sor_solve(
    initial: np.ndarray,
    fixed: np.ndarray,
    spacing: float,
    rhs: Optional[np.ndarray] = None,
    lower: Optional[np.ndarray] = None,
    omega: Optional[float] = None,
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
    check_every: int = 10,
) -> SolveResult:
    """Red-black SOR for the 5-point problem Lap u = rhs on the free cells.

    Cells in ``fixed`` and the outer ring keep their initial values. With
    ``lower`` the update is projected, u = max(u, lower), which solves the
    discrete obstacle problem. Stops when the largest update of a full sweep
    falls below ``tol * max(1, max|u|)``.
    """
    u = np.array(initial, dtype=float, copy=True)
    omega = omega or optimal_omega(max(u.shape))
    tol = tol or settings.SOR_TOL
    max_iters = max_iters or settings.SOR_MAX_ITERS
    h2 = spacing * spacing

    free = ~np.asarray(fixed, dtype=bool)
    free[0, :] = free[-1, :] = free[:, 0] = free[:, -1] = False
    I, J = np.indices(u.shape)
    colours = [(free & ((I + J) % 2 == c))[1:-1, 1:-1] for c in (0, 1)]
    rhs_in = None if rhs is None else h2 * np.asarray(rhs, dtype=float)[1:-1, 1:-1]
    lower_in = None if lower is None else np.asarray(lower, dtype=float)[1:-1, 1:-1]
    scale = max(1.0, float(np.max(np.abs(u))))
    inner = u[1:-1, 1:-1]

    change = np.inf
    iteration = 0
    for iteration in range(1, max_iters + 1):
        change = 0.0
        for sel in colours:
            nb = u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2]
            target = nb if rhs_in is None else nb - rhs_in
            new = inner + omega * (0.25 * target - inner)
            if lower_in is not None:
                new = np.maximum(new, lower_in)
            if sel.any():
                change = max(change, float(np.max(np.abs(new[sel] - inner[sel]))))
            inner[sel] = new[sel]
        if iteration % check_every == 0 and change <= tol * scale:
            break
    else:
        raise ConvergenceError(
            f"SOR did not converge in {max_iters} iterations",
            context={"change": change, "tol": tol * scale},
        )

    residual = _laplace_residual(u, free, spacing, rhs, lower)
    logger.debug(f"SOR converged: {iteration} iterations, change {change:.2e}, residual {residual:.2e}")
    return SolveResult(u, iteration, change, residual)


def _laplace_residual(u, free, spacing, rhs=None, lower=None) -> float:
    lap = np.zeros_like(u)
    lap[1:-1, 1:-1] = u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]
    lap /= spacing * spacing
    if rhs is not None:
        lap = lap - rhs
    sel = free.copy()
    if lower is not None:
        sel &= u > lower + 1e-12
    return float(np.max(np.abs(lap[sel]))) if sel.any() else 0.0


def sparse_solve(
    initial: np.ndarray,
    fixed: np.ndarray,
    spacing: float,
    rhs: Optional[np.ndarray] = None,
) -> SolveResult:
    """Direct sparse solve of the same 5-point Dirichlet problem as sor_solve."""
    u = np.array(initial, dtype=float, copy=True)
    free = ~np.asarray(fixed, dtype=bool)
    free[0, :] = free[-1, :] = free[:, 0] = free[:, -1] = False
    n_free = int(free.sum())
    if n_free == 0:
        return SolveResult(u, 0, 0.0, 0.0)

    index = -np.ones(u.shape, dtype=np.int64)
    index[free] = np.arange(n_free)
    fi, fj = np.nonzero(free)
    b = np.zeros(n_free) if rhs is None else -spacing * spacing * np.asarray(rhs, dtype=float)[free]

    rows = [np.arange(n_free)]
    cols = [np.arange(n_free)]
    vals = [np.full(n_free, 4.0)]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = fi + di, fj + dj
        neighbour = index[ni, nj]
        inside = neighbour >= 0
        rows.append(np.arange(n_free)[inside])
        cols.append(neighbour[inside])
        vals.append(-np.ones(int(inside.sum())))
        np.add.at(b, np.arange(n_free)[~inside], u[ni[~inside], nj[~inside]])

    A = sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_free, n_free),
    )
    u[free] = spsolve(A, b)
    residual = _laplace_residual(u, free, spacing, rhs)
    logger.debug(f"Sparse solve on {n_free} unknowns, residual {residual:.2e}")
    return SolveResult(u, 1, 0.0, residual)


def _solve(initial, fixed, spacing, solver: str, tol: Optional[float]) -> SolveResult:
    if solver == "sor":
        return sor_solve(initial, fixed, spacing, tol=tol)
    if solver == "direct":
        return sparse_solve(initial, fixed, spacing)
    raise ValidationError(f"Unknown solver '{solver}' (expected 'sor' or 'direct')")


# ---------------------------------------------------------------------------
# Harmonic extension
# ---------------------------------------------------------------------------

@dataclass
class ExtensionLevel:
    grid: Grid2D
    values: np.ndarray
    sigma: np.ndarray


@dataclass
class HarmonicExtension:
    """xi^Sigma on the working grid plus the coarser far-field levels."""
    field: ScalarField2D
    sigma_mask: np.ndarray
    far_field_value: float
    levels: List[ExtensionLevel] = field(default_factory=list)
    iterations: int = 0
    residual: float = 0.0

    @property
    def grid(self) -> Grid2D:
        return self.field.grid

    def composite_energy(self, exterior_only: bool = False) -> float:
        """Discrete Dirichlet energy sum over faces of (u_a - u_b)^2 on the composite grid.

        The working grid contributes all its faces (only faces touching the
        exterior when ``exterior_only``); each coarser level contributes the
        faces lying outside the next finer box.
        """
        u = self.field.values
        keep_x = np.ones((u.shape[0] - 1, u.shape[1]), dtype=bool)
        keep_y = np.ones((u.shape[0], u.shape[1] - 1), dtype=bool)
        if exterior_only:
            s = self.sigma_mask
            keep_x = ~(s[1:, :] & s[:-1, :])
            keep_y = ~(s[:, 1:] & s[:, :-1])
        energy = float(np.sum(np.diff(u, axis=0)[keep_x] ** 2) + np.sum(np.diff(u, axis=1)[keep_y] ** 2))

        finer = self.grid
        for level in self.levels[1:]:
            xmin, xmax, ymin, ymax = finer.extent
            X, Y = level.grid.mesh()
            outside = (X < xmin) | (X > xmax) | (Y < ymin) | (Y > ymax)
            v = level.values
            ox = outside[1:, :] & outside[:-1, :]
            oy = outside[:, 1:] & outside[:, :-1]
            energy += float(np.sum(np.diff(v, axis=0)[ox] ** 2) + np.sum(np.diff(v, axis=1)[oy] ** 2))
            finer = level.grid
        return energy


def _sample(xi: XiData, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if isinstance(xi, ScalarField2D):
        pts = np.column_stack([X.ravel(), Y.ravel()])
        return xi.interpolate(pts).reshape(X.shape)
    return np.broadcast_to(np.asarray(xi(X, Y), dtype=float), X.shape).copy()


def _lookup_mask(grid: Grid2D, mask: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = grid.contains(pts)
    i, j = grid.cell_index(pts)
    return (mask[i, j] & inside).reshape(X.shape)


def _interp_onto(src_grid: Grid2D, src_values: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    field_ = ScalarField2D(src_grid, src_values)
    return field_.interpolate(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)


def harmonic_extension(
    xi: XiData,
    sigma: np.ndarray,
    grid: Grid2D,
    box_factor: Optional[float] = None,
    solver: str = "sor",
    cycles: int = 2,
    tol: Optional[float] = None,
) -> HarmonicExtension:
    """Bounded harmonic continuation of xi outside the support mask.

    Equal to xi on Sigma. Outside Sigma the discrete Laplace equation is
    solved on nested boxes sharing the working grid's cell count: each
    coarser box doubles spacing and half-width until its diameter reaches
    ``box_factor`` times diam(Sigma). The outermost ring carries the mean of
    xi over the boundary cells of Sigma; inner rings are interpolated from
    the next coarser solution, alternating coarse and fine solves ``cycles``
    times.
    """
    sigma = _mask_on(grid, sigma)
    if not sigma.any():
        raise SupportViolationError("Harmonic extension needs a non-empty support mask")
    ring = np.zeros(grid.shape, dtype=bool)
    ring[:2, :] = ring[-2:, :] = ring[:, :2] = ring[:, -2:] = True
    if (sigma & ring).any():
        raise SupportViolationError("Support mask touches the edge of the working grid")

    box_factor = box_factor or settings.EXTENSION_BOX_FACTOR
    X0, Y0 = grid.mesh()
    data0 = _sample(xi, X0, Y0)
    edge = boundary_cells(sigma)
    far_value = float(np.mean(data0[edge]))
    diam = mask_diameter(grid, sigma)

    xmin, xmax, ymin, ymax = grid.extent
    centre = (0.5 * (xmin + xmax), 0.5 * (ymin + ymax))
    half = 0.5 * max(xmax - xmin, ymax - ymin)
    target_half = 0.5 * box_factor * diam

    levels = [ExtensionLevel(grid, np.full(grid.shape, far_value), sigma)]
    levels[0].values[sigma] = data0[sigma]
    k = 1
    while half * 2 ** (k - 1) < target_half:
        h_k = grid.spacing * 2 ** k
        half_k = half * 2 ** k
        n_k = max(8, int(np.ceil(2.0 * half_k / h_k)))
        g_k = Grid2D.centered(0.5 * n_k * h_k, n_k, centre)
        Xk, Yk = g_k.mesh()
        s_k = _lookup_mask(grid, sigma, Xk, Yk)
        v_k = np.full(g_k.shape, far_value)
        if s_k.any():
            v_k[s_k] = _sample(xi, Xk[s_k], Yk[s_k])
        levels.append(ExtensionLevel(g_k, v_k, s_k))
        k += 1

    total_iterations = 0
    residual = 0.0
    pinned: List[Optional[np.ndarray]] = [None] * len(levels)

    def refresh_pin(idx: int) -> None:
        finer, coarse = levels[idx - 1], levels[idx]
        if pinned[idx] is None:
            fx0, fx1, fy0, fy1 = finer.grid.extent
            margin = 2.0 * coarse.grid.spacing
            Xc, Yc = coarse.grid.mesh()
            pinned[idx] = (Xc > fx0 + margin) & (Xc < fx1 - margin) & (Yc > fy0 + margin) & (Yc < fy1 - margin)
        Xc, Yc = coarse.grid.mesh()
        sel = pinned[idx]
        coarse.values[sel] = _interp_onto(finer.grid, finer.values, Xc[sel], Yc[sel])

    def solve_level(idx: int) -> None:
        nonlocal total_iterations, residual
        level = levels[idx]
        fixed = level.sigma if pinned[idx] is None else level.sigma | pinned[idx]
        result = _solve(level.values, fixed, level.grid.spacing, solver, tol)
        level.values[:] = result.values
        total_iterations += result.iterations
        residual = result.residual

    def ring_from_coarser(idx: int, fill_interior: bool) -> None:
        level, coarser = levels[idx], levels[idx + 1]
        Xl, Yl = level.grid.mesh()
        interp = _interp_onto(coarser.grid, coarser.values, Xl, Yl)
        if fill_interior:
            level.values[~level.sigma] = interp[~level.sigma]
        lring = np.zeros(level.grid.shape, dtype=bool)
        lring[0, :] = lring[-1, :] = lring[:, 0] = lring[:, -1] = True
        level.values[lring] = interp[lring]

    # first pass: coarse to fine, every level sees Sigma at its own resolution
    for idx in range(len(levels) - 1, -1, -1):
        if idx < len(levels) - 1:
            ring_from_coarser(idx, fill_interior=True)
        solve_level(idx)
    # later passes: coarse levels pinned to the finer solution inside the finer box
    for _ in range(max(1, cycles) - 1):
        for idx in range(1, len(levels)):
            refresh_pin(idx)
            solve_level(idx)
        for idx in range(len(levels) - 2, -1, -1):
            ring_from_coarser(idx, fill_interior=False)
            solve_level(idx)

    values = levels[0].values.copy()
    values[sigma] = data0[sigma]
    logger.debug(
        f"Harmonic extension: {len(levels)} levels, outer half-width "
        f"{levels[-1].grid.extent[1] - centre[0]:.3g}, far value {far_value:.4g}"
    )
    return HarmonicExtension(
        field=ScalarField2D(grid, values),
        sigma_mask=sigma,
        far_field_value=far_value,
        levels=levels,
        iterations=total_iterations,
        residual=residual,
    )


# ---------------------------------------------------------------------------
# Neumann jumps and fluxes
# ---------------------------------------------------------------------------

@dataclass
class BoundaryJump:
    """Samples of [d xi^Sigma / dn] (inner minus outer) along the boundary of Sigma."""
    points: np.ndarray
    normals: np.ndarray
    values: np.ndarray
    inner: np.ndarray
    outer: np.ndarray
    weights: np.ndarray
    components: np.ndarray
    flagged: int = 0

    def __iter__(self):
        return iter(zip(map(tuple, self.points), self.values))

    def __len__(self) -> int:
        return len(self.values)

    def nearest(self, point: Tuple[float, float]) -> float:
        """Jump value at the sample closest to the given point."""
        d = np.hypot(self.points[:, 0] - point[0], self.points[:, 1] - point[1])
        return float(self.values[int(np.argmin(d))])


# one-sided derivative at 0 from samples at 2h, 3h, 4h
_ONE_SIDED = np.array([-3.5, 6.0, -2.5])


def boundary_normals(grid: Grid2D, sigma: np.ndarray, smoothing: float = 1.5):
    """Smoothed indicator of Sigma, its gradient and the outward unit normal field."""
    smooth = ndimage.gaussian_filter(sigma.astype(float), sigma=smoothing, mode="constant")
    gx, gy = np.gradient(smooth, grid.spacing, grid.spacing)
    norm = np.hypot(gx, gy)
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(norm > 0, -gx / norm, 0.0)
        ny = np.where(norm > 0, -gy / norm, 0.0)
    return smooth, norm, nx, ny


def neumann_jump(
    xi_ext: Union[ScalarField2D, HarmonicExtension],
    sigma: Optional[np.ndarray] = None,
    inner_gradient: Optional[Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None,
) -> BoundaryJump:
    """Inner minus outer normal derivative of xi^Sigma at the boundary cells of Sigma.

    The outward normal comes from the gradient of the Gaussian-smoothed
    indicator; the boundary point is its 0.5 level crossing along the
    normal. Each one-sided derivative uses samples at 2, 3 and 4 cells from
    the boundary point. ``inner_gradient`` replaces the inner difference by
    the exact gradient of xi when available.
    """
    if isinstance(xi_ext, HarmonicExtension):
        sigma = xi_ext.sigma_mask if sigma is None else sigma
        xi_ext = xi_ext.field
    grid = xi_ext.grid
    sigma = _mask_on(grid, sigma)
    h = grid.spacing

    smooth, norm, nxf, nyf = boundary_normals(grid, sigma)
    edge = boundary_cells(sigma)
    bi, bj = np.nonzero(edge)
    if bi.size == 0:
        raise SupportViolationError("Support mask has no boundary cells")
    X, Y = grid.mesh()
    p0 = np.column_stack([X[bi, bj], Y[bi, bj]])
    normals = np.column_stack([nxf[bi, bj], nyf[bi, bj]])
    resolved = norm[bi, bj] * h > 0.05

    smooth_field = ScalarField2D(grid, smooth)
    taus = np.linspace(-2.0 * h, 2.0 * h, 17)
    levels = np.stack([smooth_field.interpolate(p0 + t * normals) for t in taus], axis=1) - 0.5
    crossing = np.full(bi.size, np.nan)
    for k in range(len(taus) - 1):
        a, b = levels[:, k], levels[:, k + 1]
        hit = np.isnan(crossing) & (a >= 0) & (b < 0)
        frac = np.where(hit, a / np.where(a - b != 0, a - b, 1.0), 0.0)
        crossing[hit] = taus[k] + frac[hit] * (taus[k + 1] - taus[k])
    resolved &= ~np.isnan(crossing)

    flagged = int(np.sum(~resolved))
    if flagged:
        logger.warning(f"neumann_jump: {flagged} boundary cells with ambiguous normals were skipped")
    if not resolved.any():
        raise SupportViolationError("Boundary too poorly resolved to estimate normals",
                                    context={"boundary_cells": int(bi.size)})

    p0, normals, crossing = p0[resolved], normals[resolved], crossing[resolved]
    bi, bj = bi[resolved], bj[resolved]
    points = p0 + crossing[:, None] * normals

    inside = np.stack([xi_ext.interpolate(points - k * h * normals) for k in (2, 3, 4)], axis=1)
    outside = np.stack([xi_ext.interpolate(points + k * h * normals) for k in (2, 3, 4)], axis=1)
    if inner_gradient is not None:
        gx, gy = inner_gradient(points[:, 0], points[:, 1])
        inner = np.asarray(gx) * normals[:, 0] + np.asarray(gy) * normals[:, 1]
    else:
        inner = -(inside @ _ONE_SIDED) / h
    outer = (outside @ _ONE_SIDED) / h

    labels, count = label_components(sigma)
    components = labels[bi, bj]
    weights = np.zeros(points.shape[0])
    for c in range(1, count + 1):
        sel_cells = labels == c
        band = ndimage.binary_dilation(sel_cells, iterations=4) & (norm > 0)
        perimeter = float(np.sum(norm[band]) * grid.cell_area)
        n_c = int(np.sum(components == c))
        if n_c:
            weights[components == c] = perimeter / n_c

    return BoundaryJump(
        points=points, normals=normals, values=inner - outer, inner=inner, outer=outer,
        weights=weights, components=components, flagged=flagged,
    )


def component_fluxes(u: ScalarField2D, sigma: np.ndarray) -> np.ndarray:
    """Outward flux of u across the faces of each connected component of Sigma.

    For each face between a component cell and an exterior cell the
    discrete normal derivative (u_out - u_in)/h times the face length h is
    summed, i.e. the discrete integral of du/dn over the component boundary.
    """
    sigma = _mask_on(u.grid, sigma)
    labels, count = label_components(sigma)
    v = u.values
    fluxes = np.zeros(count)
    lo, hi, every = slice(0, -1), slice(1, None), slice(None)
    for inner_sl, outer_sl in (
        ((lo, every), (hi, every)),
        ((hi, every), (lo, every)),
        ((every, lo), (every, hi)),
        ((every, hi), (every, lo)),
    ):
        lab_in, lab_out = labels[inner_sl], labels[outer_sl]
        face = (lab_in > 0) & (lab_out == 0)
        np.add.at(fluxes, lab_in[face] - 1, (v[outer_sl] - v[inner_sl])[face])
    return fluxes


# ---------------------------------------------------------------------------
# Dirichlet energies
# ---------------------------------------------------------------------------

def dirichlet_energy(f: ScalarField2D, region: Optional[np.ndarray] = None) -> float:
    """Integral of |grad f|^2 with centred differences and the midpoint rule."""
    h = f.grid.spacing
    gx, gy = np.gradient(f.values, h, h, edge_order=2)
    integrand = gx * gx + gy * gy
    if region is not None:
        integrand = np.where(_mask_on(f.grid, region), integrand, 0.0)
    return float(integrand.sum() * f.grid.cell_area)
