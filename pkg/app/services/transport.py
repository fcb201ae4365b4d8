"""
Approximate transport maps and what they move.

psi pushes mu0 towards the perturbed equilibrium: phi_t = Id + (t/beta) psi.
Interior case: psi = grad(xi) / (2 pi mu0). Boundary case: psi = grad u on
Sigma where div(mu0 grad u) = lap(xi) / 2pi with Neumann data
[grad xi^Sigma].n / (2 pi mu0), continued outside Sigma along grad zeta0.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, sparse
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import cg

from app.core.config import settings
from app.core.exceptions import (
    AssumptionViolation,
    ConvergenceError,
    InvertibilityError,
    SupportViolationError,
    ValidationError,
)
from app.core.logging import get_logger
from app.core.utils import write_json
from app.models.fields import Grid2D, Measure2D, ScalarField2D, VectorField2D
from app.models.functions import TestFunction
from app.models.points import Configuration, TruncationVector
from app.services import field_grid
from app.services.energy import circle_average, next_order_energy, nn_truncation, truncated_field_gradient
from app.services.equilibrium import EquilibriumData, is_interior, perturbed_equilibrium
from app.services.library import smoothstep7

logger = get_logger("transport")

IDENTITY = np.eye(2)


# ---------------------------------------------------------------------------
# Transport maps
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TransportMap:
    """A vector field psi on a grid with cubic-spline evaluation off the grid.

    Cells where psi vanishes on a three-cell neighbourhood are treated as
    exactly identity (psi = 0, D psi = 0) so the spline's ringing never
    leaks into them.
    """
    psi: VectorField2D
    region: Optional[np.ndarray] = None
    residual: Optional[float] = None
    kind: str = "field"
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_field(cls, psi: VectorField2D, region: Optional[np.ndarray] = None, **meta) -> "TransportMap":
        return cls(psi=psi, region=region, meta=meta)

    @classmethod
    def from_function(cls, grid: Grid2D, func, region: Optional[np.ndarray] = None) -> "TransportMap":
        return cls.from_field(VectorField2D.from_function(grid, func), region)

    @property
    def grid(self) -> Grid2D:
        return self.psi.grid

    @cached_property
    def _splines(self) -> Tuple[RectBivariateSpline, RectBivariateSpline]:
        g = self.grid
        return (
            RectBivariateSpline(g.x, g.y, self.psi.x, kx=3, ky=3),
            RectBivariateSpline(g.x, g.y, self.psi.y, kx=3, ky=3),
        )

    @cached_property
    def identity_cells(self) -> np.ndarray:
        zero = np.all(self.psi.values == 0.0, axis=-1)
        return ndimage.binary_erosion(zero, iterations=3, border_value=1)

    def _active(self, points: np.ndarray) -> np.ndarray:
        inside = self.grid.contains(points)
        i, j = self.grid.cell_index(points)
        return inside & ~self.identity_cells[i, j]

    def at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        act = self._active(pts)
        if act.any():
            sx, sy = self._splines
            out[act, 0] = sx.ev(pts[act, 0], pts[act, 1])
            out[act, 1] = sy.ev(pts[act, 0], pts[act, 1])
        return out

    def jacobian_at(self, points: np.ndarray) -> np.ndarray:
        """D psi at points, J[k, a, b] = d psi_a / d x_b."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        J = np.zeros((pts.shape[0], 2, 2))
        act = self._active(pts)
        if act.any():
            x, y = pts[act, 0], pts[act, 1]
            for a, spline in enumerate(self._splines):
                J[act, a, 0] = spline.ev(x, y, dx=1, dy=0)
                J[act, a, 1] = spline.ev(x, y, dx=0, dy=1)
        return J

    def divergence_at(self, points: np.ndarray) -> np.ndarray:
        J = self.jacobian_at(points)
        return J[:, 0, 0] + J[:, 1, 1]

    # norms -------------------------------------------------------------
    @cached_property
    def jacobian(self) -> np.ndarray:
        return self.psi.jacobian()

    @property
    def sup(self) -> float:
        return float(np.max(self.psi.norm()))

    @property
    def lipschitz(self) -> float:
        """max over cells of the operator norm of the grid Jacobian."""
        return float(np.max(np.linalg.norm(self.jacobian, ord=2, axis=(-2, -1))))

    @property
    def c01_norm(self) -> float:
        return self.sup + self.lipschitz

    @property
    def c11_norm(self) -> float:
        h = self.grid.spacing
        second = 0.0
        for a in range(2):
            for b in range(2):
                gx, gy = np.gradient(self.jacobian[..., a, b], h, h)
                second = max(second, float(np.max(np.hypot(gx, gy))))
        return self.c01_norm + second

    def lipschitz_estimate(self) -> float:
        """Largest difference quotient between neighbouring cells (axis and diagonal)."""
        v = self.psi.values
        h = self.grid.spacing
        quotients = [
            np.linalg.norm(v[1:, :] - v[:-1, :], axis=-1) / h,
            np.linalg.norm(v[:, 1:] - v[:, :-1], axis=-1) / h,
            np.linalg.norm(v[1:, 1:] - v[:-1, :-1], axis=-1) / (np.sqrt(2) * h),
            np.linalg.norm(v[1:, :-1] - v[:-1, 1:], axis=-1) / (np.sqrt(2) * h),
        ]
        return float(max(np.max(q) for q in quotients))

    def ttilde_max(self, beta: float) -> float:
        c = self.c01_norm
        return np.inf if c == 0 else float(beta / (2.0 * c))

    # the map phi = Id + step psi ----------------------------------------
    def phi(self, points: np.ndarray, step: float) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + step * self.at(pts)

    def invert(self, targets: np.ndarray, step: float, tol: Optional[float] = None) -> np.ndarray:
        """Newton iteration for x + step psi(x) = y, started at x = y."""
        y = np.atleast_2d(np.asarray(targets, dtype=float))
        x = y.copy()
        if step == 0:
            return x
        tol = tol if tol is not None else 1e-12 * self.grid.spacing
        for _ in range(settings.NEWTON_MAX_ITERS):
            F = x + step * self.at(x) - y
            err = float(np.max(np.abs(F))) if F.size else 0.0
            if err <= tol:
                return x
            J = IDENTITY + step * self.jacobian_at(x)
            x = x - np.linalg.solve(J, F[..., None])[..., 0]
        raise InvertibilityError(
            f"Newton inversion did not converge in {settings.NEWTON_MAX_ITERS} iterations",
            context={"residual": err, "step": step},
        )

    def summary(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "sup": self.sup,
            "lipschitz": self.lipschitz,
            "lipschitz_estimate": self.lipschitz_estimate(),
            "c01_norm": self.c01_norm,
            "c11_norm": self.c11_norm,
            "residual": self.residual,
            **self.meta,
        }

    def save(self, directory: Union[str, Path], beta: Optional[float] = None) -> Dict[str, Path]:
        directory = Path(directory)
        files = {"psi": self.psi.save(directory / "psi.bin")}
        manifest = self.summary()
        if beta is not None:
            manifest["ttilde_max"] = self.ttilde_max(beta)
        files["manifest"] = write_json(directory / "transport.json", manifest)
        return files


# ---------------------------------------------------------------------------
# Interior construction
# ---------------------------------------------------------------------------

def _weak_test_functions():
    def gaussian(cx, cy, w):
        def phi(x, y):
            return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))

        def grad(x, y):
            v = phi(x, y)
            return -(x - cx) / (w * w) * v, -(y - cy) / (w * w) * v

        return phi, grad

    return [gaussian(0.0, 0.0, 0.35), gaussian(0.3, 0.1, 0.25), gaussian(-0.2, -0.3, 0.3)]


def build_psi_interior(xi: TestFunction, eq: EquilibriumData) -> TransportMap:
    """psi = grad(xi) / (2 pi mu0) on supp xi, zero elsewhere."""
    if not is_interior(xi, eq):
        raise SupportViolationError(f"{xi.name} is not supported inside Sigma", context={"test_function": xi.name})
    grid = eq.grid
    X, Y = grid.mesh()
    support = xi.support_mask(X, Y, pad=grid.spacing)
    mu = eq.mu0.values
    if np.any(mu[support] <= 0):
        raise AssumptionViolation("mu0 vanishes on the support of xi", context={"test_function": xi.name})
    gx, gy = xi.grad(X, Y)
    denom = 2.0 * np.pi * np.where(support, mu, 1.0)
    psi = VectorField2D(grid, np.stack([np.where(support, gx / denom, 0.0),
                                        np.where(support, gy / denom, 0.0)], axis=-1))

    # weak form of div(mu0 psi) = lap(xi) / 2pi against smooth test functions
    flux = VectorField2D(grid, psi.values * mu[..., None])
    div = flux.divergence()
    lap = np.asarray(xi.lap(X, Y), dtype=float)
    errors, scales = [], []
    for phi, _ in _weak_test_functions():
        p = phi(X, Y)
        lhs = float(np.sum(p * div) * grid.cell_area)
        rhs = float(np.sum(p * lap) * grid.cell_area) / (2.0 * np.pi)
        errors.append(abs(lhs - rhs))
        scales.append(abs(rhs))
    residual = max(errors) / max(max(scales), 1e-12)

    norms = xi.seminorms()
    tm = TransportMap(psi=psi, region=support, residual=residual, kind="interior")
    tm.meta.update({
        "test_function": xi.name,
        "C0": tm.sup / norms["grad"] if norms["grad"] else 0.0,
        "C1": tm.lipschitz / norms["hess"] if norms["hess"] else 0.0,
    })
    logger.debug(f"interior psi for {xi.name}: sup {tm.sup:.4g}, Lip {tm.lipschitz:.4g}, weak residual {residual:.2e}")
    return tm


# ---------------------------------------------------------------------------
# Boundary construction
# ---------------------------------------------------------------------------

def _masked_derivative(u: np.ndarray, mask: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Derivative along ``axis`` using only cells of ``mask`` (central, else one-sided)."""
    up = np.moveaxis(u, axis, 0)
    mp = np.moveaxis(mask, axis, 0)
    nxt = np.zeros_like(up)
    prv = np.zeros_like(up)
    nxt[:-1], prv[1:] = up[1:], up[:-1]
    has_next = np.zeros_like(mp)
    has_prev = np.zeros_like(mp)
    has_next[:-1] = mp[:-1] & mp[1:]
    has_prev[1:] = mp[1:] & mp[:-1]
    d = np.where(has_next & has_prev, (nxt - prv) / (2 * h),
                 np.where(has_next, (nxt - up) / h, np.where(has_prev, (up - prv) / h, 0.0)))
    return np.moveaxis(np.where(mp, d, 0.0), 0, axis)


def _boundary_faces(sigma: np.ndarray):
    """Faces between a Sigma cell and an exterior cell: (axis, sign, inner index arrays)."""
    for axis in (0, 1):
        for sign in (1, -1):
            shifted = np.roll(sigma, -sign, axis=axis)
            edge = np.zeros_like(sigma)
            if axis == 0:
                sl = slice(0, -1) if sign == 1 else slice(1, None)
                edge[sl, :] = True
            else:
                sl = slice(0, -1) if sign == 1 else slice(1, None)
                edge[:, sl] = True
            face = sigma & ~shifted & edge
            yield axis, sign, np.nonzero(face)


def _neumann_solve(xi: TestFunction, eq: EquilibriumData, ext: field_grid.HarmonicExtension) -> np.ndarray:
    """Finite-volume solve of div(mu0 grad u) = lap(xi)/2pi with the jump Neumann data."""
    grid = eq.grid
    h = grid.spacing
    sigma = eq.sigma_mask
    mu = eq.mu0.values
    X, Y = grid.mesh()
    idx = -np.ones(grid.shape, dtype=int)
    n = int(sigma.sum())
    idx[sigma] = np.arange(n)

    rows, cols, vals = [], [], []
    for a, b in (((slice(0, -1), slice(None)), (slice(1, None), slice(None))),
                 ((slice(None), slice(0, -1)), (slice(None), slice(1, None)))):
        pair = sigma[a] & sigma[b]
        ia, ib = idx[a][pair], idx[b][pair]
        w = 0.5 * (mu[a][pair] + mu[b][pair])
        rows += [ia, ib, ia, ib]
        cols += [ia, ib, ib, ia]
        vals += [w, w, -w, -w]
    A = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()

    lap = np.asarray(xi.lap(X, Y), dtype=float)
    rhs = np.zeros(grid.shape)
    rhs[sigma] = -h * h * lap[sigma] / (2.0 * np.pi)
    ext_vals = ext.field.values
    for axis, sign, (ii, jj) in _boundary_faces(sigma):
        step = np.array([sign, 0]) if axis == 0 else np.array([0, sign])
        oi, oj = ii + step[0], jj + step[1]
        fx = X[ii, jj] + 0.5 * h * step[0]
        fy = Y[ii, jj] + 0.5 * h * step[1]
        gx, gy = xi.grad(fx, fy)
        inner = np.asarray(gx if axis == 0 else gy, dtype=float) * sign
        # outer one-sided derivative at the face from the first two exterior differences
        o2i = np.clip(oi + step[0], 0, grid.nx - 1)
        o2j = np.clip(oj + step[1], 0, grid.ny - 1)
        o3i = np.clip(oi + 2 * step[0], 0, grid.nx - 1)
        o3j = np.clip(oj + 2 * step[1], 0, grid.ny - 1)
        d1 = (ext_vals[o2i, o2j] - ext_vals[oi, oj]) / h
        d2 = (ext_vals[o3i, o3j] - ext_vals[o2i, o2j]) / h
        clear = ~sigma[o2i, o2j] & ~sigma[o3i, o3j]
        outer = np.where(clear, 2.0 * d1 - d2, d1)
        g = (inner - outer) / (2.0 * np.pi)
        np.add.at(rhs, (ii, jj), h * g)

    labels, count = ndimage.label(sigma)
    b = rhs[sigma]
    comp = labels[sigma]
    for c in range(1, count + 1):
        sel = comp == c
        b[sel] -= b[sel].mean()
    diag = A.diagonal()
    M = sparse.diags(1.0 / np.where(diag > 0, diag, 1.0))
    u, info = cg(A, b, rtol=settings.CG_TOL, atol=0.0, maxiter=20 * n, M=M)
    if info != 0:
        raise ConvergenceError("Neumann solve did not converge", context={"cg_info": int(info), "unknowns": n})
    for c in range(1, count + 1):
        sel = comp == c
        u[sel] -= u[sel].mean()
    out = np.zeros(grid.shape)
    out[sigma] = u
    return out


def build_psi_boundary(
    xi: TestFunction,
    eq: EquilibriumData,
    compat_tol: float = 5e-2,
    ext: Optional[field_grid.HarmonicExtension] = None,
) -> TransportMap:
    """Transport for test functions meeting the edge of Sigma.

    Outside Sigma psi = (xi - xi^Sigma) grad zeta0 / |grad zeta0|^2 plus the
    tangential trace of the interior psi carried along the normal; within
    two cells of the boundary the normal part uses the limit
    2 (xi - xi^Sigma) / (lap V d). A smoothstep cutoff ends psi at twice
    0.2 diam(Sigma) from Sigma.
    """
    grid = eq.grid
    h = grid.spacing
    sigma = eq.sigma_mask
    ext = ext or field_grid.harmonic_extension(xi, sigma, grid)
    fluxes = field_grid.component_fluxes(ext.field, sigma)
    scale = max(1.0, float(np.max(np.abs(ext.field.values))))
    if fluxes.size > 1 and np.any(np.abs(fluxes) > compat_tol * scale):
        raise AssumptionViolation(
            "Compatibility integrals do not vanish on every component of Sigma",
            context={"fluxes": fluxes.tolist()},
        )

    u = _neumann_solve(xi, eq, ext)
    inside = np.stack([_masked_derivative(u, sigma, h, 0), _masked_derivative(u, sigma, h, 1)], axis=-1)

    X, Y = grid.mesh()
    exterior = ~sigma
    gap = np.asarray(xi(X, Y), dtype=float) - ext.field.values
    dist, (ni, nj) = ndimage.distance_transform_edt(exterior, return_indices=True)
    dist = dist * h
    zx, zy = np.gradient(eq.zeta0.values, h, h)
    zn2 = zx * zx + zy * zy
    _, _, bnx, bny = field_grid.boundary_normals(grid, sigma)
    lap_v = np.asarray(eq.potential.lapV(X, Y), dtype=float) * np.ones(grid.shape)

    near = exterior & (dist <= 2.0 * h + 1e-12)
    far = exterior & ~near & (zn2 > 0)
    nx = np.where(near, bnx, np.where(far, zx / np.sqrt(np.where(zn2 > 0, zn2, 1.0)), 0.0))
    ny = np.where(near, bny, np.where(far, zy / np.sqrt(np.where(zn2 > 0, zn2, 1.0)), 0.0))

    normal = np.zeros(grid.shape)
    d_face = np.maximum(dist - 0.5 * h, 0.5 * h)
    normal[near] = 2.0 * gap[near] / (np.where(lap_v[near] > 0, lap_v[near], 1.0) * d_face[near])
    normal[far] = gap[far] / np.sqrt(zn2[far])

    trace = inside[ni, nj]
    t_dot = trace[..., 0] * nx + trace[..., 1] * ny
    tang_x = trace[..., 0] - t_dot * nx
    tang_y = trace[..., 1] - t_dot * ny

    d1 = 0.2 * field_grid.mask_diameter(grid, sigma)
    chi = 1.0 - smoothstep7((dist - d1) / d1)[0]
    out_x = chi * (normal * nx + tang_x)
    out_y = chi * (normal * ny + tang_y)
    psi = VectorField2D(grid, np.stack([np.where(sigma, inside[..., 0], np.where(exterior, out_x, 0.0)),
                                        np.where(sigma, inside[..., 1], np.where(exterior, out_y, 0.0))], axis=-1))

    residual = weak_identity_residual(psi, eq, ext, xi)
    tm = TransportMap(psi=psi, region=None, residual=residual, kind="boundary",
                      meta={"test_function": xi.name, "component_fluxes": fluxes.tolist()})
    logger.debug(f"boundary psi for {xi.name}: weak residual {residual:.2e}, sup {tm.sup:.4g}")
    return tm


def weak_identity_residual(
    psi: VectorField2D,
    eq: EquilibriumData,
    ext: field_grid.HarmonicExtension,
    xi: TestFunction,
) -> float:
    """max over test functions of |int grad phi . mu0 psi 1_Sigma - (1/2pi) int grad phi . grad xi^Sigma|, relative."""
    grid = eq.grid
    h = grid.spacing
    sigma = eq.sigma_mask
    X, Y = grid.mesh()
    ex, ey = np.gradient(ext.field.values, h, h)
    gx, gy = xi.grad(X, Y)
    ex = np.where(sigma, gx, ex)
    ey = np.where(sigma, gy, ey)
    mu = eq.mu0.values
    errors, scales = [], []
    for _, grad in _weak_test_functions():
        px, py = grad(X, Y)
        lhs = float(np.sum(np.where(sigma, (px * psi.x + py * psi.y) * mu, 0.0)) * grid.cell_area)
        rhs = float(np.sum(px * ex + py * ey) * grid.cell_area) / (2.0 * np.pi)
        errors.append(abs(lhs - rhs))
        scales.append(abs(rhs))
    return max(errors) / max(max(scales), 1e-12)


@dataclass
class BoundaryRho:
    points: np.ndarray
    normals: np.ndarray
    rho: np.ndarray
    weights: np.ndarray

    def at_angle(self, centre: Tuple[float, float], theta: float) -> float:
        ang = np.arctan2(self.points[:, 1] - centre[1], self.points[:, 0] - centre[0])
        order = np.argsort(ang)
        ang, vals = ang[order], self.rho[order]
        return float(np.interp(theta, np.concatenate([ang - 2 * np.pi, ang, ang + 2 * np.pi]), np.tile(vals, 3)))


def boundary_rho(xi: TestFunction, eq: EquilibriumData,
                 ext: Optional[field_grid.HarmonicExtension] = None) -> BoundaryRho:
    """rho = 2 [grad xi^Sigma].n / lap V sampled along the boundary of Sigma."""
    ext = ext or field_grid.harmonic_extension(xi, eq.sigma_mask, eq.grid)
    jump = field_grid.neumann_jump(ext, inner_gradient=xi.grad)
    lap_v = eq.potential.lapV(jump.points[:, 0], jump.points[:, 1]) * np.ones(len(jump))
    if np.any(lap_v <= 0):
        raise AssumptionViolation("lap V must be positive on the boundary of Sigma")
    return BoundaryRho(points=jump.points, normals=jump.normals, rho=2.0 * jump.values / lap_v, weights=jump.weights)


def boundary_displacement_check(xi: TestFunction, eq: EquilibriumData, t: float, beta: float) -> Dict[str, Any]:
    """First moment of mu_t - mu0 from a re-solve against the first-order prediction.

    Prediction: int_{dSigma} x mu0 (t/beta) rho ds - (t/(2 pi beta)) int_Sigma x lap(xi).
    """
    rho = boundary_rho(xi, eq)
    mu_edge = eq.potential.lapV(rho.points[:, 0], rho.points[:, 1]) * np.ones(len(rho.rho)) / (4.0 * np.pi)
    edge = (t / beta) * np.sum((rho.points * (mu_edge * rho.rho * rho.weights)[:, None]), axis=0)
    grid = eq.grid
    X, Y = grid.mesh()
    lap = np.asarray(xi.lap(X, Y), dtype=float) * eq.sigma_mask
    bulk = -(t / (2.0 * np.pi * beta)) * np.array([np.sum(X * lap), np.sum(Y * lap)]) * grid.cell_area
    predicted = edge + bulk

    pert = perturbed_equilibrium(eq, xi, t, beta)
    measured = np.array([pert.mu_t.integrate(X) - eq.mu0.integrate(X), pert.mu_t.integrate(Y) - eq.mu0.integrate(Y)])
    err = float(np.linalg.norm(measured - predicted) / max(np.linalg.norm(predicted), 1e-300))
    return {"predicted": predicted.tolist(), "measured": measured.tolist(), "relative_error": err}


# ---------------------------------------------------------------------------
# Push-forward and the approximate family
# ---------------------------------------------------------------------------

def _lookup(mu: Measure2D, points: np.ndarray) -> np.ndarray:
    inside = mu.grid.contains(points)
    i, j = mu.grid.cell_index(points)
    return np.where(inside, mu.values[i, j], 0.0)


def pushforward(mu: Measure2D, tm: TransportMap, step: float, grid: Optional[Grid2D] = None,
                mass_tol: Optional[float] = None) -> Measure2D:
    """phi#mu with phi = Id + step psi, sampled at cell centres of ``grid``.

    density(y) = mu(x) / det(I + step D psi(x)), x = phi^{-1}(y). Mass carried off the
    grid is logged; with ``mass_tol`` it raises InvertibilityError instead.
    """
    if step == 0 or tm.sup == 0:
        return mu
    grid = grid or mu.grid
    y = grid.centers()
    x = tm.invert(y, step)
    det = np.linalg.det(IDENTITY + step * tm.jacobian_at(x))
    if np.any(det <= 0):
        raise InvertibilityError("Jacobian determinant of phi_t is not positive", context={"min_det": float(det.min())})
    density = (_lookup(mu, x) / det).reshape(grid.shape)
    pushed = Measure2D.from_density(grid, density, density > 0)
    mass = pushed.mass()
    defect = abs(mass - mu.mass())
    if mass_tol is not None and defect > mass_tol:
        raise InvertibilityError("push-forward lost mass off the grid",
                                 context={"mass": mass, "expected": mu.mass(), "mass_tol": mass_tol})
    if defect > settings.MASS_TOL:
        logger.warning(f"push-forward mass {mass:.9f} differs from {mu.mass():.9f}")
    return pushed


@dataclass
class ApproxFamily:
    t: float
    beta: float
    map: TransportMap
    mu_tilde: Measure2D
    zeta_tilde: ScalarField2D
    ttilde_max: float
    mass_defect: float = 0.0

    @property
    def step(self) -> float:
        return self.t / self.beta

    def phi_t(self, points: np.ndarray) -> np.ndarray:
        return self.map.phi(points, self.step)

    def save(self, directory: Union[str, Path]) -> Dict[str, Path]:
        directory = Path(directory)
        files = self.map.save(directory, self.beta)
        files["mu_tilde"] = self.mu_tilde.density.save(directory / "mu_tilde.bin")
        files["zeta_tilde"] = self.zeta_tilde.save(directory / "zeta_tilde.bin")
        files["family"] = write_json(directory / "family.json", {
            "t": self.t, "beta": self.beta, "ttilde_max": self.ttilde_max, "mass": self.mu_tilde.mass(),
            "mass_defect": self.mass_defect,
        })
        return files


def approximate_family(tm: TransportMap, eq: EquilibriumData, t: float, beta: float) -> ApproxFamily:
    """mu_tilde_t = phi_t # mu0 and zeta_tilde_t = zeta0 o phi_t^{-1}."""
    tt = tm.ttilde_max(beta)
    if abs(t) > tt * (1 + 1e-12):
        raise AssumptionViolation("|t| exceeds ttilde_max", context={"t": t, "ttilde_max": tt})
    step = t / beta
    mu_tilde = pushforward(eq.mu0, tm, step)
    if step == 0:
        zeta = eq.zeta0
    else:
        x = tm.invert(eq.grid.centers(), step)
        zeta = ScalarField2D(eq.grid, eq.zeta0.interpolate(x).reshape(eq.grid.shape))
    return ApproxFamily(t=t, beta=beta, map=tm, mu_tilde=mu_tilde, zeta_tilde=zeta, ttilde_max=tt,
                        mass_defect=abs(mu_tilde.mass() - eq.mu0.mass()))


def _orders(errors: Sequence[float], floor: float = 1e-12):
    out = []
    for a, b in zip(errors[:-1], errors[1:]):
        out.append(float(np.log2(a / b)) if a > floor and b > floor else None)
    return out


def approximation_orders(
    tm: TransportMap,
    eq: EquilibriumData,
    xi: TestFunction,
    beta: float,
    ts: Sequence[float],
    annulus: float = 0.3,
) -> Dict[str, Any]:
    """sup-norm errors of mu_tilde_t against mu_t and zeta_tilde_t against zeta_t along a halving sequence.

    mu is compared on cells at least three cells inside Sigma and Sigma_t;
    zeta on the exterior annulus 3h <= d(x, Sigma u Sigma_t) <= ``annulus``.
    """
    grid = eq.grid
    h = grid.spacing
    mu_err, zeta_err = [], []
    for t in ts:
        fam = approximate_family(tm, eq, t, beta)
        pert = perturbed_equilibrium(eq, xi, t, beta)
        target_mu = pert.mu_bar_t.values if pert.is_interior_regime else pert.mu_t.values
        both = eq.sigma_mask & pert.sigma_mask
        core = ndimage.binary_erosion(both, iterations=3)
        mu_err.append(float(np.max(np.abs(fam.mu_tilde.values - target_mu)[core])) if core.any() else np.nan)
        union = eq.sigma_mask | pert.sigma_mask
        d = field_grid.distance_to_mask(union, h)
        ring = (d >= 3 * h) & (d <= annulus)
        zeta_err.append(float(np.max(np.abs(fam.zeta_tilde.values - pert.zeta_t.values)[ring])) if ring.any() else np.nan)
    return {"t": list(ts), "mu_errors": mu_err, "zeta_errors": zeta_err,
            "mu_orders": _orders(mu_err), "zeta_orders": _orders(zeta_err)}


# ---------------------------------------------------------------------------
# Anisotropy and transported fields
# ---------------------------------------------------------------------------

@dataclass
class AnisotropyResult:
    value: float
    s: float
    region: np.ndarray
    trace_defect: float


def anisotropy_matrix(tm: TransportMap) -> np.ndarray:
    """2 D psi - (div psi) I per cell; trace free."""
    J = tm.jacobian
    div = J[..., 0, 0] + J[..., 1, 1]
    A = 2.0 * J
    A[..., 0, 0] -= div
    A[..., 1, 1] -= div
    return A


def anisotropy(
    tm: TransportMap,
    X: Configuration,
    mu: Measure2D,
    s: float,
    region: Optional[np.ndarray] = None,
) -> AnisotropyResult:
    """(1/2pi) int_U <grad H, A grad H> for H truncated at s r(x_i)."""
    if not 0 < s < 0.5:
        raise ValidationError("Truncation parameter s must lie in (0, 1/2)", context={"s": s})
    grid = tm.grid
    region = np.ones(grid.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    eta = nn_truncation(X).scaled(s)
    g = truncated_field_gradient(X, mu, eta, grid)
    A = anisotropy_matrix(tm)
    gx, gy = g[..., 0], g[..., 1]
    quad = gx * (A[..., 0, 0] * gx + A[..., 0, 1] * gy) + gy * (A[..., 1, 0] * gx + A[..., 1, 1] * gy)
    value = float(np.sum(np.where(region, quad, 0.0)) * grid.cell_area / (2.0 * np.pi))
    trace = float(np.max(np.abs(A[..., 0, 0] + A[..., 1, 1])))
    return AnisotropyResult(value=value, s=s, region=region, trace_defect=trace)


def anisotropy_sweep(
    tm: TransportMap,
    X: Configuration,
    mu: Measure2D,
    s_values: Sequence[float] = (0.1, 0.25, 0.4),
    region: Optional[np.ndarray] = None,
) -> Dict[float, float]:
    return {float(s): anisotropy(tm, X, mu, s, region).value for s in s_values}


def _gradient_at(source, points: np.ndarray, grid: Grid2D) -> np.ndarray:
    if isinstance(source, ScalarField2D):
        return source.gradient().interpolate(points)
    X, mu, eta = source
    h_grad = field_grid.log_potential(mu, grid).gradient()
    g = -X.N * h_grad.interpolate(points)
    for (px, py), e in zip(X.points, eta.eta):
        dx, dy = points[:, 0] - px, points[:, 1] - py
        r2 = dx * dx + dy * dy
        k = np.where(r2 > e * e, 1.0 / np.where(r2 > 0, r2, 1.0), 0.0)
        g[:, 0] -= k * dx
        g[:, 1] -= k * dy
    return g


def transported_field(
    source: Union[ScalarField2D, Tuple[Configuration, Measure2D, TruncationVector]],
    tm: TransportMap,
    step: float,
    grid: Optional[Grid2D] = None,
) -> VectorField2D:
    """Divergence-preserving transport of grad H by phi = Id + step psi.

    E(y) = D phi(x) grad H(x) / det D phi(x) with x = phi^{-1}(y), so that
    int grad f . E = int grad(f o phi) . grad H for every test function f.
    """
    grid = grid or tm.grid
    y = grid.centers()
    x = tm.invert(y, step)
    g = _gradient_at(source, x, grid)
    if step == 0:
        return VectorField2D(grid, g.reshape(grid.shape + (2,)))
    J = IDENTITY + step * tm.jacobian_at(x)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise InvertibilityError("Jacobian determinant of phi is not positive")
    E = np.einsum("kab,kb->ka", J, g) / det[:, None]
    return VectorField2D(grid, E.reshape(grid.shape + (2,)))


def transported_divergence_check(
    E: VectorField2D,
    X: Configuration,
    mu: Measure2D,
    eta: TruncationVector,
    tm: TransportMap,
    step: float,
) -> Dict[str, Any]:
    """Weak form int grad f . E = 2pi (sum_i avg_{circle i} f o phi - N int f o phi dmu) for three f."""
    grid = E.grid
    Xg, Yg = grid.mesh()
    Xm, Ym = mu.grid.mesh()
    mu_pts = np.column_stack([Xm.ravel(), Ym.ravel()])
    moved = tm.phi(mu_pts, step)
    rows = []
    for phi, grad in _weak_test_functions():
        fx, fy = grad(Xg, Yg)
        lhs = float(np.sum(fx * E.x + fy * E.y) * grid.cell_area)

        def pulled(x, y, phi=phi):
            p = tm.phi(np.column_stack([np.ravel(x), np.ravel(y)]), step)
            return phi(p[:, 0], p[:, 1])

        charges = sum(circle_average(pulled, p, e) for p, e in zip(X.points, eta.eta))
        background = X.N * mu.integrate(phi(moved[:, 0], moved[:, 1]).reshape(mu.grid.shape))
        rhs = 2.0 * np.pi * (charges - background)
        rows.append({"lhs": lhs, "rhs": rhs, "relative_error": abs(lhs - rhs) / max(abs(rhs), 1e-12)})
    return {"tests": rows, "max_relative_error": max(r["relative_error"] for r in rows)}


# ---------------------------------------------------------------------------
# Energy comparison under transport
# ---------------------------------------------------------------------------

def energy_transport_check(
    X: Configuration,
    mu: Measure2D,
    tm: TransportMap,
    t: float,
    beta: float,
    s: float = 0.25,
    region: Optional[np.ndarray] = None,
) -> Dict[str, float]:
    """F_N(phi_t(X), phi_t # mu) - F_N(X, mu) against (t/beta) A_s + (t/(2 beta)) sum_i div psi(x_i)."""
    step = t / beta
    if abs(step) * tm.c01_norm > 0.5:
        raise AssumptionViolation("t |psi|_C01 / beta exceeds 1/2", context={"t": t, "c01": tm.c01_norm})
    region = region if region is not None else tm.region
    if step == 0 or tm.sup == 0:
        return {"t": t, "lhs": 0.0, "rhs": 0.0, "anisotropy": 0.0, "divergence_sum": 0.0, "residual": 0.0}
    Y = Configuration(tm.phi(X.points, step))
    nu = pushforward(mu, tm, step)
    lhs = next_order_energy(Y, nu).FN - next_order_energy(X, mu).FN
    ani = anisotropy(tm, X, mu, s, region).value
    div = tm.divergence_at(X.points)
    if region is not None:
        i, j = tm.grid.cell_index(X.points)
        div = np.where(tm.grid.contains(X.points) & region[i, j], div, 0.0)
    div_sum = float(np.sum(div))
    rhs = step * ani + 0.5 * step * div_sum
    return {"t": t, "lhs": lhs, "rhs": rhs, "anisotropy": ani, "divergence_sum": div_sum, "residual": lhs - rhs}


def energy_transport_study(
    X: Configuration,
    mu: Measure2D,
    tm: TransportMap,
    beta: float,
    ts: Sequence[float],
    s: float = 0.25,
    region: Optional[np.ndarray] = None,
) -> Dict[str, Any]:
    """Residuals r(t) over a halving sequence; the order in t is fitted on d(t) = r(t) - 2 r(t/2)."""
    ts = sorted(float(t) for t in ts)
    rows = {t: energy_transport_check(X, mu, tm, t, beta, s, region) for t in ts}
    r = {t: rows[t]["residual"] for t in ts}
    second = []
    for t in ts:
        half = next((u for u in ts if np.isclose(u, t / 2)), None)
        if half is not None:
            second.append((t, abs(r[t] - 2.0 * r[half])))
    order = None
    usable = [(t, d) for t, d in second if d > 0]
    if len(usable) >= 2:
        lt, ld = np.log([t for t, _ in usable]), np.log([d for _, d in usable])
        order = float(np.polyfit(lt, ld, 1)[0])
    smallest = ts[0]
    return {
        "rows": [rows[t] for t in ts],
        "second_differences": [{"t": t, "d": d} for t, d in second],
        "order": order,
        "linear_coefficient": r[smallest] / smallest if smallest else 0.0,
        "s": s,
    }
