"""
Uniform-grid field containers.

Values are stored as ``(nx, ny)`` arrays indexed ``[i, j]``; cell ``(i, j)``
is centred at ``origin + ((i + 1/2) h, (j + 1/2) h)``.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from app.core.exceptions import GridMismatchError, ValidationError

# little-endian: origin_x, origin_y, spacing (float64), nx, ny (int64)
BINARY_HEADER = struct.Struct("<dddqq")
CSV_HEADER_PREFIX = "# origin_x,origin_y,spacing,nx,ny,components="


@dataclass(frozen=True)
class Grid2D:
    origin: Tuple[float, float]
    spacing: float
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "spacing", float(self.spacing))
        if not (self.spacing > 0 and np.isfinite(self.spacing)):
            raise ValidationError(f"Grid spacing must be positive, got {self.spacing}")
        if self.nx < 4 or self.ny < 4:
            raise ValidationError(f"Grid needs at least 4 cells per axis, got {self.nx}x{self.ny}")
        if not all(np.isfinite(self.origin)):
            raise ValidationError("Grid origin must be finite")

    @classmethod
    def centered(cls, half_width: float, n: int, center: Tuple[float, float] = (0.0, 0.0)) -> "Grid2D":
        """Square n x n grid covering [c - L, c + L]^2."""
        h = 2.0 * half_width / n
        return cls((center[0] - half_width, center[1] - half_width), h, n, n)

    @classmethod
    def aligned_box(cls, reference: "Grid2D", half_width: float, center: Tuple[float, float] = (0.0, 0.0)) -> "Grid2D":
        """Grid with the reference spacing, sharing its cell lattice, covering [c - L, c + L]^2."""
        h = reference.spacing
        i0 = int(np.floor((center[0] - half_width - reference.origin[0]) / h))
        j0 = int(np.floor((center[1] - half_width - reference.origin[1]) / h))
        i1 = int(np.ceil((center[0] + half_width - reference.origin[0]) / h))
        j1 = int(np.ceil((center[1] + half_width - reference.origin[1]) / h))
        i0 = min(i0, 0)
        j0 = min(j0, 0)
        i1 = max(i1, reference.nx)
        j1 = max(j1, reference.ny)
        return cls(
            (reference.origin[0] + i0 * h, reference.origin[1] + j0 * h),
            h,
            i1 - i0,
            j1 - j0,
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.spacing * self.spacing

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.spacing

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.spacing

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the covered box."""
        return (
            self.origin[0],
            self.origin[0] + self.nx * self.spacing,
            self.origin[1],
            self.origin[1] + self.ny * self.spacing,
        )

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.nx, self.ny) * self.spacing)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def centers(self) -> np.ndarray:
        """Cell centres as an (nx*ny, 2) array in C order."""
        X, Y = self.mesh()
        return np.column_stack([X.ravel(), Y.ravel()])

    def same_as(self, other: "Grid2D", rtol: float = 1e-12) -> bool:
        if self.nx != other.nx or self.ny != other.ny:
            return False
        scale = max(self.spacing, 1e-300)
        return (
            abs(self.spacing - other.spacing) <= rtol * scale
            and abs(self.origin[0] - other.origin[0]) <= rtol * scale * max(1, self.nx)
            and abs(self.origin[1] - other.origin[1]) <= rtol * scale * max(1, self.ny)
        )

    def require_same(self, other: "Grid2D", what: str = "field") -> None:
        if not self.same_as(other):
            raise GridMismatchError(
                f"Grid mismatch for {what}: {self.nx}x{self.ny}@{self.spacing:g} "
                f"vs {other.nx}x{other.ny}@{other.spacing:g}",
                context={"a": self.describe(), "b": other.describe()},
            )

    def offset_in(self, outer: "Grid2D") -> Tuple[int, int]:
        """Index offset of this grid's first cell inside an aligned, larger grid."""
        h = self.spacing
        if abs(outer.spacing - h) > 1e-12 * h:
            raise GridMismatchError("Grids have different spacing")
        di = (self.origin[0] - outer.origin[0]) / h
        dj = (self.origin[1] - outer.origin[1]) / h
        i, j = int(round(di)), int(round(dj))
        if abs(di - i) > 1e-6 or abs(dj - j) > 1e-6:
            raise GridMismatchError("Grids are not cell-aligned")
        if i < 0 or j < 0 or i + self.nx > outer.nx or j + self.ny > outer.ny:
            raise GridMismatchError("Grid is not contained in the outer grid")
        return i, j

    def cell_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Indices of the cells containing each point (clipped to the grid)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.floor((pts[:, 0] - self.origin[0]) / self.spacing).astype(int)
        j = np.floor((pts[:, 1] - self.origin[1]) / self.spacing).astype(int)
        return np.clip(i, 0, self.nx - 1), np.clip(j, 0, self.ny - 1)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xmin, xmax, ymin, ymax = self.extent
        return (
            (pts[:, 0] >= xmin + margin) & (pts[:, 0] <= xmax - margin)
            & (pts[:, 1] >= ymin + margin) & (pts[:, 1] <= ymax - margin)
        )

    def describe(self) -> dict:
        return {"origin": list(self.origin), "spacing": self.spacing, "nx": self.nx, "ny": self.ny}


def _interpolator(grid: Grid2D, values: np.ndarray, method: str) -> RegularGridInterpolator:
    return RegularGridInterpolator(
        (grid.x, grid.y), values, method=method, bounds_error=False, fill_value=None
    )


@dataclass(frozen=True, eq=False)
class ScalarField2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size != self.grid.size:
            raise ValidationError(
                f"Field has {values.size} values for a {self.grid.nx}x{self.grid.ny} grid"
            )
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValidationError("Field values must be finite", context={"n_bad": int(np.sum(~np.isfinite(values)))})
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: Grid2D, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ScalarField2D":
        X, Y = grid.mesh()
        return cls(grid, np.broadcast_to(func(X, Y), grid.shape))

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField2D":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "ScalarField2D":
        return cls(grid, np.full(grid.shape, float(value)))

    def with_values(self, values: np.ndarray) -> "ScalarField2D":
        return ScalarField2D(self.grid, values)

    def __add__(self, other: Union["ScalarField2D", float]) -> "ScalarField2D":
        if isinstance(other, ScalarField2D):
            self.grid.require_same(other.grid)
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + float(other))

    def __sub__(self, other: Union["ScalarField2D", float]) -> "ScalarField2D":
        if isinstance(other, ScalarField2D):
            self.grid.require_same(other.grid)
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - float(other))

    def __mul__(self, scalar: float) -> "ScalarField2D":
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField2D":
        return self.with_values(-self.values)

    def interpolate(self, points: np.ndarray, method: str = "linear") -> np.ndarray:
        """Bilinear (default) interpolation at arbitrary points, linear extrapolation outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            return np.zeros(0)
        return _interpolator(self.grid, self.values, method)(pts)

    def gradient(self) -> "VectorField2D":
        h = self.grid.spacing
        gx, gy = np.gradient(self.values, h, h, edge_order=2)
        return VectorField2D(self.grid, np.stack([gx, gy], axis=-1))

    def restrict(self, grid: Grid2D) -> "ScalarField2D":
        """Slice out an aligned sub-grid."""
        i, j = grid.offset_in(self.grid)
        return ScalarField2D(grid, self.values[i:i + grid.nx, j:j + grid.ny])

    def save(self, path: Union[str, Path]) -> Path:
        return _save(Path(path), self.grid, self.values[..., None])

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScalarField2D":
        grid, values = _load(Path(path))
        return cls(grid, values[..., 0])


@dataclass(frozen=True, eq=False)
class VectorField2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size != 2 * self.grid.size:
            raise ValidationError(
                f"Vector field has {values.size} entries for a {self.grid.nx}x{self.grid.ny} grid"
            )
        values = values.reshape(self.grid.shape + (2,))
        if not np.all(np.isfinite(values)):
            raise ValidationError("Vector field components must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: Grid2D, func: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]) -> "VectorField2D":
        X, Y = grid.mesh()
        fx, fy = func(X, Y)
        return cls(grid, np.stack([np.broadcast_to(fx, grid.shape), np.broadcast_to(fy, grid.shape)], axis=-1))

    @property
    def x(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def y(self) -> np.ndarray:
        return self.values[..., 1]

    def norm(self) -> np.ndarray:
        return np.hypot(self.x, self.y)

    def scaled(self, factor: float) -> "VectorField2D":
        return VectorField2D(self.grid, self.values * float(factor))

    def __add__(self, other: "VectorField2D") -> "VectorField2D":
        self.grid.require_same(other.grid)
        return VectorField2D(self.grid, self.values + other.values)

    def jacobian(self) -> np.ndarray:
        """Centered-difference Jacobian, J[..., a, b] = d(psi_a)/d(x_b)."""
        h = self.grid.spacing
        jac = np.empty(self.grid.shape + (2, 2))
        for a in range(2):
            da_dx, da_dy = np.gradient(self.values[..., a], h, h, edge_order=2)
            jac[..., a, 0] = da_dx
            jac[..., a, 1] = da_dy
        return jac

    def divergence(self) -> np.ndarray:
        jac = self.jacobian()
        return jac[..., 0, 0] + jac[..., 1, 1]

    def interpolate(self, points: np.ndarray, method: str = "linear") -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((pts.shape[0], 2))
        for a in range(2):
            out[:, a] = _interpolator(self.grid, self.values[..., a], method)(pts)
        return out

    def save(self, path: Union[str, Path]) -> Path:
        return _save(Path(path), self.grid, self.values)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VectorField2D":
        grid, values = _load(Path(path))
        return cls(grid, values)


@dataclass(frozen=True, eq=False)
class Measure2D:
    density: ScalarField2D
    support_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        mask = self.support_mask
        if mask is None:
            mask = self.density.values > 0
        mask = np.asarray(mask, dtype=bool).reshape(self.density.grid.shape)
        values = self.density.values
        if np.any(values[mask] < 0):
            raise ValidationError("Measure density must be nonnegative on its support",
                                  context={"min_density": float(values[mask].min())})
        if np.any(values[~mask] != 0):
            raise ValidationError("Measure density must vanish off its support")
        mask.setflags(write=False)
        object.__setattr__(self, "support_mask", mask)

    @classmethod
    def from_density(cls, grid: Grid2D, density: np.ndarray, mask: Optional[np.ndarray] = None) -> "Measure2D":
        density = np.asarray(density, dtype=float).reshape(grid.shape)
        if mask is None:
            mask = density > 0
        return cls(ScalarField2D(grid, np.where(mask, density, 0.0)), mask)

    @property
    def grid(self) -> Grid2D:
        return self.density.grid

    @property
    def values(self) -> np.ndarray:
        return self.density.values

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def scaled(self, factor: float) -> "Measure2D":
        return Measure2D(self.density * factor, self.support_mask)

    def sup(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def integrate(self, values: np.ndarray) -> float:
        """Midpoint rule for the integral of a grid function against the measure."""
        return float(np.sum(np.asarray(values).reshape(self.grid.shape) * self.values) * self.grid.cell_area)


def _save(path: Path, grid: Grid2D, values: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    components = values.shape[-1]
    if path.suffix == ".csv":
        X, Y = grid.mesh()
        I, J = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny), indexing="ij")
        columns = {"i": I.ravel(), "j": J.ravel(), "x": X.ravel(), "y": Y.ravel()}
        names = ["value"] if components == 1 else ["vx", "vy"]
        for c, name in enumerate(names):
            columns[name] = values[..., c].ravel()
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(
                f"{CSV_HEADER_PREFIX}{components}\n"
                f"# {grid.origin[0]!r},{grid.origin[1]!r},{grid.spacing!r},{grid.nx},{grid.ny}\n"
            )
            pd.DataFrame(columns).to_csv(handle, index=False, float_format="%.17g")
        return path
    with open(path, "wb") as handle:
        handle.write(BINARY_HEADER.pack(grid.origin[0], grid.origin[1], grid.spacing, grid.nx, grid.ny))
        handle.write(struct.pack("<q", components))
        handle.write(np.ascontiguousarray(values, dtype="<f8").tobytes(order="C"))
    return path


def _load(path: Path) -> Tuple[Grid2D, np.ndarray]:
    if path.suffix == ".csv":
        with open(path, "r", encoding="utf-8") as handle:
            first = handle.readline().strip()
            second = handle.readline().strip()
        if not first.startswith(CSV_HEADER_PREFIX):
            raise ValidationError(f"{path} is not a field CSV file")
        components = int(first[len(CSV_HEADER_PREFIX):])
        ox, oy, h, nx, ny = second.lstrip("# ").split(",")
        grid = Grid2D((float(ox), float(oy)), float(h), int(nx), int(ny))
        frame = pd.read_csv(path, comment="#")
        names = ["value"] if components == 1 else ["vx", "vy"]
        values = frame[names].to_numpy(dtype=float).reshape(grid.shape + (components,))
        return grid, values
    raw = path.read_bytes()
    ox, oy, h, nx, ny = BINARY_HEADER.unpack_from(raw, 0)
    (components,) = struct.unpack_from("<q", raw, BINARY_HEADER.size)
    grid = Grid2D((ox, oy), h, nx, ny)
    values = np.frombuffer(raw, dtype="<f8", offset=BINARY_HEADER.size + 8)
    return grid, values.reshape(grid.shape + (components,)).astype(float)
