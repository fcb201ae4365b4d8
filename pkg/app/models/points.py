"""
Point configurations X_N and truncation radii.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist

from app.core.exceptions import CoincidentPointsError, ValidationError


@dataclass(frozen=True, eq=False)
class Configuration:
    """N points in the plane stored as an (N, 2) float array."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"Configuration points must have shape (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("Configuration coordinates must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Configuration":
        z = np.asarray(z)
        return cls(np.column_stack([z.real, z.imag]))

    @property
    def N(self) -> int:
        return int(self.points.shape[0])

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def __len__(self) -> int:
        return self.N

    def min_distance(self) -> float:
        if self.N < 2:
            return np.inf
        return float(pdist(self.points).min())

    def require_distinct(self) -> None:
        """Raise CoincidentPointsError unless all points are pairwise distinct."""
        if self.N >= 2 and not self.min_distance() > 0:
            raise CoincidentPointsError(
                "Configuration has coincident points; the energy is infinite",
                context={"N": self.N},
            )

    def translated(self, shift) -> "Configuration":
        return Configuration(self.points + np.asarray(shift, dtype=float)[None, :])

    def permuted(self, order: np.ndarray) -> "Configuration":
        return Configuration(self.points[np.asarray(order)])

    def with_point(self, i: int, point) -> "Configuration":
        pts = self.points.copy()
        pts[i] = point
        return Configuration(pts)


@dataclass(frozen=True, eq=False)
class TruncationVector:
    """Per-point truncation radii eta_i > 0."""
    eta: np.ndarray

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.ndim != 1:
            raise ValidationError("Truncation radii must form a vector")
        if not np.all(np.isfinite(eta)) or np.any(eta <= 0):
            raise ValidationError("Truncation radii must be positive and finite")
        eta = eta.copy()
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    def __len__(self) -> int:
        return int(self.eta.size)

    def scaled(self, factor: float) -> "TruncationVector":
        return TruncationVector(self.eta * float(factor))


# ---------------------------------------------------------------------------
# Sample streams: one record per configuration, N then 2N coordinates
# ---------------------------------------------------------------------------

def save_samples(path: Union[str, Path], samples: Iterable[Configuration]) -> Path:
    """Write a sample stream as CSV (.csv) or little-endian binary (anything else).

    The binary record layout is int64 N followed by 2N float64 coordinates
    (x1, y1, x2, y2, ...).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if path.suffix == ".csv":
        rows = [[c.N] + c.points.ravel().tolist() for c in samples]
        width = max((len(r) for r in rows), default=1)
        columns = ["N"] + [f"{axis}{k}" for k in range(1, (width - 1) // 2 + 1) for axis in ("x", "y")]
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.17g")
        return path
    with open(path, "wb") as handle:
        for c in samples:
            handle.write(np.int64(c.N).astype("<i8").tobytes())
            handle.write(np.ascontiguousarray(c.points, dtype="<f8").tobytes(order="C"))
    return path


def load_samples(path: Union[str, Path]) -> List[Configuration]:
    path = Path(path)
    if path.suffix == ".csv":
        frame = pd.read_csv(path)
        out = []
        for row in frame.itertuples(index=False):
            n = int(row[0])
            coords = np.asarray(row[1:1 + 2 * n], dtype=float)
            out.append(Configuration(coords.reshape(n, 2)))
        return out
    raw = path.read_bytes()
    out, offset = [], 0
    while offset < len(raw):
        n = int(np.frombuffer(raw, dtype="<i8", count=1, offset=offset)[0])
        offset += 8
        coords = np.frombuffer(raw, dtype="<f8", count=2 * n, offset=offset)
        offset += 16 * n
        out.append(Configuration(coords.reshape(n, 2)))
    return out
