"""
Callable model types: confining potentials V and test functions xi.

Both carry analytic derivatives. All callables take coordinate arrays
``(x, y)`` of any common shape and return arrays of that shape.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from app.core.exceptions import AssumptionViolation, ValidationError

Scalar2D = Callable[[np.ndarray, np.ndarray], np.ndarray]
Vector2D = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
Hessian2D = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


class Regularity(str, Enum):
    """Regularity classes required by the interior, boundary and mesoscopic cases."""
    C21_INTERIOR = "C21_interior"
    C31_BOUNDARY = "C31_boundary"
    C21_MESOSCOPIC = "C21_mesoscopic"


@dataclass(frozen=True)
class Potential:
    name: str
    V: Scalar2D
    gradV: Vector2D
    lapV: Scalar2D
    growth_margin: float
    params: Dict[str, float] = field(default_factory=dict)
    # radial potentials expose lapV as a function of r for the bisection oracle
    radial_lap: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x, y):
        return self.V(x, y)

    @property
    def is_radial(self) -> bool:
        return self.radial_lap is not None

    def at_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.asarray(self.V(pts[:, 0], pts[:, 1]), dtype=float)

    def grad_at_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        gx, gy = self.gradV(pts[:, 0], pts[:, 1])
        return np.column_stack([np.broadcast_to(gx, pts.shape[0]), np.broadcast_to(gy, pts.shape[0])])

    def check_growth(self, r_test: float, n_angles: int = 64) -> float:
        """Assert V(x)/(2 log|x|) >= 1 + growth_margin/2 on the circle |x| = r_test (r_test > 1).

        Returns the smallest sampled ratio.
        """
        if r_test <= 1.0:
            raise ValidationError("Growth check radius must exceed 1")
        theta = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
        x, y = r_test * np.cos(theta), r_test * np.sin(theta)
        ratio = float(np.min(np.asarray(self.V(x, y)) / (2.0 * np.log(r_test))))
        required = 1.0 + min(self.growth_margin, 1e6) / 2.0
        if not np.isfinite(self.growth_margin):
            required = 1.0
        if self.growth_margin <= 0 or ratio < required:
            raise AssumptionViolation(
                f"Potential '{self.name}' fails the growth condition at |x| = {r_test:g}",
                context={"ratio": ratio, "required": required, "growth_margin": self.growth_margin},
            )
        return ratio


@dataclass(frozen=True)
class TestFunction:
    """xi_N(x) = amplitude * xi((x - center) / scale) with analytic derivatives.

    ``profile``, ``profile_grad``, ``profile_hess`` act on template
    coordinates; the template is supported in the disk of radius
    ``template_radius`` about ``template_center``.
    """
    __test__ = False  # keep pytest from collecting this class

    name: str
    profile: Scalar2D
    profile_grad: Vector2D
    profile_hess: Hessian2D
    template_radius: float
    regularity: Regularity = Regularity.C21_INTERIOR
    template_center: Tuple[float, float] = (0.0, 0.0)
    center: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"Test function scale must be positive, got {self.scale}")
        if not np.isfinite(self.template_radius):
            raise ValidationError("Test functions must have compact support")

    # scaled evaluation -------------------------------------------------
    def _u(self, x, y):
        return (np.asarray(x, dtype=float) - self.center[0]) / self.scale, \
               (np.asarray(y, dtype=float) - self.center[1]) / self.scale

    def __call__(self, x, y):
        u, v = self._u(x, y)
        return self.amplitude * np.asarray(self.profile(u, v), dtype=float)

    def grad(self, x, y):
        u, v = self._u(x, y)
        gx, gy = self.profile_grad(u, v)
        k = self.amplitude / self.scale
        return k * np.asarray(gx, dtype=float), k * np.asarray(gy, dtype=float)

    def hess(self, x, y):
        u, v = self._u(x, y)
        hxx, hxy, hyy = self.profile_hess(u, v)
        k = self.amplitude / self.scale ** 2
        return k * np.asarray(hxx, dtype=float), k * np.asarray(hxy, dtype=float), k * np.asarray(hyy, dtype=float)

    def lap(self, x, y):
        hxx, _, hyy = self.hess(x, y)
        return hxx + hyy

    # geometry ----------------------------------------------------------
    @property
    def support_center(self) -> Tuple[float, float]:
        return (
            self.center[0] + self.scale * self.template_center[0],
            self.center[1] + self.scale * self.template_center[1],
        )

    @property
    def support_radius(self) -> float:
        return self.scale * self.template_radius

    def support_mask(self, X: np.ndarray, Y: np.ndarray, pad: float = 0.0) -> np.ndarray:
        c = self.support_center
        return np.hypot(X - c[0], Y - c[1]) < self.support_radius + pad

    # transformations ---------------------------------------------------
    def scaled(self, center: Tuple[float, float], scale: float) -> "TestFunction":
        return TestFunction(
            name=self.name, profile=self.profile, profile_grad=self.profile_grad,
            profile_hess=self.profile_hess, template_radius=self.template_radius,
            regularity=self.regularity, template_center=self.template_center,
            center=(float(center[0]), float(center[1])), scale=float(scale), amplitude=self.amplitude,
        )

    def __mul__(self, factor: float) -> "TestFunction":
        return TestFunction(
            name=self.name, profile=self.profile, profile_grad=self.profile_grad,
            profile_hess=self.profile_hess, template_radius=self.template_radius,
            regularity=self.regularity, template_center=self.template_center,
            center=self.center, scale=self.scale, amplitude=self.amplitude * float(factor),
        )

    __rmul__ = __mul__

    def __add__(self, other: "TestFunction") -> "TestFunction":
        return combine(self, 1.0, other, 1.0)

    # seminorms ---------------------------------------------------------
    def seminorms(self, n: int = 201) -> Dict[str, float]:
        """Sup norms of xi, grad xi and the Hessian over a sampling grid of the support."""
        c, R = self.support_center, self.support_radius
        s = np.linspace(-R, R, n)
        X, Y = np.meshgrid(c[0] + s, c[1] + s, indexing="ij")
        gx, gy = self.grad(X, Y)
        hxx, hxy, hyy = self.hess(X, Y)
        hess_norm = np.sqrt(hxx ** 2 + 2 * hxy ** 2 + hyy ** 2)
        return {
            "sup": float(np.max(np.abs(self(X, Y)))),
            "grad": float(np.max(np.hypot(gx, gy))),
            "hess": float(np.max(hess_norm)),
            "lap": float(np.max(np.abs(hxx + hyy))),
        }


def combine(a: TestFunction, ca: float, b: TestFunction, cb: float) -> TestFunction:
    """ca * a + cb * b as a test function in physical coordinates."""
    ac, ar = a.support_center, a.support_radius
    bc, br = b.support_center, b.support_radius
    centre = (0.5 * (ac[0] + bc[0]), 0.5 * (ac[1] + bc[1]))
    radius = max(np.hypot(ac[0] - centre[0], ac[1] - centre[1]) + ar,
                 np.hypot(bc[0] - centre[0], bc[1] - centre[1]) + br)

    def grad(x, y):
        ax, ay = a.grad(x, y)
        bx, by = b.grad(x, y)
        return ca * ax + cb * bx, ca * ay + cb * by

    def hess(x, y):
        ha = a.hess(x, y)
        hb = b.hess(x, y)
        return tuple(ca * p + cb * q for p, q in zip(ha, hb))

    regularity = a.regularity if a.regularity == b.regularity else Regularity.C31_BOUNDARY
    return TestFunction(
        name=f"{ca:g}*{a.name}+{cb:g}*{b.name}",
        profile=lambda x, y: ca * a(x, y) + cb * b(x, y),
        profile_grad=grad,
        profile_hess=hess,
        template_radius=float(radius),
        regularity=regularity,
        template_center=centre,
    )
