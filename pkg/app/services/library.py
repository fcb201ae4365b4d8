"""
Builtin confining potentials and the test-function library.

Every entry carries closed-form first and second derivatives.
"""

from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from app.core.exceptions import AssumptionViolation, ConfigurationError
from app.core.logging import get_logger
from app.models.functions import Potential, Regularity, TestFunction

logger = get_logger("library")


# ---------------------------------------------------------------------------
# Radial profiles phi(s), s = r^2 / R^2, with phi' and phi''
# ---------------------------------------------------------------------------

def bump_profile(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """exp(1 - 1/(1 - s)) on s < 1, zero beyond; C-infinity at s = 1."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    q = np.where(inside, 1.0 - s, 1.0)
    phi = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
    d1 = -phi / q ** 2
    d2 = phi / q ** 4 - 2.0 * phi / q ** 3
    return phi, np.where(inside, d1, 0.0), np.where(inside, d2, 0.0)


def _radial_from_profile(profile, radius: float):
    """xi(u) = phi(|u|^2 / R^2) with its gradient and Hessian."""
    R2 = radius * radius

    def value(u, v):
        return profile((u * u + v * v) / R2)[0]

    def grad(u, v):
        _, d1, _ = profile((u * u + v * v) / R2)
        k = 2.0 * d1 / R2
        return k * u, k * v

    def hess(u, v):
        _, d1, d2 = profile((u * u + v * v) / R2)
        a = 2.0 * d1 / R2
        b = 4.0 * d2 / (R2 * R2)
        return a + b * u * u, b * u * v, a + b * v * v

    return value, grad, hess


def smoothstep7(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Degree-7 smoothstep S(t) on [0, 1] (C^3 joins) with S' and S''."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    S = t ** 4 * (35.0 - 84.0 * t + 70.0 * t ** 2 - 20.0 * t ** 3)
    dS = 140.0 * t ** 3 * (1.0 - t) ** 3
    d2S = 420.0 * t ** 2 * (1.0 - t) ** 2 * (1.0 - 2.0 * t)
    return S, dS, d2S


def plateau(r: np.ndarray, r0: float, r1: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """P(r) = 1 for r <= r0, 0 for r >= r1, smoothstep in between; returns P, P', P''."""
    w = r1 - r0
    S, dS, d2S = smoothstep7((np.asarray(r, dtype=float) - r0) / w)
    return 1.0 - S, -dS / w, -d2S / (w * w)


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

def quadratic(a: float = 1.0) -> Potential:
    """V = a|x|^2; equilibrium is uniform with density a/pi on the disk of radius a^(-1/2)."""
    if a <= 0:
        raise ConfigurationError("quadratic potential needs a > 0", context={"a": a})
    return Potential(
        name="quadratic",
        V=lambda x, y: a * (x * x + y * y),
        gradV=lambda x, y: (2.0 * a * x, 2.0 * a * y),
        lapV=lambda x, y: np.full(np.broadcast(x, y).shape, 4.0 * a),
        growth_margin=np.inf,
        params={"a": float(a)},
        radial_lap=lambda r: np.full(np.shape(r), 4.0 * a),
    )


def quartic(c: float = 1.0) -> Potential:
    """V = c|x|^4; density 4c|x|^2/pi on the disk of radius (2c)^(-1/4)."""
    if c <= 0:
        raise ConfigurationError("quartic potential needs c > 0", context={"c": c})

    def grad(x, y):
        r2 = x * x + y * y
        return 4.0 * c * r2 * x, 4.0 * c * r2 * y

    return Potential(
        name="quartic",
        V=lambda x, y: c * (x * x + y * y) ** 2,
        gradV=grad,
        lapV=lambda x, y: 16.0 * c * (x * x + y * y),
        growth_margin=np.inf,
        params={"c": float(c)},
        radial_lap=lambda r: 16.0 * c * np.asarray(r) ** 2,
    )


def quadratic_bump(
    eps: float = 0.05,
    center: Sequence[float] = (0.5, 0.0),
    radius: float = 0.5,
) -> Potential:
    """V = |x|^2 + eps * bump((x - center) / radius)."""
    value, grad, hess = _radial_from_profile(bump_profile, radius)
    cx, cy = float(center[0]), float(center[1])

    def V(x, y):
        return x * x + y * y + eps * value(x - cx, y - cy)

    def gradV(x, y):
        gx, gy = grad(x - cx, y - cy)
        return 2.0 * x + eps * gx, 2.0 * y + eps * gy

    def lapV(x, y):
        hxx, _, hyy = hess(x - cx, y - cy)
        return 4.0 + eps * (hxx + hyy)

    return Potential(
        name="quadratic_bump",
        V=V, gradV=gradV, lapV=lapV,
        growth_margin=np.inf,
        params={"eps": float(eps), "center_x": cx, "center_y": cy, "radius": float(radius)},
    )


def polynomial(coefficients: Sequence[Sequence[float]]) -> Potential:
    """V(x, y) = sum c[i][j] x^i y^j."""
    c = np.asarray(coefficients, dtype=float)
    if c.ndim != 2:
        raise ConfigurationError("Polynomial coefficients must be a 2D array c[i][j]")
    nz = np.argwhere(c != 0)
    degree = int(nz.sum(axis=1).max()) if nz.size else 0
    if degree < 2:
        raise AssumptionViolation(
            "Polynomial potential of degree < 2 cannot satisfy the growth condition",
            context={"degree": degree},
        )
    cx = P.polyder(c, axis=0)
    cy = P.polyder(c, axis=1)
    cxx = P.polyder(c, 2, axis=0)
    cyy = P.polyder(c, 2, axis=1)

    return Potential(
        name="polynomial",
        V=lambda x, y: P.polyval2d(x, y, c),
        gradV=lambda x, y: (P.polyval2d(x, y, cx), P.polyval2d(x, y, cy)),
        lapV=lambda x, y: P.polyval2d(x, y, cxx) + P.polyval2d(x, y, cyy),
        # polynomials of degree >= 2 grow faster than any logarithm; the
        # actual inequality is checked by Potential.check_growth
        growth_margin=np.inf,
        params={"degree": float(degree)},
    )


def perturbed_potential(V: Potential, xi: TestFunction, weight: float) -> Potential:
    """V + weight * xi, e.g. V_t = V - 2 t xi / beta."""
    def gradV(x, y):
        gx, gy = V.gradV(x, y)
        ex, ey = xi.grad(x, y)
        return gx + weight * ex, gy + weight * ey

    return Potential(
        name=f"{V.name}+{weight:g}*{xi.name}",
        V=lambda x, y: V.V(x, y) + weight * xi(x, y),
        gradV=gradV,
        lapV=lambda x, y: V.lapV(x, y) + weight * xi.lap(x, y),
        growth_margin=V.growth_margin,
        params={**V.params, "perturbation_weight": float(weight)},
    )


def translated_potential(V: Potential, shift: Sequence[float]) -> Potential:
    """x -> V(x - shift)."""
    sx, sy = float(shift[0]), float(shift[1])
    return Potential(
        name=f"{V.name}@({sx:g},{sy:g})",
        V=lambda x, y: V.V(x - sx, y - sy),
        gradV=lambda x, y: V.gradV(x - sx, y - sy),
        lapV=lambda x, y: V.lapV(x - sx, y - sy),
        growth_margin=V.growth_margin,
        params={**V.params, "shift_x": sx, "shift_y": sy},
    )


POTENTIALS: Dict[str, Callable[..., Potential]] = {
    "quadratic": quadratic,
    "quartic": quartic,
    "quadratic_bump": quadratic_bump,
    "polynomial": polynomial,
}


def get_potential(name: str, params: Optional[Dict[str, Any]] = None) -> Potential:
    """Build a builtin potential by name."""
    params = dict(params or {})
    factory = POTENTIALS.get(name)
    if factory is None:
        raise ConfigurationError(
            f"Unknown potential '{name}'",
            context={"available": sorted(POTENTIALS)},
        )
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"Bad parameters for potential '{name}': {exc}", context={"params": params}) from exc


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------

def bump(
    radius: float = 0.5,
    center: Sequence[float] = (0.0, 0.0),
    amplitude: float = 1.0,
    name: str = "bump",
    regularity: Regularity = Regularity.C21_INTERIOR,
) -> TestFunction:
    """Radial bump exp(1 - 1/(1 - |x - c|^2 / R^2)) with peak value 1."""
    value, grad, hess = _radial_from_profile(bump_profile, radius)
    return TestFunction(
        name=name, profile=value, profile_grad=grad, profile_hess=hess,
        template_radius=float(radius), regularity=regularity,
        center=(float(center[0]), float(center[1])), amplitude=float(amplitude),
    )


def linear_plateau(r0: float = 1.2, r1: float = 1.45, name: str = "linear_plateau") -> TestFunction:
    """xi(x) = x_1 P(|x|): equal to x_1 on the disk of radius r0, compactly supported in r1."""
    if not 0 < r0 < r1:
        raise ConfigurationError("linear_plateau needs 0 < r0 < r1", context={"r0": r0, "r1": r1})

    def value(u, v):
        return u * plateau(np.hypot(u, v), r0, r1)[0]

    def grad(u, v):
        r = np.hypot(u, v)
        p, dp, _ = plateau(r, r0, r1)
        safe = np.where(r > 0, r, 1.0)
        q = np.where(r > 0, dp / safe, 0.0)
        return p + u * u * q, u * v * q

    def hess(u, v):
        r = np.hypot(u, v)
        p, dp, d2p = plateau(r, r0, r1)
        safe = np.where(r > 0, r, 1.0)
        q = np.where(r > 0, dp / safe, 0.0)                    # P'/r
        w = np.where(r > 0, (d2p - q) / (safe * safe), 0.0)    # (P'' - P'/r)/r^2
        # d_i P = q u_i, d_ij P = q delta_ij + w u_i u_j
        pxx = q + w * u * u
        pxy = w * u * v
        pyy = q + w * v * v
        return 2.0 * q * u + u * pxx, q * v + u * pxy, u * pyy

    return TestFunction(
        name=name, profile=value, profile_grad=grad, profile_hess=hess,
        template_radius=float(r1), regularity=Regularity.C31_BOUNDARY,
    )


def mesoscopic_template(center: Sequence[float] = (0.0, 0.0), scale: float = 0.25) -> TestFunction:
    """Unit bump rescaled to xi((x - center) / scale)."""
    return bump(1.0, name="meso_bump", regularity=Regularity.C21_MESOSCOPIC).scaled(center, scale)


TEST_FUNCTIONS: Dict[str, Callable[..., TestFunction]] = {
    "bump_center": lambda: bump(0.5, (0.0, 0.0), name="bump_center"),
    "bump_offset": lambda: bump(0.3, (0.4, 0.2), name="bump_offset"),
    "bump_wide": lambda: bump(0.7, (-0.1, 0.05), name="bump_wide"),
    "bump_boundary": lambda: bump(0.5, (1.0, 0.0), name="bump_boundary", regularity=Regularity.C31_BOUNDARY),
    "meso_bump": lambda: mesoscopic_template(),
}

EXTRA_TEST_FUNCTIONS: Dict[str, Callable[..., TestFunction]] = {
    "bump": bump,
    "linear_plateau": linear_plateau,
}

LIBRARY_NAMES = tuple(TEST_FUNCTIONS)


def get_test_function(
    name: str,
    center: Optional[Sequence[float]] = None,
    scale: Optional[float] = None,
    amplitude: float = 1.0,
    params: Optional[Dict[str, Any]] = None,
) -> TestFunction:
    """Library or parametrised test function, optionally recentred and rescaled."""
    if name in TEST_FUNCTIONS:
        if params:
            raise ConfigurationError(f"Library test function '{name}' takes no parameters")
        xi = TEST_FUNCTIONS[name]()
    elif name in EXTRA_TEST_FUNCTIONS:
        try:
            xi = EXTRA_TEST_FUNCTIONS[name](**dict(params or {}))
        except TypeError as exc:
            raise ConfigurationError(f"Bad parameters for test function '{name}': {exc}") from exc
    else:
        raise ConfigurationError(
            f"Unknown test function '{name}'",
            context={"available": sorted(TEST_FUNCTIONS) + sorted(EXTRA_TEST_FUNCTIONS)},
        )
    if center is not None or scale is not None:
        xi = xi.scaled(center if center is not None else xi.center, scale if scale is not None else xi.scale)
    if amplitude != 1.0:
        xi = xi * amplitude
    return xi
