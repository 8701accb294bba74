"""The Henon-like family, its one-dimensional limit, orbits and Jacobians.

The built-in planar instance is the standard Henon map conjugated by
(x, y) -> (x, y / sqrt(b)):

    Psi(x, y) = (1 - a x^2 + sqrt(b) y, sqrt(b) x)

so that the perturbation of the quadratic family (1 - a x^2, 0) has size
sqrt(b) on the phase rectangle Q = [-2, 2]^2 and the Jacobian determinant
is -b everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Q_HALF_WIDTH = 2.0


class OrbitEscape(RuntimeError):
    """Raised when an orbit leaves the phase rectangle Q."""

    def __init__(self, index: int, point):
        super().__init__(f"orbit left Q at step {index}: {tuple(point)}")
        self.index = index
        self.point = point


@dataclass(frozen=True)
class ParameterPoint:
    a: float
    b: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("parameters must be finite")
        if self.b < 0:
            raise ValueError("b must be non-negative")

    @property
    def sqrt_b(self) -> float:
        return math.sqrt(self.b)

    def check(self, budget: "ConstantBudget") -> None:
        if not (budget.a0 < self.a <= 2.0):
            raise ValueError(f"a={self.a} outside ({budget.a0}, 2]")
        if self.b > budget.b0:
            raise ValueError(f"b={self.b} exceeds b0={budget.b0}")


@dataclass(frozen=True)
class PhasePoint:
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TangentVector:
    dx: float
    dy: float

    def __post_init__(self):
        if self.dx == 0.0 and self.dy == 0.0:
            raise ValueError("tangent vector must be nonzero")

    @property
    def slope(self) -> float:
        return math.inf if self.dx == 0.0 else abs(self.dy / self.dx)


@dataclass(frozen=True)
class ConstantBudget:
    """All constants of the construction in one place.

    Derived quantities (r_delta, kappa_i, kappa_bar, C_depth, tau) are filled
    in by `make` unless given explicitly.  theta depends on b and is computed
    by `theta_for`.
    """

    kappa: float = 0.4
    alpha: float = 0.02
    delta: float = math.exp(-5)
    tau: float = 0.02 / 60
    rho: float = 1.6e-5
    K: float = 5.0
    N: int = 15
    r_delta: int = 5
    kappa1: float = 0.1
    kappa2: float = 0.08
    kappa3: float = 0.4 / 3
    kappa4: float = 0.4 / 6
    kappa_bar: float = 0.4 / 15
    kappa0: float = 0.1
    D0: float = 10.0
    bigD: float = 10.0
    lam: float = 1.1
    C_depth: float = 15.0
    C_theta: float = 10.0 * math.log(1 / 1.6e-5)
    capture_c: float = 0.25
    gg_ratio: float = 2.5
    a0: float = 1.9
    b0: float = 1e-4

    @classmethod
    def make(cls, **kw) -> "ConstantBudget":
        kappa = kw.get("kappa", cls.kappa)
        delta = kw.get("delta", cls.delta)
        rho = kw.get("rho", cls.rho)
        kw.setdefault("r_delta", int(round(-math.log(delta))))
        kw.setdefault("kappa1", kappa / 4)
        kw.setdefault("kappa2", kappa / 5)
        kw.setdefault("kappa3", kappa / 3)
        kw.setdefault("kappa4", kappa / 6)
        kw.setdefault("kappa_bar", kw["kappa3"] / 5)
        kw.setdefault("C_depth", 2.0 / kw["kappa3"])
        kw.setdefault("C_theta", 10.0 * abs(math.log(rho)))
        if not kw.get("tau"):
            alpha = kw.get("alpha", cls.alpha)
            kw["tau"] = alpha / (4.0 * kw["C_depth"])
        return cls(**kw)

    def theta_for(self, b: float) -> float:
        """theta = C_theta / |log b|; +inf at b = 0 (no generation cap)."""
        if b <= 0:
            return math.inf
        return self.C_theta / abs(math.log(b))

    def with_(self, **kw) -> "ConstantBudget":
        return replace(self, **kw)

    def validate(self) -> list[str]:
        """Names of violated ordering/ratio constraints (empty if fine)."""
        out = []
        if not self.kappa < math.log(2):
            out.append("kappa_log2")
        if not self.alpha < self.kappa:
            out.append("kappa_alpha_order")
        elif self.kappa < self.gg_ratio * self.alpha:
            out.append("kappa_alpha_ratio")
        if not self.delta > 0:
            out.append("delta_positive")
        elif not self.delta < self.alpha:
            out.append("alpha_delta_order")
        elif self.alpha < self.gg_ratio * self.delta:
            out.append("alpha_delta_ratio")
        if self.delta > 0:
            r = round(-math.log(self.delta))
            if abs(r + math.log(self.delta)) >= 1e-12 or r != self.r_delta:
                out.append("r_delta_integrality")
        if abs(self.kappa_bar - self.kappa3 / 5) > 1e-15:
            out.append("kappa_bar_definition")
        if not (0 < self.tau <= self.alpha / (2 * self.C_depth) * (1 + 1e-12)):
            out.append("tau_budget")
        if self.N < 1:
            out.append("N_positive")
        if not (0 < self.rho < 1):
            out.append("rho_range")
        return out


# ---------------------------------------------------------------------------
# maps

def apply_1d(p: ParameterPoint, x):
    return 1.0 - p.a * x * x


def apply_2d(p: ParameterPoint, z, check: bool = True) -> np.ndarray:
    x, y = float(z[0]), float(z[1])
    s = p.sqrt_b
    out = np.array([1.0 - p.a * x * x + s * y, s * x])
    if check and not in_q(out):
        raise OrbitEscape(1, out)
    return out


def in_q(z) -> bool:
    return bool(np.all(np.isfinite(z)) and abs(z[0]) <= Q_HALF_WIDTH
                and abs(z[1]) <= Q_HALF_WIDTH)


def jacobian(p: ParameterPoint, z) -> np.ndarray:
    s = p.sqrt_b
    return np.array([[-2.0 * p.a * float(z[0]), s], [s, 0.0]])


def jacobian_batch(p: ParameterPoint, Z: np.ndarray) -> np.ndarray:
    """D Psi at each row of Z, shape (M, 2, 2)."""
    Z = np.asarray(Z, dtype=float)
    s = p.sqrt_b
    J = np.empty((len(Z), 2, 2))
    J[:, 0, 0] = -2.0 * p.a * Z[:, 0]
    J[:, 0, 1] = s
    J[:, 1, 0] = s
    J[:, 1, 1] = 0.0
    return J


def orbit(p: ParameterPoint, z0, n: int) -> np.ndarray:
    """Array of shape (n+1, 2) with row j = Psi^j(z0)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    out = np.empty((n + 1, 2))
    out[0] = z0
    s = p.sqrt_b
    x, y = float(z0[0]), float(z0[1])
    for j in range(1, n + 1):
        x, y = 1.0 - p.a * x * x + s * y, s * x
        if not (abs(x) <= Q_HALF_WIDTH and abs(y) <= Q_HALF_WIDTH):
            raise OrbitEscape(j, (x, y))
        out[j] = (x, y)
    return out


def orbit_1d(a, x0, n: int) -> np.ndarray:
    """Rows x_0..x_n of the quadratic map; a and x0 may be arrays."""
    x = np.asarray(x0, dtype=float) * np.ones_like(np.asarray(a, dtype=float))
    out = np.empty((n + 1,) + x.shape)
    out[0] = x
    for j in range(1, n + 1):
        x = 1.0 - a * x * x
        out[j] = x
    return out


def derivative_along_orbit_1d(p: ParameterPoint, x0: float, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    x, d = float(x0), 1.0
    for _ in range(n):
        d *= abs(2.0 * p.a * x)
        x = 1.0 - p.a * x * x
    return d


def in_critical_strip(z, delta: float) -> bool:
    return abs(float(z[0])) <= delta


def fixed_point(p: ParameterPoint, tol: float = 1e-15, iters: int = 50) -> np.ndarray:
    """The saddle P near (1/2, 0) for a near 2, refined by Newton's method."""
    s = p.sqrt_b
    # x = 1 - a x^2 + b x  ->  a x^2 + (1 - b) x - 1 = 0, positive root
    c = 1.0 - p.b
    x = (-c + math.sqrt(c * c + 4 * p.a)) / (2 * p.a)
    z = np.array([x, s * x])
    for _ in range(iters):
        r = apply_2d(p, z, check=False) - z
        if np.max(np.abs(r)) < tol:
            break
        J = jacobian(p, z) - np.eye(2)
        z = z - np.linalg.solve(J, r)
    return z


# ---------------------------------------------------------------------------
# perturbation hook

@dataclass(frozen=True)
class PolynomialPerturbation:
    """User-supplied R(x, y) = (sum cx[i,j] x^i y^j, sum cy[i,j] x^i y^j).

    The map is (1 - a x^2, 0) + R.  Coefficients are scaled by `scale`.
    """

    cx: tuple
    cy: tuple
    scale: float = 1.0

    def __call__(self, x, y):
        cx = np.asarray(self.cx, dtype=float)
        cy = np.asarray(self.cy, dtype=float)
        return (self.scale * np.polynomial.polynomial.polyval2d(x, y, cx),
                self.scale * np.polynomial.polynomial.polyval2d(x, y, cy))

    def jacobian(self, x, y) -> np.ndarray:
        P = np.polynomial.polynomial
        cx = np.asarray(self.cx, dtype=float)
        cy = np.asarray(self.cy, dtype=float)
        dxx = P.polyval2d(x, y, P.polyder(cx, axis=0))
        dxy = P.polyval2d(x, y, P.polyder(cx, axis=1))
        dyx = P.polyval2d(x, y, P.polyder(cy, axis=0))
        dyy = P.polyval2d(x, y, P.polyder(cy, axis=1))
        return self.scale * np.array([[dxx, dxy], [dyx, dyy]])


def make_perturbed_map(a: float, R: PolynomialPerturbation) -> tuple[Callable, Callable]:
    """(map, jacobian) callables for (1 - a x^2, 0) + R."""

    def f(z):
        rx, ry = R(z[0], z[1])
        return np.array([1.0 - a * z[0] ** 2 + rx, ry])

    def df(z):
        return np.array([[-2.0 * a * z[0], 0.0], [0.0, 0.0]]) + R.jacobian(z[0], z[1])

    return f, df


# ---------------------------------------------------------------------------
# extended precision re-check (oracle use only)

def orbit_extended(a, b, z0, n: int, dps: int = 34) -> list:
    """Orbit of the conjugated map in mpmath at `dps` digits (about 113 bits)."""
    import mpmath

    with mpmath.workdps(dps):
        a_, b_ = mpmath.mpf(a), mpmath.mpf(b)
        s = mpmath.sqrt(b_)
        x, y = mpmath.mpf(z0[0]), mpmath.mpf(z0[1])
        out = [(x, y)]
        for _ in range(n):
            x, y = 1 - a_ * x * x + s * y, s * x
            out.append((x, y))
        return out
