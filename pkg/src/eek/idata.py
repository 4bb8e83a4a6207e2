"""Reconstruction of fluid initial data from matter sources.

The slice sources (z, j^a) and the fluid unknowns (w, ubar^a) are related
by an algebraic map that is invertible only on a region Omega of the
scaled variables y = z^((gamma-1)/2), v^a = j^a / z.  The forward map is

    y   = w [1 + (1 + K w^2) h(ubar, ubar)]^((gamma-1)/2)
    v^a = (1 + K w^2) ubar^a sqrt(1 + h(ubar, ubar))
          / (1 + (1 + K w^2) h(ubar, ubar)),

defined for 0 <= w < w_max = (gamma K)^(-1/2) (the causal strip, where
the sound speed stays below light speed).  Omega is bounded by the image
of the strip edge, the graph of an increasing function s on [0, 1).

Inversion is rotation-reduced to two dimensions and solved by damped
Newton with the closed-form Jacobian; everything broadcasts over leading
axes so whole grids reconstruct in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fluid import EquationOfState


class RegionViolationError(ValueError):
    """Scaled matter data outside the invertible region Omega."""

    def __init__(self, reason, detail):
        self.reason = reason
        self.detail = detail
        super().__init__(f"outside admissible region: {reason} ({detail})")


class NewtonConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"reconstruction Newton failed to converge after {iterations} "
            f"iterations (last residual {residual:.3e})"
        )


def _hnorm2(h, vec):
    return np.einsum("...ab,...a,...b->...", h, vec, vec)


@dataclass(frozen=True)
class MatterData:
    """Slice sources: energy density z >= 0, momentum density j^a, and
    the SPD slice metric h at the evaluation point."""

    z: np.ndarray
    j: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        j = np.asarray(self.j, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        if np.any(z < 0):
            raise ValueError("energy density z must be nonnegative")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "h", h)

    def dominant_energy_margin(self):
        """z^2 - h(j, j); nonnegative is necessary for reconstruction."""
        return self.z ** 2 - _hnorm2(self.h, self.j)


@dataclass(frozen=True)
class ScaledMatter:
    """y = z^((gamma-1)/2) and v^a = j^a / z (v = 0 where z = 0)."""

    y: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if np.any(y < 0):
            raise ValueError("scaled density y must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_matter(cls, eos: EquationOfState, md: MatterData):
        y = md.z ** (0.5 * (eos.gamma - 1.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(md.z[..., None] > 0, md.j / md.z[..., None], 0.0)
        return cls(y, v)


@dataclass(frozen=True)
class FluidDataPoint:
    """Strip point: 0 <= w < (gamma K)^(-1/2) and projected velocity ubar^a."""

    w: np.ndarray
    ubar: np.ndarray


def phi_forward(eos: EquationOfState, h, point: FluidDataPoint) -> ScaledMatter:
    """Forward map from strip coordinates to scaled matter data."""
    w = np.asarray(point.w, dtype=np.float64)
    ubar = np.asarray(point.ubar, dtype=np.float64)
    if np.any(w < 0) or np.any(eos.gamma * eos.K * w * w >= 1.0):
        raise RegionViolationError(
            "causal strip", f"max gamma K w^2 = {np.max(eos.gamma * eos.K * w * w):.6g}"
        )
    rho2 = _hnorm2(h, ubar)
    A = 1.0 + eos.K * w * w
    B = 1.0 + A * rho2
    y = w * B ** (0.5 * (eos.gamma - 1.0))
    v = (A * np.sqrt(1.0 + rho2) / B)[..., None] * ubar
    return ScaledMatter(y, v)


def theta_jacobian(eos: EquationOfState, epsilon, rho):
    """Closed-form Jacobian determinant of the middle map
    (eps, rho) -> (eps + (eps+p) rho^2, (eps+p) rho sqrt(1+rho^2)):

        (eps + p) / sqrt(1 + rho^2) * (1 + rho^2 (1 - p')).

    Returns 0 at the vacuum boundary eps = 0.
    """
    epsilon = np.asarray(epsilon, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    p = eos.K * epsilon ** eos.gamma
    with np.errstate(invalid="ignore"):
        dp = np.where(
            epsilon > 0, eos.gamma * eos.K * epsilon ** (eos.gamma - 1.0), 0.0
        )
    return (epsilon + p) / np.sqrt(1.0 + rho * rho) * (1.0 + rho * rho * (1.0 - dp))


def _theta(eos, w, rho):
    A = 1.0 + eos.K * w * w
    B = 1.0 + A * rho * rho
    y = w * B ** (0.5 * (eos.gamma - 1.0))
    x = A * rho * np.sqrt(1.0 + rho * rho) / B
    return y, x


def _theta_jac(eos, w, rho):
    """Analytic 2x2 Jacobian of the reduced map (w, rho) -> (y, x)."""
    K, gm = eos.K, eos.gamma
    A = 1.0 + K * w * w
    B = 1.0 + A * rho * rho
    halfg = 0.5 * (gm - 1.0)
    root = np.sqrt(1.0 + rho * rho)
    dy_dw = B ** halfg + w * halfg * B ** (halfg - 1.0) * (2.0 * K * w * rho * rho)
    dy_dr = w * halfg * B ** (halfg - 1.0) * (2.0 * A * rho)
    dx_dw = 2.0 * K * w * rho * root * (B - A * rho * rho) / (B * B)
    dx_dr = A * (1.0 + 2.0 * rho * rho) / (root * B) - 2.0 * A * A * rho * rho * root / (B * B)
    return dy_dw, dy_dr, dx_dw, dx_dr


def boundary_curve(eos: EquationOfState, count: int = 512):
    """Monotone samples (x_i, s(x_i)) of the region boundary on [0, 1).

    The curve is the image of the strip edge w = w_max under the reduced
    map; x increases strictly with the parameter, so it is the graph of
    an increasing function s.
    """
    if count < 2:
        raise ValueError("need at least two samples")
    # tangent-spaced parameter reaches far into the x -> 1 tail
    t = np.linspace(0.0, 1.0, count, endpoint=False)
    rho = np.tan(0.5 * np.pi * t) * 2.0
    y, x = _theta(eos, eos.w_max, rho)
    return x, y


class BoundaryCurve:
    """Interpolant of the admissibility bound y < s(|v|_h)."""

    def __init__(self, eos: EquationOfState, count: int = 2048):
        self.eos = eos
        self.x, self.y = boundary_curve(eos, count)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        # beyond the last sample the bound blows up; np.interp would clamp,
        # so splice in +inf there
        out = np.interp(x, self.x, self.y)
        return np.where(x > self.x[-1], np.inf, out)


def region_margin(eos: EquationOfState, h, sm: ScaledMatter, curve=None):
    """(speed margin 1 - h(v,v), density margin s(|v|) - y)."""
    curve = curve or BoundaryCurve(eos)
    q2 = _hnorm2(h, sm.v)
    speed_margin = 1.0 - q2
    with np.errstate(invalid="ignore"):
        bound = curve(np.sqrt(np.maximum(q2, 0.0)))
    density_margin = bound - sm.y
    return speed_margin, density_margin


def phi_inverse(eos: EquationOfState, h, sm: ScaledMatter,
                margin: float = 1e-6, max_iter: int = 100,
                tol: float = 1e-13) -> FluidDataPoint:
    """Invert the forward map on the interior of the admissible region.

    Rotation-reduces to the 2-D system and runs damped Newton with the
    analytic Jacobian; the start (w, rho) = (y, q / sqrt(1 - q^2)) is
    exact on both boundary branches.  Points within `margin` of the
    region boundary are rejected, never clamped.
    """
    y = np.asarray(sm.y, dtype=np.float64)
    v = np.asarray(sm.v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    q2 = _hnorm2(h, v)
    q = np.sqrt(np.maximum(q2, 0.0))
    curve = BoundaryCurve(eos)
    if np.any(q2 > 1.0 - margin):
        raise RegionViolationError(
            "h(v, v) < 1", f"max h(v,v) = {np.max(q2):.9g}"
        )
    bound = curve(q)
    if np.any(y > (1.0 - margin) * bound):
        bad = float(np.max(np.where(np.isfinite(bound), y / bound, 0.0)))
        raise RegionViolationError("y < s(|v|_h)", f"max y / s = {bad:.9g}")

    rho = q / np.sqrt(1.0 - q2)
    w = y.copy()
    target_y, target_x = y, q

    def residual(wv, rv):
        yy, xx = _theta(eos, wv, rv)
        return yy - target_y, xx - target_x

    ry, rx = residual(w, rho)
    res = np.hypot(ry, rx)
    for it in range(max_iter):
        if np.max(res) <= tol:
            break
        dy_dw, dy_dr, dx_dw, dx_dr = _theta_jac(eos, w, rho)
        det = dy_dw * dx_dr - dy_dr * dx_dw
        dw = -(dx_dr * ry - dy_dr * rx) / det
        dr = -(-dx_dw * ry + dy_dw * rx) / det
        # damped update: halve until the pointwise residual decreases,
        # clamping iterates into the open strip
        step = np.ones_like(w)
        for _ in range(30):
            w_new = np.clip(w + step * dw, 0.0, (1.0 - 1e-12) * eos.w_max)
            r_new = np.maximum(rho + step * dr, 0.0)
            ry_n, rx_n = residual(w_new, r_new)
            res_new = np.hypot(ry_n, rx_n)
            improved = (res_new <= res) | (res <= tol)
            if np.all(improved):
                break
            step = np.where(improved, step, 0.5 * step)
        w, rho, ry, rx, res = w_new, r_new, ry_n, rx_n, res_new
    if np.max(res) > 10.0 * tol:
        raise NewtonConvergenceError(float(np.max(res)), max_iter)

    with np.errstate(divide="ignore", invalid="ignore"):
        direction = np.where(q[..., None] > 0, v / q[..., None], 0.0)
    ubar = rho[..., None] * direction
    return FluidDataPoint(w, ubar)


def full_velocity(h, point: FluidDataPoint, u0_convention: str = "sqrt"):
    """Complete (ubar^0, ubar^a) on a lapse-1, shift-0 slice.

    'sqrt' sets ubar^0 = sqrt(1 + h(ubar, ubar)), which satisfies the
    four-velocity normalization on the slice; 'linear' uses
    1 + h(ubar, ubar), kept for comparison with the source relation.
    """
    rho2 = _hnorm2(np.asarray(h, dtype=np.float64), point.ubar)
    if u0_convention == "sqrt":
        u0 = np.sqrt(1.0 + rho2)
    elif u0_convention == "linear":
        u0 = 1.0 + rho2
    else:
        raise ValueError(f"unknown u0 convention {u0_convention!r}")
    return u0, point.ubar


def matter_admissible(eos: EquationOfState, md: MatterData) -> np.ndarray:
    """Convenience check in the unscaled variables (z, j): True where the
    scaled data lie inside the region (includes the dominant energy
    condition h(j,j) <= z^2)."""
    sm = ScaledMatter.from_matter(eos, md)
    speed, density = region_margin(eos, md.h, sm)
    return (speed > 0) & (density > 0)
