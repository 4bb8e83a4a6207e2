"""Polytropic fluid: regularized matter variable, symmetric first-order
matrices, and the characteristic structure of the system.

The pressure is p = K eps^gamma.  The matter unknown is w = eps^((gamma-1)/2),
which keeps every coefficient smooth through the vacuum boundary w = 0:
the sound speed obeys sigma^2 = gamma K w^2 and the symmetrizer weight
kappa = (gamma-1)/2 * sqrt(K gamma) / (1 + K w^2) stays strictly positive.

All functions broadcast over leading axes, so a whole grid of states can
be processed in one call.  Index conventions: Greek indices run 0..3,
metrics have signature (-, +, +, +), and `u` always holds contravariant
four-velocity components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class HyperbolicityError(ValueError):
    """Causality violated: sound speed at or above light speed."""

    def __init__(self, sigma2):
        self.sigma2 = sigma2
        super().__init__(
            f"hyperbolicity violation: sigma^2 = {np.max(sigma2):.6g} >= 1"
        )


@dataclass(frozen=True)
class EquationOfState:
    K: float
    gamma: float

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")

    @property
    def w_max(self) -> float:
        """Upper end of the causal strip: gamma K w^2 < 1."""
        return (self.gamma * self.K) ** -0.5

    def energy_density(self, w):
        return np.abs(w) ** (2.0 / (self.gamma - 1.0))

    def pressure(self, w):
        return self.K * np.abs(w) ** (2.0 * self.gamma / (self.gamma - 1.0))


def eos_quantities(eos: EquationOfState, w):
    """(eps, p, sigma^2, kappa) at matter variable w >= 0."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("matter variable w must be nonnegative")
    eps = eos.energy_density(w)
    p = eos.pressure(w)
    sigma2 = eos.gamma * eos.K * w * w
    kappa = 0.5 * (eos.gamma - 1.0) * np.sqrt(eos.K * eos.gamma) / (1.0 + eos.K * w * w)
    return eps, p, sigma2, kappa


@dataclass(frozen=True)
class FluidState:
    """Matter variable w >= 0 and contravariant four-velocity u^a.

    The normalization g(u, u) = -1 is a constraint that is monitored,
    never enforced here; causality (gamma K w^2 < 1) is checked by the
    operations that need it.
    """

    w: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("matter variable w must be nonnegative")
        if u.shape[-1] != 4:
            raise ValueError("four-velocity must have 4 components")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "u", u)


def admissible_s_range(gamma: float) -> tuple[float, float]:
    """Open interval of regularity orders the evolution accepts.

    The matter variable forces an upper bound 2/(gamma-1) + 3/2 on top of
    the hyperbolic lower bound 7/2; the interval is empty for gamma >= 2.
    """
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    return 3.5, 2.0 / (gamma - 1.0) + 1.5


@dataclass(frozen=True)
class SpacetimeMetric:
    """Lorentzian 4-metric with cached inverse, signature (-, +, +, +)."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        if g.shape[-2:] != (4, 4):
            raise ValueError("metric must have shape (..., 4, 4)")
        if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-12):
            raise ValueError("metric must be symmetric")
        eig = np.linalg.eigvalsh(g)
        if not (np.all(eig[..., 0] < 0) and np.all(eig[..., 1:] > 0)):
            raise ValueError("metric must have signature (-, +, +, +)")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "g_inv", np.linalg.inv(g))

    def lower(self, u):
        return np.einsum("...ab,...b->...a", self.g, u)

    def norm2(self, u):
        return np.einsum("...a,...ab,...b->...", u, self.g, u)


MINKOWSKI = SpacetimeMetric(np.diag([-1.0, 1.0, 1.0, 1.0]))


def normalization_residual(metric: SpacetimeMetric, u):
    """g(u, u) + 1; conserved along stream lines, monitored not enforced."""
    return metric.norm2(u) + 1.0


def projection_and_reflection(metric: SpacetimeMetric, u):
    """Rest-space projection P_ab = g_ab + u_a u_b and the reflection
    Gamma_ab = g_ab + 2 u_a u_b across the rest hyperplane.

    Requires timelike u; P annihilates u, and the index-raised Gamma is
    an involution.
    """
    u = np.asarray(u, dtype=np.float64)
    n2 = metric.norm2(u)
    if np.any(n2 >= 0):
        raise ValueError(
            f"four-velocity must be timelike: g(u,u) = {np.max(n2):.6g} >= 0"
        )
    u_low = metric.lower(u)
    uu = u_low[..., :, None] * u_low[..., None, :]
    P = metric.g + uu
    Gamma = metric.g + 2.0 * uu
    return P, Gamma


def euler_blocks(eos: EquationOfState, g, ginv, w, u):
    """Unvalidated core of `euler_matrices` for batched grid evaluation:
    raw metric arrays in, (..., 4, 5, 5) coefficient matrices out."""
    sigma2 = eos.gamma * eos.K * w * w
    if np.any(sigma2 >= 1.0):
        raise HyperbolicityError(sigma2)
    kappa = 0.5 * (eos.gamma - 1.0) * np.sqrt(eos.K * eos.gamma) / (1.0 + eos.K * w * w)
    u_low = np.einsum("...ab,...b->...a", g, u)
    uu = u_low[..., :, None] * u_low[..., None, :]
    P = g + uu
    Gamma = g + 2.0 * uu
    P_mix = np.einsum("...na,...ab->...nb", ginv, P)
    sk = np.sqrt(sigma2) * kappa

    shape = np.broadcast_shapes(w.shape, u.shape[:-1], g.shape[:-2])
    A = np.zeros(shape + (4, 5, 5))
    for nu in range(4):
        A[..., nu, 0, 0] = kappa ** 2 * u[..., nu]
        A[..., nu, 0, 1:] = sk[..., None] * P_mix[..., nu, :]
        A[..., nu, 1:, 0] = sk[..., None] * P_mix[..., nu, :]
        A[..., nu, 1:, 1:] = Gamma * u[..., nu, None, None]
    return A


def euler_matrices(eos: EquationOfState, metric: SpacetimeMetric, w, u):
    """Symmetric 5x5 coefficient matrices A^nu, nu = 0..3, of the
    first-order fluid system in the unknowns (w, u^0..u^3).

    Returns an array of shape (..., 4, 5, 5); A^0 is positive definite on
    the causal strip.  Raises HyperbolicityError when sigma^2 >= 1.
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("matter variable w must be nonnegative")
    n2 = metric.norm2(u)
    if np.any(n2 >= 0):
        raise ValueError(
            f"four-velocity must be timelike: g(u,u) = {np.max(n2):.6g} >= 0"
        )
    return euler_blocks(eos, metric.g, metric.g_inv, w, u)


def characteristic_det(eos, metric, w, u, xi):
    """(numerical det of xi_nu A^nu, closed-form factorization).

    The closed form is
        -kappa^2 det(g) (u.xi)^3 [ (u.xi)^2 - sigma^2 P(xi, xi) ]
    with P(xi, xi) = g^(ab) xi_a xi_b + (u.xi)^2.
    """
    xi = np.asarray(xi, dtype=np.float64)
    A = euler_matrices(eos, metric, w, u)
    contracted = np.einsum("...n,...nij->...ij", xi, A)
    det_value = np.linalg.det(contracted)
    _, _, sigma2, kappa = eos_quantities(eos, w)
    u_xi = np.einsum("...n,...n->...", u, xi)
    P_xi = np.einsum("...ab,...a,...b->...", metric.g_inv, xi, xi) + u_xi ** 2
    det_g = np.linalg.det(metric.g)
    Q = -(kappa ** 2) * det_g * u_xi ** 3 * (u_xi ** 2 - sigma2 * P_xi)
    return det_value, Q


def classify_covector(eos, metric, w, u, xi, tol=1e-9):
    """'hyperplane', 'sound-cone' or 'non-characteristic' for xi."""
    _, _, sigma2, _ = eos_quantities(eos, np.asarray(w))
    u_xi = np.einsum("...n,...n->...", np.asarray(u), np.asarray(xi))
    P_xi = (
        np.einsum("...ab,...a,...b->...", metric.g_inv, xi, xi) + u_xi ** 2
    )
    scale = max(float(np.max(np.abs(xi))) ** 2, 1e-30)
    if abs(float(u_xi)) <= tol * np.sqrt(scale):
        return "hyperplane"
    if abs(float(u_xi ** 2 - sigma2 * P_xi)) <= tol * scale:
        return "sound-cone"
    return "non-characteristic"


def sound_cone_margin(metric: SpacetimeMetric, u, xi, sigma2):
    """(xi.u)^2 - sigma^2 P(xi, xi) for an arbitrary squared sound speed;
    positive means xi is spacelike for the fluid system."""
    u_xi = np.einsum("...n,...n->...", np.asarray(u), np.asarray(xi))
    P_xi = np.einsum("...ab,...a,...b->...", metric.g_inv, xi, xi) + u_xi ** 2
    return u_xi ** 2 - np.asarray(sigma2) * P_xi


def spacelike_check(eos, metric, w, u, t_covector):
    """(is_spacelike, margin) of t_covector for the state's sound cone."""
    _, _, sigma2, _ = eos_quantities(eos, np.asarray(np.abs(w)))
    margin = sound_cone_margin(metric, u, t_covector, sigma2)
    return bool(np.all(margin > 0)), margin
