"""First-order evolution of the coupled metric-fluid system.

State vector U (55 components per grid point):
    U[0:10]   metric deviation g_ab - eta_ab          (10 symmetric comps)
    U[10:50]  first derivatives d_gamma g_ab, stored per metric component
              in slots (d_x1, d_x2, d_x3, d_t)
    U[50:55]  fluid (w, u^1, u^2, u^3, u^0 - 1)

The metric block is the harmonic-gauge reduction of the field equations:
the wave equation

    g^{mn} d_m d_n g_ab = 2 N_ab(g, dg) - 16 pi T_ab
                          + 8 pi (g^{mn} T_mn) g_ab

written as transport of the derivative slots.  N_ab is the purely
quadratic part of the Ricci tensor (all second-derivative content removed
together with the gauge-source gradients), assembled algebraically from
(g, dg).  The fluid block reuses the symmetric matter matrices with the
connection contractions folded into the lower-order term, built from the
dg slots and never from re-differentiated metric components.

Time stepping: RK4 with fourth-order centered differences, scalar
five-point high-frequency dissipation, copy (outflow) boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fields import Grid, GridField, scale_field
from .fluid import EquationOfState, euler_blocks
from .spaces import dyadic_l2_norm, partition_for
from . import constraints as cst

ETA = np.diag([-1.0, 1.0, 1.0, 1.0])
SYM4 = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]
N_STATE = 55

# state fluid order (w, u1, u2, u3, u0-1) <-> matter-block order (w, u0..u3)
_GATHER_EULER = [0, 4, 1, 2, 3]
_SCATTER_STATE = [0, 2, 3, 4, 1]


class EvolutionError(RuntimeError):
    pass


class CFLViolation(EvolutionError):
    pass


def sym4_to_full(comps: np.ndarray) -> np.ndarray:
    full = np.empty(comps.shape[1:] + (4, 4))
    for k, (a, b) in enumerate(SYM4):
        full[..., a, b] = comps[k]
        full[..., b, a] = comps[k]
    return full


def full_to_sym4(full: np.ndarray) -> np.ndarray:
    out = np.empty((10,) + full.shape[:-2])
    for k, (a, b) in enumerate(SYM4):
        out[k] = full[..., a, b]
    return out


# ------------------------------------------------------------- stencils


def _pad_edge(arr, width):
    pads = [(0, 0)] * (arr.ndim - 3) + [(width, width)] * 3
    return np.pad(arr, pads, mode="edge")


def _shifted(p, lead, axis, k):
    sl = [slice(2, -2)] * 3
    n = p.shape[lead + axis]
    sl[axis] = slice(2 + k, n - 2 + k)
    return p[(slice(None),) * lead + tuple(sl)]


def d4(arr: np.ndarray, axis: int, h: float, padded: np.ndarray | None = None) -> np.ndarray:
    """Fourth-order centered derivative with copy boundaries (trailing axes)."""
    p = _pad_edge(arr, 2) if padded is None else padded
    lead = p.ndim - 3
    out = np.subtract(_shifted(p, lead, axis, 1), _shifted(p, lead, axis, -1))
    out *= 8.0
    out -= _shifted(p, lead, axis, 2)
    out += _shifted(p, lead, axis, -2)
    out /= 12.0 * h
    return out


def kreiss_oliger(arr: np.ndarray, h: float, sigma: float) -> np.ndarray:
    """Five-point fourth-difference damping, -sigma/(16 h) sum_axes D4."""
    if sigma == 0.0:
        return np.zeros_like(arr)
    p = _pad_edge(arr, 2)
    lead = arr.ndim - 3
    out = np.zeros_like(arr)
    buf = np.empty_like(arr)
    for axis in range(3):
        np.add(_shifted(p, lead, axis, 1), _shifted(p, lead, axis, -1), out=buf)
        buf *= -4.0
        out += buf
        np.add(_shifted(p, lead, axis, 2), _shifted(p, lead, axis, -2), out=buf)
        out += buf
        np.multiply(_shifted(p, lead, axis, 0), 6.0, out=buf)
        out += buf
    out *= -(sigma / (16.0 * h))
    return out


# ---------------------------------------------------------- state carrier


@dataclass
class StateVector:
    """55-component state sampled on a grid; data shape (55, n, n, n)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (N_STATE,) + self.grid.shape:
            raise ValueError(f"state shape {self.data.shape} does not match grid")

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros((N_STATE,) + grid.shape))

    def copy(self):
        return StateVector(self.grid, self.data.copy())

    @property
    def g_dev(self):
        return self.data[0:10]

    @property
    def dg(self):
        return self.data[10:50].reshape((10, 4) + self.grid.shape)

    @property
    def fluid(self):
        return self.data[50:55]

    def metric(self) -> np.ndarray:
        return ETA + sym4_to_full(self.g_dev)

    def dg_full(self) -> np.ndarray:
        """(..., a, b, c) = d_c g_ab from the slot storage."""
        dg = self.dg
        out = np.empty(self.grid.shape + (4, 4, 4))
        for k, (a, b) in enumerate(SYM4):
            out[..., a, b, 0] = dg[k, 3]
            for c in range(3):
                out[..., a, b, c + 1] = dg[k, c]
            if a != b:
                out[..., b, a, :] = out[..., a, b, :]
        return out

    def four_velocity(self) -> np.ndarray:
        u = np.empty(self.grid.shape + (4,))
        u[..., 0] = 1.0 + self.fluid[4]
        for a in range(3):
            u[..., a + 1] = self.fluid[1 + a]
        return u

    def block_fields(self):
        """(g_dev, dg, fluid) wrapped as GridFields for norm evaluation."""
        return (
            GridField(self.grid, self.data[0:10]),
            GridField(self.grid, self.data[10:50]),
            GridField(self.grid, self.data[50:55]),
        )


def christoffel4(ginv: np.ndarray, dgf: np.ndarray) -> np.ndarray:
    """G^m_ab = 1/2 g^{mn} (d_a g_nb + d_b g_na - d_n g_ab)."""
    lead = ginv.shape[:-2]
    P = int(np.prod(lead, dtype=np.int64)) if lead else 1
    gi = ginv.reshape(P, 4, 4)
    dg = dgf.reshape(P, 4, 4, 4)
    out = np.empty((P, 4, 4, 4))
    chunk = 8192
    for start in range(0, P, chunk):
        sl = slice(start, min(start + chunk, P))
        C = dg[sl].swapaxes(-1, -2) + dg[sl]
        C -= np.moveaxis(dg[sl], -1, -3)
        pc = C.shape[0]
        out[sl] = 0.5 * np.matmul(gi[sl], C.reshape(pc, 4, 16)).reshape(pc, 4, 4, 4)
    return out.reshape(lead + (4, 4, 4))


def harmonic_residual(state: StateVector) -> np.ndarray:
    """Gauge source H^a = g^{mn} G^a_mn from the state's derivative slots."""
    g = state.metric()
    ginv = np.linalg.inv(g)
    gam = christoffel4(ginv, state.dg_full())
    return np.einsum("...mn,...amn->...a", ginv, gam, optimize=True)


def ricci_quadratic(g: np.ndarray, ginv: np.ndarray, dgf: np.ndarray) -> np.ndarray:
    """N_ab: the quadratic (second-derivative-free) Ricci remainder in

        R_ab = -1/2 g^{mn} d_m d_n g_ab
               + 1/2 (g_ra d_b H^r + g_rb d_a H^r) + N_ab,

    with H^r the contracted Christoffel.  Evaluated by dropping every
    second-derivative term from the defining expressions; the result is
    algebraic in (g, dg).  The point axis is processed in cache-sized
    chunks so the rank-3 intermediates never spill to main memory.
    """
    lead = g.shape[:-2]
    P = int(np.prod(lead, dtype=np.int64)) if lead else 1
    gf = g.reshape(P, 4, 4)
    gi = ginv.reshape(P, 4, 4)
    dg = dgf.reshape(P, 4, 4, 4)
    N = np.empty((P, 4, 4))
    chunk = 8192
    for start in range(0, P, chunk):
        sl = slice(start, min(start + chunk, P))
        N[sl] = _ricci_quadratic_chunk(gf[sl], gi[sl], dg[sl])
    return N.reshape(lead + (4, 4))


def _ricci_quadratic_chunk(gf, gi, dg):
    P = gf.shape[0]
    # d_l g^{mn} = -g^{mr} g^{ns} d_l g_rs
    tmp = np.matmul(gi, dg.reshape(P, 4, 16)).reshape(P, 4, 4, 4)  # [m, s, l]
    dginv = -np.ascontiguousarray(
        np.matmul(gi, tmp.transpose(0, 2, 1, 3).reshape(P, 4, 16))
        .reshape(P, 4, 4, 4).transpose(0, 2, 1, 3)
    )                                                              # [m, n, l]

    C = dg.swapaxes(-1, -2) + dg
    C -= np.moveaxis(dg, -1, -3)
    C = np.ascontiguousarray(C)
    gam = 0.5 * np.matmul(gi, C.reshape(P, 4, 16)).reshape(P, 4, 4, 4)

    # [d_m G^m_ab] without d2 g: 1/2 (d_m g^{mn}) C_nab
    dtr = np.einsum("pmnm->pn", dginv)
    p1 = 0.5 * np.matmul(dtr[:, None, :], C.reshape(P, 4, 16)).reshape(P, 4, 4)
    # [d_a G^m_mb] without d2 g: 1/2 (d_a g^{mn}) d_b g_mn
    p2 = 0.5 * np.matmul(
        np.ascontiguousarray(dginv.reshape(P, 16, 4).transpose(0, 2, 1)),
        dg.reshape(P, 16, 4),
    )
    gtr = np.einsum("pmmn->pn", gam)
    gg1 = np.matmul(gtr[:, None, :], gam.reshape(P, 4, 16)).reshape(P, 4, 4)
    left = np.ascontiguousarray(gam.transpose(0, 2, 1, 3)).reshape(P, 4, 16)
    right = left.reshape(P, 16, 4)
    gg2 = np.matmul(left, right)

    # [d_b H^r] without d2 g, H^r = g^{rn} g^{ms} (d_m g_ns - 1/2 d_n g_ms)
    tr1 = np.matmul(
        np.ascontiguousarray(dg.transpose(0, 1, 3, 2)).reshape(P, 4, 16),
        gi.reshape(P, 16, 1),
    )[..., 0]                                        # g^{ms} d_m g_ns
    tr2 = np.matmul(gi.reshape(P, 1, 16), dg.reshape(P, 16, 4))[:, 0, :]
    vec = tr1 - 0.5 * tr2
    e12 = np.matmul(
        np.ascontiguousarray(dginv.transpose(0, 1, 3, 2)).reshape(P, 16, 4),
        vec[..., None],
    ).reshape(P, 4, 4)                               # [r, b]
    A_bms = np.ascontiguousarray(dginv.transpose(0, 3, 1, 2)).reshape(P, 4, 16)
    B_nms = np.ascontiguousarray(dg.transpose(0, 1, 3, 2)).reshape(P, 4, 16)
    q1 = np.matmul(B_nms, A_bms.transpose(0, 2, 1))  # [n, b]
    q2 = np.matmul(A_bms, dg.reshape(P, 16, 4)).transpose(0, 2, 1)
    e34 = np.matmul(gi, q1 - 0.5 * q2)
    dH = e12 + e34

    gdH = np.matmul(gf, dH)
    return p1 - p2 + gg1 - gg2 - 0.5 * (gdH + gdH.swapaxes(-1, -2))


def stress_energy(eos: EquationOfState, g: np.ndarray, w: np.ndarray,
                  u: np.ndarray) -> np.ndarray:
    """Covariant T_ab = (eps + p) u_a u_b + p g_ab of the polytrope."""
    eps = eos.energy_density(w)
    p = eos.pressure(w)
    u_low = np.einsum("...ab,...b->...a", g, u)
    return (eps + p)[..., None, None] * u_low[..., :, None] * u_low[..., None, :] \
        + p[..., None, None] * g


def fluid_lower_order(eos, g, ginv, w, u, gam4):
    """Connection contractions of the matter block, (w, u^0..u^3) order."""
    w = np.abs(w)
    sigma2 = eos.gamma * eos.K * w * w
    kappa = 0.5 * (eos.gamma - 1.0) * np.sqrt(eos.K * eos.gamma) / (1.0 + eos.K * w * w)
    u_low = np.einsum("...ab,...b->...a", g, u)
    uu = u_low[..., :, None] * u_low[..., None, :]
    P_mix = np.einsum("...na,...ab->...nb", ginv, g + uu, optimize=True)
    # cov[n, b] = G^b_nr u^r; advected: adv[b] = u^n cov[n, b]
    cov = np.einsum("...bnr,...r->...nb", gam4, u, optimize=True)
    adv = np.einsum("...n,...nb->...b", u, cov, optimize=True)
    out = np.empty(w.shape + (5,))
    sk = np.sqrt(sigma2) * kappa
    out[..., 0] = sk * np.einsum("...nb,...nb->...", P_mix, cov, optimize=True)
    out[..., 1:] = np.einsum("...ab,...b->...a", g + 2.0 * uu, adv, optimize=True)
    return out


# ------------------------------------------------------------- the system


@dataclass
class FirstOrderSystem:
    """Evaluator bundle for the coupled 55-component system.

    `mu` is the configured equivalence bound of the A^0-weighted norm;
    it is validated against sampled states by `estimate_mu`.
    """

    eos: EquationOfState
    dissipation: float = 0.05
    mu: float = 10.0

    # ---------------------------------------------------------- blocks

    def metric_time_block(self, ginv):
        """A^0 sub-block of one derivative 4-slot: diag(g^{ab}, -g^{00})."""
        m = np.zeros(ginv.shape[:-2] + (4, 4))
        m[..., 0:3, 0:3] = ginv[..., 1:, 1:]
        m[..., 3, 3] = -ginv[..., 0, 0]
        return m

    def metric_flux_block(self, ginv, c):
        """A^c sub-block: couples the time slot to the spatial slots."""
        m = np.zeros(ginv.shape[:-2] + (4, 4))
        m[..., 0:3, 3] = ginv[..., c + 1, 1:]
        m[..., 3, 0:3] = ginv[..., c + 1, 1:]
        m[..., 3, 3] = 2.0 * ginv[..., 0, c + 1]
        return m

    def full_matrices(self, state: StateVector, sample: np.ndarray):
        """Dense (A^0, A^1, A^2, A^3) at sampled flat indices, 55 x 55 each,
        for symmetry and positivity audits."""
        g = state.metric().reshape(-1, 4, 4)[sample]
        ginv = np.linalg.inv(g)
        w = state.fluid[0].reshape(-1)[sample]
        u = state.four_velocity().reshape(-1, 4)[sample]
        Af = euler_blocks(self.eos, g, ginv, np.abs(w), u)
        mats = []
        for nu in range(4):
            A = np.zeros((len(sample), N_STATE, N_STATE))
            if nu == 0:
                A[:, 0:10, 0:10] = np.eye(10)
                blk = self.metric_time_block(ginv)
            else:
                blk = self.metric_flux_block(ginv, nu - 1)
            for k in range(10):
                A[:, 10 + 4 * k:14 + 4 * k, 10 + 4 * k:14 + 4 * k] = blk
            # fluid block, permuted into state order; flux blocks enter the
            # right-hand side with a sign flip relative to the matter system
            sgn = 1.0 if nu == 0 else -1.0
            perm = np.ix_(range(len(sample)), _GATHER_EULER, _GATHER_EULER)
            A[:, 50:55, 50:55] = sgn * Af[:, nu][perm]
            mats.append(A)
        return mats

    def estimate_mu(self, state: StateVector, stride: int = 5) -> float:
        """Spectral bound of A^0 over a state subsample."""
        n3 = state.grid.n_per_axis ** 3
        sample = np.arange(0, n3, stride)
        A0 = self.full_matrices(state, sample)[0]
        eig = np.linalg.eigvalsh(A0)
        return float(max(eig.max(), 1.0 / eig.min()))

    # ------------------------------------------------------------- rhs

    def rhs(self, diff: StateVector, coeff: StateVector | None = None) -> np.ndarray:
        """d/dt of `diff`; coefficients and sources frozen at `coeff` when
        given (the linearized transport of the fixed-point iteration)."""
        co = coeff if coeff is not None else diff
        grid = diff.grid
        h = grid.spacing
        g = co.metric()
        ginv = np.linalg.inv(g)
        dgf_c = co.dg_full()
        gam4 = christoffel4(ginv, dgf_c)
        w_c = np.abs(co.fluid[0])
        u_c = co.four_velocity()

        out = np.empty_like(diff.data)
        out[0:10] = diff.dg[:, 3]

        padded = _pad_edge(diff.data[10:50], 2)
        ddg = np.stack([d4(None, a, h, padded=padded) for a in range(3)], axis=1)
        ddg = ddg.reshape((10, 4, 3) + grid.shape)  # [comp, slot, axis]

        # quadratic + matter sources of the wave equation
        N = ricci_quadratic(g, ginv, dgf_c)
        T = stress_energy(self.eos, g, w_c, u_c)
        trT = np.einsum("...mn,...mn->...", ginv, T, optimize=True)
        S = 2.0 * N - 16.0 * np.pi * T + 8.0 * np.pi * trT[..., None, None] * g
        S_k = full_to_sym4(S)

        out_dg = np.empty((10, 4) + grid.shape)
        out_dg[:, 0:3] = ddg[:, 3, :]
        g00 = ginv[..., 0, 0]
        acc = -S_k
        for c in range(3):
            acc += (2.0 * ginv[..., 0, c + 1]) * ddg[:, 3, c]
        for a in range(3):
            for b in range(3):
                acc += ginv[..., a + 1, b + 1] * ddg[:, b, a]
        out_dg[:, 3] = acc / (-g00)
        out[10:50] = out_dg.reshape((40,) + grid.shape)

        # fluid block: A^0 dv/dt + A^c d_c v + lower = 0, with the spatial
        # flux contracted against the block structure directly
        sigma2 = self.eos.gamma * self.eos.K * w_c * w_c
        if np.any(sigma2 >= 1.0):
            from .fluid import HyperbolicityError
            raise HyperbolicityError(sigma2)
        kappa = 0.5 * (self.eos.gamma - 1.0) * math.sqrt(self.eos.K * self.eos.gamma) \
            / (1.0 + self.eos.K * w_c * w_c)
        sk = np.sqrt(sigma2) * kappa
        u_low = np.einsum("...ab,...b->...a", g, u_c)
        uu = u_low[..., :, None] * u_low[..., None, :]
        P_mix = np.einsum("...na,...ab->...nb", ginv, g + uu, optimize=True)
        Gam_ref = g + 2.0 * uu

        v = diff.fluid[_GATHER_EULER]
        pad_v = _pad_edge(v, 2)
        dv = np.stack([d4(None, a, h, padded=pad_v) for a in range(3)], axis=-1)
        # dv shape (5, n, n, n, 3); advection along the spatial velocity
        usp = u_c[..., 1:]
        adv = np.einsum("j...c,...c->j...", dv, usp, optimize=True)
        flux = np.empty(grid.shape + (5,))
        flux[..., 0] = kappa ** 2 * adv[0] + sk * np.einsum(
            "...cb,b...c->...", P_mix[..., 1:, :], dv[1:], optimize=True)
        flux[..., 1:] = sk[..., None] * np.einsum(
            "...ca,...c->...a", P_mix[..., 1:, :], dv[0], optimize=True
        ) + np.einsum("...ab,b...->...a", Gam_ref, adv[1:], optimize=True)

        lower = fluid_lower_order(self.eos, g, ginv, w_c, u_c, gam4)

        A0 = np.empty(grid.shape + (5, 5))
        A0[..., 0, 0] = kappa ** 2 * u_c[..., 0]
        A0[..., 0, 1:] = sk[..., None] * P_mix[..., 0, :]
        A0[..., 1:, 0] = A0[..., 0, 1:]
        A0[..., 1:, 1:] = Gam_ref * u_c[..., 0, None, None]
        dvdt = np.linalg.solve(A0, -(flux + lower)[..., None])[..., 0]
        for i in range(5):
            out[50 + i] = np.moveaxis(dvdt, -1, 0)[_SCATTER_STATE[i]]

        out += kreiss_oliger(diff.data, h, self.dissipation)
        return out

    # -------------------------------------------------------- characteristics

    def max_char_speed(self, state: StateVector, stride: int = 7) -> float:
        """Spectral radius of the propagation pencils over a subsample."""
        n3 = state.grid.n_per_axis ** 3
        sample = np.arange(0, n3, stride * 37 + 1)
        mats = self.full_matrices(state, sample)
        A0 = mats[0]
        speed = 0.0
        for c in range(3):
            vals = scipy.linalg.eigh(
                mats[c + 1][0], A0[0], eigvals_only=True
            )
            speed = max(speed, float(np.max(np.abs(vals))))
            # a few more sample points
            for idx in range(1, len(sample), max(1, len(sample) // 8)):
                vals = scipy.linalg.eigh(
                    mats[c + 1][idx], A0[idx], eigvals_only=True
                )
                speed = max(speed, float(np.max(np.abs(vals))))
        return speed


def assemble_einstein_system(eos: EquationOfState, dissipation: float = 0.05,
                             mu: float = 10.0) -> FirstOrderSystem:
    return FirstOrderSystem(eos=eos, dissipation=dissipation, mu=mu)


# ------------------------------------------------------------ initial data


def initial_state(gd: cst.GravitationalData, w: GridField | None = None,
                  ubar: GridField | None = None) -> StateVector:
    """State on the initial slice: g_ab = h_ab, g_0a = 0, g_00 = -1,
    d_t g_ab = -2 K_ab, spatial slots by fourth-order differences, and the
    four time derivatives of g_0m fixed by killing the gauge source."""
    grid = gd.grid
    h = grid.spacing
    state = StateVector.zero(grid)
    hf = cst.sym_to_full(gd.h.data)
    Kf = cst.sym_to_full(gd.Kext.data)
    hinv = np.linalg.inv(hf)

    # metric deviation: spatial block only
    for k, (a, b) in enumerate(SYM4):
        if a >= 1 and b >= 1:
            dev = hf[..., a - 1, b - 1] - (1.0 if a == b else 0.0)
            state.data[k] = dev

    dg = state.dg
    for k in range(10):
        for c in range(3):
            dg[k, c] = d4(state.data[k], c, h)

    # time slots: d_t g_ab = -2 K_ab on the spatial block
    for k, (a, b) in enumerate(SYM4):
        if a >= 1 and b >= 1:
            dg[k, 3] = -2.0 * Kf[..., a - 1, b - 1]

    # gauge source zeroing fixes d_t g_00 = 2 tr K and
    # d_t g_0b = h^{ac}(d_a h_bc - 1/2 d_b h_ac)
    trK = np.einsum("...ab,...ab->...", hinv, Kf)
    dg[0, 3] = 2.0 * trK
    dh = np.empty(grid.shape + (3, 3, 3))
    for k, (a, b) in enumerate(SYM4):
        if a >= 1 and b >= 1:
            for c in range(3):
                dh[..., a - 1, b - 1, c] = dg[k, c]
                dh[..., b - 1, a - 1, c] = dg[k, c]
    X = np.einsum("...ac,...bca->...b", hinv, dh, optimize=True) \
        - 0.5 * np.einsum("...ac,...acb->...b", hinv, dh, optimize=True)
    for b in range(3):
        dg[1 + b, 3] = X[..., b]
    state.data[10:50] = dg.reshape((40,) + grid.shape)

    if w is not None:
        state.data[50] = w.data[0]
        ub = ubar.data if ubar is not None else np.zeros((3,) + grid.shape)
        state.data[51:54] = ub
        rho2 = np.einsum("...ab,a...,b...->...", hf, ub, ub, optimize=True)
        state.data[54] = np.sqrt(1.0 + rho2) - 1.0
    return state


# ------------------------------------------------------------ time stepping


def step(system: FirstOrderSystem, state: StateVector, dt: float,
         coeff_pair=None) -> StateVector:
    """One RK4 step; `coeff_pair = (U_k(t), U_k(t+dt))` freezes the
    coefficients on a linear interpolation of a stored trajectory."""

    def coeff_at(theta):
        a, b = coeff_pair
        if theta == 0.0:
            return a
        return StateVector(state.grid, (1 - theta) * a.data + theta * b.data)

    if coeff_pair is None:
        k1 = system.rhs(StateVector(state.grid, state.data))
        k2 = system.rhs(StateVector(state.grid, state.data + 0.5 * dt * k1))
        k3 = system.rhs(StateVector(state.grid, state.data + 0.5 * dt * k2))
        k4 = system.rhs(StateVector(state.grid, state.data + dt * k3))
    else:
        k1 = system.rhs(StateVector(state.grid, state.data), coeff=coeff_at(0.0))
        mid = coeff_at(0.5)
        k2 = system.rhs(StateVector(state.grid, state.data + 0.5 * dt * k1), coeff=mid)
        k3 = system.rhs(StateVector(state.grid, state.data + 0.5 * dt * k2), coeff=mid)
        k4 = system.rhs(StateVector(state.grid, state.data + dt * k3), coeff=coeff_at(1.0))
    new = state.data + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(new)):
        bad = np.argwhere(~np.isfinite(new))[0]
        raise EvolutionError(f"non-finite state component {bad[0]} at index {tuple(bad[1:])}")
    return StateVector(state.grid, new)


def check_cfl(system, state, dt, cfl=0.25):
    lam = system.max_char_speed(state)
    limit = cfl * state.grid.spacing / max(lam, 1e-12)
    if dt > limit * (1 + 1e-12):
        raise CFLViolation(
            f"dt = {dt:.4g} exceeds cfl limit {limit:.4g} "
            f"(max speed {lam:.3f}, spacing {state.grid.spacing:.3f})"
        )


# ------------------------------------------------------------ energy norms


def energy_norm(state: StateVector, s: float, delta: float,
                system: FirstOrderSystem | None = None) -> float:
    """Block-weighted dyadic norm of the state at order s - 1:

        |||U|||^2 = sum_j [ 2^((3/2+d)2j)   |L^(s-1) shell(g)|^2
                          + 2^((3/2+d+1)2j) <shell(dg), A~0 shell(dg)>
                          + 2^((3/2+d+2)2j) <shell(v),  A^0 shell(v)> ]

    With `system` None the matrix weights are the identity and the value
    reduces to the blockwise scalar norms.
    """
    from .fields import bessel_apply
    from .spaces import SHELL_HALF_WIDTH

    grid = state.grid
    part = partition_for(grid)
    base = Grid(grid.n_per_axis, SHELL_HALF_WIDTH)
    r = base.radius()
    h3 = base.spacing ** 3
    sm1 = s - 1.0

    if system is not None:
        g = state.metric()
        ginv = np.linalg.inv(g)
        m4 = system.metric_time_block(ginv)                      # (..., 4, 4)
        Af = euler_blocks(system.eos, g, ginv, np.abs(state.fluid[0]),
                          state.four_velocity())[..., 0, :, :]
        A5 = Af[..., _GATHER_EULER, :][..., :, _GATHER_EULER]    # state order

    total = 0.0
    for j in range(part.j_max + 1):
        eps = 2.0 ** j
        prof = part.scaled_profile(j, r) ** 2
        shell = scale_field(GridField(grid, state.data), eps, target=base).data * prof
        lam = bessel_apply(GridField(base, shell), sm1).data

        quad_g = np.sum(lam[0:10] ** 2, axis=0)
        e = lam[10:50].reshape((10, 4) + base.shape)
        v = lam[50:55]
        if system is None:
            quad_dg = np.sum(e ** 2, axis=(0, 1))
            quad_v = np.sum(v ** 2, axis=0)
        else:
            m4s = scale_field(GridField(grid, m4.reshape(grid.shape + (16,)).transpose(3, 0, 1, 2)),
                              eps, target=base).data.transpose(1, 2, 3, 0).reshape(base.shape + (4, 4))
            A5s = scale_field(GridField(grid, A5.reshape(grid.shape + (25,)).transpose(3, 0, 1, 2)),
                              eps, target=base).data.transpose(1, 2, 3, 0).reshape(base.shape + (5, 5))
            quad_dg = np.einsum("kc...,...cd,kd...->...", e, m4s, e, optimize=True)
            quad_v = np.einsum("i...,...ij,j...->...", v, A5s, v, optimize=True)

        total += h3 * (
            2.0 ** ((1.5 + delta) * 2 * j) * quad_g.sum()
            + 2.0 ** ((2.5 + delta) * 2 * j) * quad_dg.sum()
            + 2.0 ** ((3.5 + delta) * 2 * j) * quad_v.sum()
        )
    return math.sqrt(max(total, 0.0))


def lower_state_norm(state: StateVector, delta: float) -> float:
    """Fast (0, delta)-block norm used by the contraction monitor."""
    gb, dgb, vb = state.block_fields()
    return math.sqrt(
        dyadic_l2_norm(gb, delta) ** 2
        + dyadic_l2_norm(dgb, delta + 1.0) ** 2
        + dyadic_l2_norm(vb, delta + 2.0) ** 2
    )


# ------------------------------------------------------- slice extraction


def extract_slice_data(state: StateVector, eos: EquationOfState) -> cst.GravitationalData:
    """3+1 split of the evolved state: (h, K, z, j) for residual monitors.

    Lapse and shift are read from the evolved metric; K uses the time
    derivative slots and the spatial connection assembled from dg.
    """
    grid = state.grid
    g = state.metric()
    ginv = np.linalg.inv(g)
    dgf = state.dg_full()

    hf = g[..., 1:, 1:]
    hinv3 = np.linalg.inv(hf)
    beta_low = g[..., 0, 1:]
    beta_up = np.einsum("...ab,...b->...a", hinv3, beta_low)
    alpha2 = np.einsum("...a,...a->...", beta_up, beta_low) - g[..., 0, 0]
    alpha = np.sqrt(np.maximum(alpha2, 1e-30))

    # D_a beta_b = d_a beta_b - G3^c_ab beta_c, all from the dg slots
    dh3 = dgf[..., 1:, 1:, 1:]                       # d_c h_ab at [a, b, c]
    gam3 = 0.5 * (
        np.einsum("...cd,...dba->...cab", hinv3, dh3)
        + np.einsum("...cd,...dab->...cab", hinv3, dh3)
        - np.einsum("...cd,...abd->...cab", hinv3, dh3)
    )
    dbeta = dgf[..., 0, 1:, 1:].swapaxes(-1, -2)     # [a, b] = d_a g_0(b+1)
    Dbeta = dbeta - np.einsum("...cab,...c->...ab", gam3, beta_low)
    dtg = dgf[..., 1:, 1:, 0]
    K = -(dtg - Dbeta - Dbeta.swapaxes(-1, -2)) / (2.0 * alpha[..., None, None])

    w = np.abs(state.fluid[0])
    u = state.four_velocity()
    eps = eos.energy_density(w)
    p = eos.pressure(w)
    T_up = (eps + p)[..., None, None] * u[..., :, None] * u[..., None, :] \
        + p[..., None, None] * ginv
    n_low = np.zeros(grid.shape + (4,))
    n_low[..., 0] = -alpha
    n_up = np.einsum("...mn,...n->...m", ginv, n_low)
    Tn = np.einsum("...mn,...n->...m", T_up, n_low)
    z = np.einsum("...m,...m->...", n_low, Tn)
    j_up = -(Tn + n_up * z[..., None])

    ones = GridField(grid, np.ones((1,) + grid.shape))
    zeros3 = GridField(grid, np.zeros((3,) + grid.shape))
    return cst.GravitationalData(
        h=GridField(grid, cst.full_to_sym(hf)),
        Kext=GridField(grid, cst.full_to_sym(K)),
        z=GridField(grid, z[None]),
        j=GridField(grid, np.moveaxis(j_up[..., 1:], -1, 0)),
        alpha=ones, phi=ones, W=zeros3,
    )


def fit_growth_constant(times, energies) -> float:
    """Smallest C >= 0 with E(t) <= e^(Ct) (E(0) + C t) at every sample."""
    times = np.asarray(times)
    energies = np.asarray(energies)
    e0 = energies[0]

    def ok(c):
        bound = np.exp(c * times) * (e0 + c * times)
        return np.all(energies <= bound * (1 + 1e-12) + 1e-300)

    if ok(0.0):
        return 0.0
    hi = 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e8:
            return math.inf
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class EnergyMonitor:
    """Time series of the run diagnostics."""

    s: float
    delta: float
    times: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    energy_flat: list = field(default_factory=list)
    harmonic: list = field(default_factory=list)
    normalization: list = field(default_factory=list)
    hamiltonian: list = field(default_factory=list)
    momentum: list = field(default_factory=list)
    a0_rate: list = field(default_factory=list)

    @property
    def growth_constant(self) -> float:
        return fit_growth_constant(self.times, [e ** 2 for e in self.energy])

    def rows(self):
        header = ["t", "energy", "H_norm", "norm_residual", "ham_residual",
                  "mom_residual"]
        body = [
            [t, e, hn, nr, ha, mo]
            for t, e, hn, nr, ha, mo in zip(
                self.times, self.energy, self.harmonic, self.normalization,
                self.hamiltonian, self.momentum)
        ]
        return header, body


def _l2(grid, arr):
    return float(np.sqrt(grid.spacing ** 3 * np.sum(arr ** 2)))


def record_diagnostics(monitor: EnergyMonitor, system: FirstOrderSystem,
                       state: StateVector, t: float, prev=None):
    grid = state.grid
    monitor.times.append(t)
    monitor.energy.append(energy_norm(state, monitor.s, monitor.delta, system))
    monitor.energy_flat.append(energy_norm(state, monitor.s, monitor.delta, None))
    H = harmonic_residual(state)
    monitor.harmonic.append(_l2(grid, H))
    g = state.metric()
    u = state.four_velocity()
    nres = np.einsum("...ab,...a,...b->...", g, u, u) + 1.0
    monitor.normalization.append(_l2(grid, nres))
    gd = extract_slice_data(state, system.eos)
    _, _, norms = cst.constraint_residuals(gd, monitor.delta)
    monitor.hamiltonian.append(norms["hamiltonian"])
    monitor.momentum.append(norms["momentum"])
    if prev is not None:
        prev_state, prev_t = prev
        if t > prev_t:
            m_now = system.metric_time_block(np.linalg.inv(state.metric()))
            m_prev = system.metric_time_block(np.linalg.inv(prev_state.metric()))
            monitor.a0_rate.append(float(np.max(np.abs(m_now - m_prev)) / (t - prev_t)))


def monitor_run(system: FirstOrderSystem, state0: StateVector, T: float,
                dt: float, s: float, delta: float, cfl: float = 0.25,
                record_every: int | None = None):
    """Evolve to time T recording the energy and constraint series."""
    check_cfl(system, state0, dt, cfl)
    n_steps = max(1, int(round(T / dt)))
    record_every = record_every or max(1, n_steps // 16)
    monitor = EnergyMonitor(s=s, delta=delta)
    state = state0
    record_diagnostics(monitor, system, state, 0.0)
    prev = (state, 0.0)
    for m in range(n_steps):
        state = step(system, state, dt)
        t = (m + 1) * dt
        if (m + 1) % record_every == 0 or m == n_steps - 1:
            record_diagnostics(monitor, system, state, t, prev)
            prev = (state, t)
    return state, monitor


# ------------------------------------------------------ fixed-point driver


@dataclass
class PicardReport:
    ratios: list
    converged: bool
    iterations: int


def picard_iteration(system: FirstOrderSystem, state0: StateVector, T: float,
                     dt: float, k_max: int, delta: float = -1.0,
                     tol: float = 1e-6):
    """Solve the quasilinear system as a limit of linear solves with the
    coefficients frozen at the previous iterate's trajectory.

    Returns (final trajectory, PicardReport); the contraction ratio is
    measured in the sup-in-time lower-order block norm.
    """
    n_steps = max(1, int(round(T / dt)))
    grid = state0.grid

    def evolve_frozen(traj):
        out = [state0]
        for m in range(n_steps):
            pair = (traj[min(m, len(traj) - 1)], traj[min(m + 1, len(traj) - 1)])
            out.append(step(system, out[-1], dt, coeff_pair=pair))
        return out

    traj = [state0] * (n_steps + 1)
    diffs = []
    prev_diff = None
    ratios = []
    for k in range(k_max):
        new = evolve_frozen(traj)
        diff = max(
            lower_state_norm(StateVector(grid, a.data - b.data), delta)
            for a, b in zip(new, traj)
        )
        diffs.append(diff)
        if prev_diff is not None and prev_diff > 0:
            ratios.append(diff / prev_diff)
        traj = new
        if diff <= tol:
            break
        prev_diff = diff
    converged = diffs[-1] <= tol or (bool(ratios) and all(r < 1 for r in ratios[-2:]))
    return traj, PicardReport(ratios=ratios, converged=converged,
                              iterations=len(diffs))


def dt_from_cfl(system, state, cfl=0.25):
    lam = system.max_char_speed(state)
    return cfl * state.grid.spacing / max(lam, 1e-12)


def validate_order(gamma: float, s: float):
    lo, hi = (3.5, 2.0 / (gamma - 1.0) + 1.5)
    if not (lo < s < hi):
        raise ValueError(
            f"regularity order s = {s} outside the admissible open interval "
            f"({lo}, {hi}) for gamma = {gamma}"
        )
