"""Conformal constraint pipeline on an asymptotically flat slice.

Free data (hbar, Abar, yhat, vhat) are turned into physical data
(h, K, z, j) in three elliptic stages:

  1. alpha solves  -lap_hbar alpha + R(hbar)/8 alpha = 0  (alpha -> 1),
     giving the zero-scalar-curvature metric hhat = alpha^4 hbar; the
     solvability condition is positivity of -lap_hbar + R/8.
  2. W solves the conformal-Killing Laplacian  div(L(W)) = -8 pi jhat
     on hhat, completing the trace-free extrinsic curvature.
  3. phi >= 1 solves  -lap_hhat phi = 2 pi zhat phi^-3 + KK/8 phi^-7
     by tau-continuation with Newton steps.

Discretization: cell-centered finite volumes; the divergence-form
second-order terms use face-averaged coefficients along each axis plus
centered cross terms, which keeps the assembled matrices symmetric.
Far-field behaviour of every deviation unknown is the Robin closure
d/dr (r u) = 0, exact for 1/r tails; the positivity (Brill-Cantor)
check uses the homogeneous Dirichlet box instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, lgmres, lobpcg

from .fields import Grid, GridField
from .fluid import EquationOfState
from .idata import BoundaryCurve

SYM3 = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class EllipticSolveError(RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class BrillCantorError(EllipticSolveError):
    pass


class MetricPositivityError(ValueError):
    def __init__(self, location):
        self.location = location
        super().__init__(f"metric is not positive definite at grid index {location}")


# ----------------------------------------------------------- tensor storage


def sym_to_full(data6: np.ndarray) -> np.ndarray:
    """(6, n, n, n) symmetric storage -> (n, n, n, 3, 3)."""
    full = np.empty(data6.shape[1:] + (3, 3))
    for k, (a, b) in enumerate(SYM3):
        full[..., a, b] = data6[k]
        full[..., b, a] = data6[k]
    return full


def full_to_sym(full: np.ndarray) -> np.ndarray:
    out = np.empty((6,) + full.shape[:-2])
    for k, (a, b) in enumerate(SYM3):
        out[k] = full[..., a, b]
    return out


def identity_metric(grid: Grid) -> GridField:
    data = np.zeros((6,) + grid.shape)
    for k, (a, b) in enumerate(SYM3):
        if a == b:
            data[k] = 1.0
    return GridField(grid, data)


def check_spd(h_full: np.ndarray):
    eig = np.linalg.eigvalsh(h_full)
    bad = eig[..., 0] <= 0
    if np.any(bad):
        raise MetricPositivityError(tuple(np.argwhere(bad)[0]))


# ------------------------------------------------------- metric geometry


@dataclass
class MetricGeometry:
    """Pointwise quantities of a slice metric, differentiated once."""

    grid: Grid
    h_full: np.ndarray            # (..., 3, 3)
    hinv: np.ndarray = field(init=False)
    sqrt_det: np.ndarray = field(init=False)
    dh: np.ndarray = field(init=False)       # dh[..., a, b, c] = d_c h_ab
    gamma: np.ndarray = field(init=False)    # gamma[..., c, a, b] = G^c_ab

    def __post_init__(self):
        check_spd(self.h_full)
        self.hinv = np.linalg.inv(self.h_full)
        self.sqrt_det = np.sqrt(np.linalg.det(self.h_full))
        h = self.grid.spacing
        self.dh = np.stack(np.gradient(self.h_full, h, axis=(0, 1, 2)), axis=-1)
        # G^c_ab = 1/2 h^cd (d_a h_db + d_b h_da - d_d h_ab)
        self.gamma = 0.5 * (
            np.einsum("...cd,...dba->...cab", self.hinv, self.dh)
            + np.einsum("...cd,...dab->...cab", self.hinv, self.dh)
            - np.einsum("...cd,...abd->...cab", self.hinv, self.dh)
        )

    def ricci(self) -> np.ndarray:
        h = self.grid.spacing
        dgamma = np.stack(np.gradient(self.gamma, h, axis=(0, 1, 2)), axis=-1)
        # R_ab = d_c G^c_ab - d_a G^c_cb + G^c_cd G^d_ab - G^c_ad G^d_cb
        r = (
            np.einsum("...cabc->...ab", dgamma)
            - np.einsum("...ccba->...ab", dgamma)
            + np.einsum("...ccd,...dab->...ab", self.gamma, self.gamma)
            - np.einsum("...cad,...dcb->...ab", self.gamma, self.gamma)
        )
        return 0.5 * (r + np.swapaxes(r, -1, -2))

    def scalar_curvature(self) -> np.ndarray:
        return np.einsum("...ab,...ab->...", self.hinv, self.ricci())


def geometry_of(hfield: GridField) -> MetricGeometry:
    if hfield.components != 6:
        raise ValueError("slice metric needs 6 symmetric components")
    return MetricGeometry(hfield.grid, sym_to_full(hfield.data))


def scalar_curvature(hfield: GridField) -> GridField:
    """Pointwise scalar curvature of a 6-component slice metric."""
    geo = geometry_of(hfield)
    return GridField(hfield.grid, geo.scalar_curvature()[None])


# ------------------------------------------------- boundary ghost handling


def _robin_ratio(grid: Grid, axis: int, side: int) -> np.ndarray:
    """r_boundary / r_ghost on the (axis, side) face; ghost value of a
    1/r tail is the boundary value times this ratio."""
    X = np.stack(grid.coordinate_arrays(), axis=-1)
    idx = [slice(None)] * 3
    idx[axis] = 0 if side < 0 else -1
    xb = X[tuple(idx)]
    xg = xb.copy()
    xg[..., axis] += side * grid.spacing
    rb = np.sqrt((xb ** 2).sum(axis=-1))
    rg = np.sqrt((xg ** 2).sum(axis=-1))
    return rb / rg


def pad_ghost(arr: np.ndarray, grid: Grid, bc: str) -> np.ndarray:
    """One ghost layer per side on the trailing three axes."""
    lead = arr.ndim - 3
    widths = [(0, 0)] * lead + [(1, 1)] * 3
    if bc == "dirichlet":
        return np.pad(arr, widths, mode="constant")
    if bc != "robin":
        raise ValueError(f"unknown boundary closure {bc!r}")
    out = np.pad(arr, widths, mode="edge")
    for axis in range(3):
        for side in (-1, 1):
            ratio = _robin_ratio(grid, axis, side)
            sl = [slice(1, -1)] * 3
            sl[axis] = 0 if side < 0 else -1
            full = [slice(None)] * lead + sl
            out[tuple(full)] = out[tuple(full)] * ratio
    return out


def _dc(arr_padded: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered first difference of a ghost-padded array (trailing axes)."""
    ax = arr_padded.ndim - 3 + axis
    lo = [slice(1, -1)] * 3
    hi = [slice(1, -1)] * 3
    lo[axis] = slice(None, -2)
    hi[axis] = slice(2, None)
    lead = (slice(None),) * (arr_padded.ndim - 3)
    return (arr_padded[lead + tuple(hi)] - arr_padded[lead + tuple(lo)]) / (2 * h)


def _d2c(arr_padded: np.ndarray, axis: int, h: float) -> np.ndarray:
    mid = [slice(1, -1)] * 3
    lo = list(mid)
    hi = list(mid)
    lo[axis] = slice(None, -2)
    hi[axis] = slice(2, None)
    lead = (slice(None),) * (arr_padded.ndim - 3)
    return (
        arr_padded[lead + tuple(hi)]
        - 2 * arr_padded[lead + tuple(mid)]
        + arr_padded[lead + tuple(lo)]
    ) / (h * h)


# -------------------------------------------------------- sparse assembly


def _lin(grid: Grid):
    n = grid.n_per_axis
    return np.arange(n ** 3).reshape(grid.shape)


def centered_difference_matrix(grid: Grid, axis: int, bc: str) -> sparse.csr_matrix:
    """Sparse centered d/dx_axis with Dirichlet or Robin ghost closure."""
    n = grid.n_per_axis
    h = grid.spacing
    ids = _lin(grid)
    rows, cols, vals = [], [], []

    sl_int = [slice(None)] * 3
    sl_int[axis] = slice(0, n - 1)
    lo = ids[tuple(sl_int)].ravel()
    sl_int[axis] = slice(1, n)
    hi = ids[tuple(sl_int)].ravel()
    # pairs (p, p+e): +1/2h on the upwind row, -1/2h on the downwind row
    rows.append(lo); cols.append(hi); vals.append(np.full(lo.size, 0.5 / h))
    rows.append(hi); cols.append(lo); vals.append(np.full(lo.size, -0.5 / h))

    for side in (-1, 1):
        sl = [slice(None)] * 3
        sl[axis] = 0 if side < 0 else -1
        bd = ids[tuple(sl)].ravel()
        if bc == "robin":
            ratio = _robin_ratio(grid, axis, side).ravel()
            rows.append(bd); cols.append(bd)
            vals.append(side * ratio * (0.5 / h))
        elif bc != "dirichlet":
            raise ValueError(f"unknown boundary closure {bc!r}")

    N = n ** 3
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N),
    )


def divergence_form_matrix(grid: Grid, k_full: np.ndarray, bc: str) -> sparse.csr_matrix:
    """Symmetric discretization of  u -> -d_i (k^ij d_j u)  per unit volume.

    Axis terms use face-averaged coefficients (7-point, positive); the
    cross terms pair centered differences, which keeps the matrix exactly
    symmetric after the closing symmetrization of the boundary ring.
    """
    n = grid.n_per_axis
    h = grid.spacing
    N = n ** 3
    ids = _lin(grid)
    rows, cols, vals = [], [], []

    for axis in range(3):
        kax = k_full[..., axis, axis]
        sl_lo = [slice(None)] * 3
        sl_lo[axis] = slice(0, n - 1)
        sl_hi = [slice(None)] * 3
        sl_hi[axis] = slice(1, n)
        p = ids[tuple(sl_lo)].ravel()
        q = ids[tuple(sl_hi)].ravel()
        kf = 0.5 * (kax[tuple(sl_lo)] + kax[tuple(sl_hi)]).ravel() / (h * h)
        rows += [p, q, p, q]
        cols += [p, q, q, p]
        vals += [kf, kf, -kf, -kf]
        for side in (-1, 1):
            sl = [slice(None)] * 3
            sl[axis] = 0 if side < 0 else -1
            bd = ids[tuple(sl)].ravel()
            kb = kax[tuple(sl)].ravel() / (h * h)
            if bc == "dirichlet":
                rows.append(bd); cols.append(bd); vals.append(kb)
            else:
                ratio = _robin_ratio(grid, axis, side).ravel()
                rows.append(bd); cols.append(bd); vals.append(kb * (1.0 - ratio))

    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N),
    )
    dcs = [centered_difference_matrix(grid, a, bc) for a in range(3)]
    for a in range(3):
        for b in range(3):
            if a == b:
                continue
            kab = sparse.diags(k_full[..., a, b].ravel())
            A = A + dcs[a].T @ kab @ dcs[b]
    # the Robin closure of the cross stencils is not exactly symmetric on
    # the boundary ring; close it by symmetrization
    A = 0.5 * (A + A.T)
    return A.tocsr()


def _amg_preconditioner(A: sparse.csr_matrix):
    ml = pyamg.smoothed_aggregation_solver(A, max_coarse=64)
    return ml.aspreconditioner(cycle="V")


def _cg_solve(A, b, stage, rtol=1e-13, maxiter=600, M=None):
    if M is None:
        M = _amg_preconditioner(A)
    x, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        # one more pass with a fresh Krylov space before giving up
        x2, info2 = cg(A, b, x0=x, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
        if info2 != 0:
            raise EllipticSolveError(stage, f"conjugate gradient stalled (info={info2})")
        x = x2
    return x


@dataclass
class SolveInfo:
    stage: str
    residual: float
    iterations: int
    wall_time: float


# ------------------------------------------------------------ alpha stage


def solve_alpha(hbar: GridField, geo: MetricGeometry | None = None):
    """Positive solution of  -lap_hbar alpha + R(hbar)/8 alpha = 0  with
    alpha -> 1; returns (alpha, SolveInfo).  Requires the positivity
    (Brill-Cantor) condition, otherwise the solve is flagged."""
    t0 = time.perf_counter()
    geo = geo or geometry_of(hbar)
    R = geo.scalar_curvature()
    k = geo.sqrt_det[..., None, None] * geo.hinv
    A = divergence_form_matrix(hbar.grid, k, bc="robin")
    mass = geo.sqrt_det * R / 8.0
    A = A + sparse.diags(mass.ravel())
    rhs = (-mass).ravel()
    a = _cg_solve(A, rhs, "alpha")
    resid = np.abs(A @ a - rhs) / geo.sqrt_det.ravel()
    alpha = 1.0 + a.reshape(hbar.grid.shape)
    if np.min(alpha) <= 0.0:
        raise BrillCantorError(
            "alpha",
            f"nonpositive conformal factor (min {np.min(alpha):.3e}); "
            f"the metric fails the positivity condition",
        )
    info = SolveInfo("alpha", float(np.max(resid)), -1, time.perf_counter() - t0)
    return GridField(hbar.grid, alpha[None]), info


def brill_cantor_check(hbar: GridField, tol: float = 1e-8, maxiter: int = 400,
                       seed: int = 0):
    """Smallest eigenvalue of  -lap_hbar + R/8  on the Dirichlet box.

    The verdict is the sign of the bottom of the spectrum, computed with
    a preconditioned block eigensolver (LOBPCG) on the generalized
    problem with the metric volume weight.  Returns (passes, lambda_min,
    residual history).
    """
    geo = geometry_of(hbar)
    grid = hbar.grid
    R = geo.scalar_curvature()
    k = geo.sqrt_det[..., None, None] * geo.hinv
    A_lap = divergence_form_matrix(grid, k, bc="dirichlet")
    A = A_lap + sparse.diags((geo.sqrt_det * R / 8.0).ravel())
    B = sparse.diags(geo.sqrt_det.ravel())
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(A.shape[0], 4))
    # seed the block with a bump parked on the curvature minimum so a
    # localized negative mode cannot hide from the iteration
    X_loc = np.stack(grid.coordinate_arrays(), axis=-1)
    x0 = X_loc.reshape(-1, 3)[np.argmin(R)]
    d2 = ((X_loc - x0) ** 2).sum(axis=-1)
    X[:, 0] = np.exp(-d2 / max(grid.spacing, 0.5) ** 2).ravel()
    # the preconditioner only needs the positive principal part
    M = _amg_preconditioner(sparse.csr_matrix(A_lap + 0.1 * B))
    with np.errstate(invalid="ignore"):
        vals, _, hist = lobpcg(
            A, X, B=B, M=M, largest=False, tol=tol, maxiter=maxiter,
            retResidualNormsHistory=True,
        )
    lam = float(np.min(vals))
    if hist and np.min(hist[-1]) > max(100 * tol, 1e-5 * abs(lam)):
        raise EllipticSolveError(
            "brill-cantor",
            f"eigensolver stagnated (last residuals {np.asarray(hist[-1])})",
        )
    return lam > 0.0, lam, hist



# ---------------------------------------------------- conformal Killing stage


def _first_derivatives(W: np.ndarray, grid: Grid, bc: str) -> np.ndarray:
    """dW[..., c, a] = d_c W^a for component-first W of shape (3, n, n, n)."""
    Wp = pad_ghost(W, grid, bc)
    h = grid.spacing
    cols = [
        np.stack([_dc(Wp[a], c, h) for a in range(3)], axis=-1)
        for c in range(3)
    ]
    return np.stack(cols, axis=-2)


def killing_operator(geo: MetricGeometry, W: np.ndarray, bc: str = "robin") -> np.ndarray:
    """Conformal Killing operator L(W)^ab = D^a W^b + D^b W^a - 2/3 h^ab D_c W^c,
    returned as (..., 3, 3); trace-free by construction."""
    Wl = np.moveaxis(W, 0, -1)
    DW = _first_derivatives(W, geo.grid, bc)
    DW = DW + np.einsum("...acd,...d->...ca", geo.gamma, Wl)
    t = np.einsum("...ac,...cb->...ab", geo.hinv, DW)
    tr = np.einsum("...cc->...", DW)
    return t + np.swapaxes(t, -1, -2) - (2.0 / 3.0) * geo.hinv * tr[..., None, None]


def tensor_divergence(geo: MetricGeometry, T: np.ndarray, bc: str = "robin") -> np.ndarray:
    """D_a T^ab for a symmetric (2,0) tensor field T (..., 3, 3); returns (..., 3)."""
    S = geo.sqrt_det[..., None, None] * T
    S_cf = np.moveaxis(S, (-2, -1), (0, 1))  # (3, 3, n, n, n)
    Sp = pad_ghost(S_cf, geo.grid, bc)
    h = geo.grid.spacing
    div = np.stack(
        [sum(_dc(Sp[a, b], a, h) for a in range(3)) for b in range(3)], axis=-1
    ) / geo.sqrt_det[..., None]
    return div + np.einsum("...bac,...ac->...b", geo.gamma, T)


def vector_laplacian_apply(geo: MetricGeometry, W: np.ndarray, bc: str = "robin") -> np.ndarray:
    """Matrix-free  (Delta_L W)^b = D_a (L W)^ab  with a compact-stencil
    replacement of the same-axis second differences (the composed centered
    stencils alone are blind to the odd-even mode)."""
    grid = geo.grid
    h = grid.spacing
    LW = killing_operator(geo, W, bc)
    out = tensor_divergence(geo, LW, bc)  # (..., 3)
    Wp = pad_ghost(W, grid, bc)
    for a in range(3):
        # same-axis corrections: replace Dc_a Dc_a by the 3-point stencil
        dca = np.stack([_dc(Wp[b], a, h) for b in range(3)])
        dca_p = pad_ghost(dca, grid, bc)
        wide = np.stack([_dc(dca_p[b], a, h) for b in range(3)])
        compact = np.stack([_d2c(Wp[b], a, h) for b in range(3)])
        corr = np.moveaxis(compact - wide, 0, -1)  # (..., b)
        out = out + geo.hinv[..., a, a, None] * corr
        out = out + (1.0 / 3.0) * geo.hinv[..., :, a] * corr[..., a, None]
    return out


def _component_preconditioner(grid: Grid, ncomp: int):
    k = np.broadcast_to(np.eye(3), grid.shape + (3, 3))
    A = divergence_form_matrix(grid, k, bc="robin")
    ml = pyamg.smoothed_aggregation_solver(A, max_coarse=64)
    N = grid.n_per_axis ** 3

    def apply(x):
        out = np.empty_like(x)
        for c in range(ncomp):
            out[c * N:(c + 1) * N] = ml.solve(
                x[c * N:(c + 1) * N], maxiter=1, tol=1e-30, accel=None
            )
        return out

    return LinearOperator((ncomp * N, ncomp * N), matvec=apply)


def solve_lichnerowicz_vector(hhat: GridField, jhat: GridField,
                              tol: float = 1e-7, maxiter: int = 3000):
    """Vector potential W with  D_a (L W)^ab = -8 pi jhat^b  and 1/r decay.

    Returns (W, SolveInfo); the reported residual is the max norm of the
    discrete operator applied to the solution.
    """
    t0 = time.perf_counter()
    geo = geometry_of(hhat)
    grid = hhat.grid
    n = grid.n_per_axis
    N = n ** 3
    b = (8.0 * np.pi) * jhat.data.reshape(3 * N)
    if np.max(np.abs(b)) == 0.0:
        return GridField(grid, np.zeros((3,) + grid.shape)), SolveInfo(
            "vector", 0.0, 0, time.perf_counter() - t0
        )

    def matvec(x):
        W = x.reshape(3, n, n, n)
        out = -vector_laplacian_apply(geo, W)
        return np.moveaxis(out, -1, 0).reshape(3 * N)

    A = LinearOperator((3 * N, 3 * N), matvec=matvec)
    M = _component_preconditioner(grid, 3)
    x, info = lgmres(A, b, M=M, rtol=1e-13, atol=0.0, maxiter=maxiter)
    resid = float(np.max(np.abs(A.matvec(x) - b)))
    if resid > tol:
        x, info = lgmres(A, b, x0=x, M=M, rtol=1e-15, atol=0.0, maxiter=maxiter)
        resid = float(np.max(np.abs(A.matvec(x) - b)))
        if resid > tol:
            raise EllipticSolveError(
                "vector", f"momentum solve residual {resid:.3e} above {tol:.0e}"
            )
    W = GridField(grid, x.reshape(3, n, n, n))
    return W, SolveInfo("vector", resid, info, time.perf_counter() - t0)


# ------------------------------------------------------------- phi stage


def solve_lichnerowicz_scalar(hhat: GridField, zhat: GridField, kk: np.ndarray,
                              tol: float = 1e-7, newton_max: int = 40,
                              geo: MetricGeometry | None = None,
                              validate: bool = True):
    """Conformal factor phi >= 1 solving

        -lap_hhat phi = 2 pi zhat phi^-3 + (1/8) kk phi^-7,  phi -> 1,

    where kk = Khat^a_b Khat^b_a >= 0.  Continuation in the source
    strength tau with Newton steps at each stage; the step size bisects
    adaptively whenever Newton fails to reduce the residual.
    """
    t0 = time.perf_counter()
    geo = geo or geometry_of(hhat)
    grid = hhat.grid
    zh = zhat.data[0]
    if validate:
        if np.any(zh < 0):
            raise ValueError("matter source zhat must be nonnegative")
        if np.any(kk < -1e-12):
            raise ValueError("curvature source kk must be nonnegative")
        kk = np.maximum(kk, 0.0)
    k = geo.sqrt_det[..., None, None] * geo.hinv
    A0 = divergence_form_matrix(grid, k, bc="robin")
    vol = geo.sqrt_det.ravel()
    z_flat = zh.ravel()
    kk_flat = kk.ravel()

    def F(u, tau):
        phi = 1.0 + u
        return tau * vol * (
            2.0 * np.pi * z_flat * phi ** -3 + 0.125 * kk_flat * phi ** -7
        )

    def dF(u, tau):
        phi = 1.0 + u
        return tau * vol * (
            -6.0 * np.pi * z_flat * phi ** -4 - 0.875 * kk_flat * phi ** -8
        )

    if np.max(z_flat) == 0.0 and np.max(kk_flat) == 0.0:
        ones = GridField(grid, np.ones((1,) + grid.shape))
        return ones, SolveInfo("phi", 0.0, 0, time.perf_counter() - t0)

    u = np.zeros(A0.shape[0])
    clamped = False
    tau_done = 0.0
    tau_step = 0.25
    newton_used = 0
    while tau_done < 1.0 - 1e-12:
        tau = min(1.0, tau_done + tau_step)
        u_try = u.copy()
        ok = False
        for _ in range(newton_max):
            r = A0 @ u_try - F(u_try, tau)
            if np.max(np.abs(r) / vol) <= tol:
                ok = True
                break
            J = A0 + sparse.diags(-dF(u_try, tau))
            delta = _cg_solve(J, -r, "phi-newton", rtol=1e-12)
            step = 1.0
            r0 = np.max(np.abs(r))
            for _ in range(25):
                u_new = u_try + step * delta
                if np.min(1.0 + u_new) <= 0.05:
                    # keep phi positive: damp and flag
                    clamped = True
                    step *= 0.5
                    continue
                r_new = np.max(np.abs(A0 @ u_new - F(u_new, tau)))
                if r_new < r0 or r_new <= tol * np.min(vol):
                    break
                step *= 0.5
            else:
                break
            u_try = u_new
            newton_used += 1
        if ok:
            u = u_try
            tau_done = tau
        else:
            tau_step *= 0.5
            if tau_step < 1e-3:
                raise EllipticSolveError(
                    "phi",
                    f"Newton stalled at tau = {tau:.4f} "
                    f"(residual {np.max(np.abs(r)):.3e})",
                )
    resid = float(np.max(np.abs(A0 @ u - F(u, 1.0)) / vol))
    phi = 1.0 + u.reshape(grid.shape)
    info = SolveInfo("phi", resid, newton_used, time.perf_counter() - t0)
    info.clamped = clamped
    return GridField(grid, phi[None]), info


# ----------------------------------------------------------- free data model


@dataclass(frozen=True)
class ConstraintFreeData:
    """Free data of the pipeline: metric hbar (6 comps, stored whole),
    trace- and divergence-free Abar_ab (6), matter amplitude yhat >= 0 (1)
    and matter velocity vhat^a (3)."""

    hbar: GridField
    Abar: GridField
    yhat: GridField
    vhat: GridField

    def __post_init__(self):
        if self.hbar.components != 6 or self.Abar.components != 6:
            raise ValueError("hbar and Abar need 6 components")
        if self.yhat.components != 1 or self.vhat.components != 3:
            raise ValueError("yhat needs 1 component, vhat needs 3")
        if np.any(self.yhat.data < 0):
            raise ValueError("yhat must be nonnegative")
        grids = {f.grid for f in (self.hbar, self.Abar, self.yhat, self.vhat)}
        if len(grids) != 1:
            raise ValueError("free data fields must share one grid")

    @property
    def grid(self):
        return self.hbar.grid


def trivial_free_data(grid: Grid) -> ConstraintFreeData:
    zeros = np.zeros((6,) + grid.shape)
    return ConstraintFreeData(
        hbar=identity_metric(grid),
        Abar=GridField(grid, zeros),
        yhat=GridField(grid, np.zeros((1,) + grid.shape)),
        vhat=GridField(grid, np.zeros((3,) + grid.shape)),
    )


@dataclass(frozen=True)
class GravitationalData:
    """Solved physical data: slice metric h_ab, extrinsic curvature K_ab,
    matter sources (z, j^a) and the conformal potentials."""

    h: GridField
    Kext: GridField
    z: GridField
    j: GridField
    alpha: GridField
    phi: GridField
    W: GridField

    @property
    def grid(self):
        return self.h.grid


def trace_residual(hbar: GridField, Abar: GridField) -> np.ndarray:
    geo = geometry_of(hbar)
    return np.einsum("...ab,...ab->...", geo.hinv, sym_to_full(Abar.data))


def project_tracefree(hbar: GridField, Abar: GridField) -> GridField:
    """Remove the metric trace of a symmetric (0,2) field."""
    hf = sym_to_full(hbar.data)
    Af = sym_to_full(Abar.data)
    tr = np.einsum("...ab,...ab->...", np.linalg.inv(hf), Af)
    Af = Af - hf * (tr / 3.0)[..., None, None]
    return GridField(hbar.grid, full_to_sym(Af))


def divergence_residual(hbar: GridField, Abar: GridField) -> np.ndarray:
    """Pointwise D_a Abar^ab of the index-raised free tensor (reported,
    not enforced: file input cannot be exactly divergence-free)."""
    geo = geometry_of(hbar)
    Af = sym_to_full(Abar.data)
    A_up = np.einsum("...ac,...bd,...cd->...ab", geo.hinv, geo.hinv, Af)
    return tensor_divergence(geo, A_up)


def project_divergence_free(hbar: GridField, Abar: GridField) -> GridField:
    """Discrete transverse projection: subtract L(V) with
    div L(V) = div Abar (the conformal-Killing split on hbar)."""
    geo = geometry_of(hbar)
    div = divergence_residual(hbar, Abar)
    source = GridField(hbar.grid, np.moveaxis(div, -1, 0) / (-8.0 * np.pi))
    V, _ = solve_lichnerowicz_vector(hbar, source)
    LV = killing_operator(geo, V.data)
    Af = sym_to_full(Abar.data)
    A_up = np.einsum("...ac,...bd,...cd->...ab", geo.hinv, geo.hinv, Af)
    cleaned_up = A_up - LV
    cleaned = np.einsum("...ac,...bd,...cd->...ab", geo.h_full, geo.h_full, cleaned_up)
    return GridField(hbar.grid, full_to_sym(cleaned))


# ----------------------------------------------------------------- pipeline


def assemble_physical_data(free: ConstraintFreeData, eos: EquationOfState,
                           check_positivity: bool = True,
                           collect: list | None = None) -> GravitationalData:
    """Run the three elliptic stages and scale the free data into a
    constraint-satisfying set (h, K, z, j)."""
    grid = free.grid
    reports = collect if collect is not None else []

    if check_positivity:
        t0 = time.perf_counter()
        passes, lam, _ = brill_cantor_check(free.hbar)
        reports.append(SolveInfo("brill-cantor", lam, -1, time.perf_counter() - t0))
        if not passes:
            raise BrillCantorError(
                "brill-cantor", f"operator bottom eigenvalue {lam:.6g} <= 0"
            )

    tr = np.max(np.abs(trace_residual(free.hbar, free.Abar)))
    if tr > 1e-8:
        raise ValueError(
            f"Abar is not trace-free (max |tr| = {tr:.3e}); "
            f"apply project_tracefree first"
        )

    alpha, info_a = solve_alpha(free.hbar)
    reports.append(info_a)
    af = alpha.data[0]
    hhat = GridField(grid, free.hbar.data * af ** 4)
    geo_hat = geometry_of(hhat)

    # matter admissibility is checked against the rescaled metric
    yh = free.yhat.data[0]
    vh = np.moveaxis(free.vhat.data, 0, -1)
    q2 = np.einsum("...ab,...a,...b->...", geo_hat.h_full, vh, vh)
    curve = BoundaryCurve(eos)
    bound = curve(np.sqrt(np.maximum(q2, 0.0)))
    if np.any(q2 >= 1.0) or np.any(yh >= bound):
        raise ValueError("matter data (yhat, vhat) leave the admissible region")

    zhat = yh ** (2.0 / (eos.gamma - 1.0))
    jhat = zhat[..., None] * vh

    W, info_w = solve_lichnerowicz_vector(
        hhat, GridField(grid, np.moveaxis(jhat, -1, 0))
    )
    reports.append(info_w)
    LW = killing_operator(geo_hat, W.data)

    Abar_full = sym_to_full(free.Abar.data)
    hbar_inv = np.linalg.inv(sym_to_full(free.hbar.data))
    Abar_up = np.einsum("...ac,...bd,...cd->...ab", hbar_inv, hbar_inv, Abar_full)
    Khat_up = af[..., None, None] ** -10 * Abar_up + LW
    Khat_mixed = np.einsum("...bc,...ac->...ab", geo_hat.h_full, Khat_up)
    kk = np.einsum("...ab,...ba->...", Khat_mixed, Khat_mixed)

    phi, info_p = solve_lichnerowicz_scalar(
        hhat, GridField(grid, zhat[None]), kk, geo=geo_hat
    )
    reports.append(info_p)
    pf = phi.data[0]

    h_phys = GridField(grid, (pf * af) ** 4 * free.hbar.data)
    Khat_low = np.einsum(
        "...ac,...bd,...cd->...ab", geo_hat.h_full, geo_hat.h_full, Khat_up
    )
    K_phys = GridField(grid, full_to_sym(pf[..., None, None] ** -2 * Khat_low))
    z_phys = GridField(grid, (pf ** -8 * zhat)[None])
    j_phys = GridField(grid, np.moveaxis(pf[..., None] ** -10 * jhat, -1, 0))
    return GravitationalData(
        h=h_phys, Kext=K_phys, z=z_phys, j=j_phys, alpha=alpha, phi=phi, W=W
    )


def constraint_residuals(gd: GravitationalData, delta: float = -1.0):
    """Pointwise Hamiltonian and momentum residuals of (h, K, z, j) and
    their weighted L^2 norms (weight exponent delta + 2).

        ham = R(h) - K_ab K^ab + (tr K)^2 - 16 pi z
        mom^b = D_a K^ab - D^b tr K + 8 pi j^b
    """
    geo = geometry_of(gd.h)
    grid = gd.grid
    R = geo.scalar_curvature()
    K_low = sym_to_full(gd.Kext.data)
    K_up = np.einsum("...ac,...bd,...cd->...ab", geo.hinv, geo.hinv, K_low)
    KK = np.einsum("...ab,...ab->...", K_low, K_up)
    trK = np.einsum("...ab,...ab->...", geo.hinv, K_low)
    ham = R - KK + trK ** 2 - 16.0 * np.pi * gd.z.data[0]

    div_K = tensor_divergence(geo, K_up)
    trK_p = pad_ghost(trK, grid, "robin")
    h = grid.spacing
    grad_trK = np.stack([_dc(trK_p, a, h) for a in range(3)], axis=-1)
    mom = (
        div_K
        - np.einsum("...ab,...a->...b", geo.hinv, grad_trK)
        + 8.0 * np.pi * np.moveaxis(gd.j.data, 0, -1)
    )

    ham_f = GridField(grid, ham[None])
    mom_f = GridField(grid, np.moveaxis(mom, -1, 0))
    from .spaces import integral_norm

    norms = {
        "hamiltonian": integral_norm(ham_f, 0, delta + 2.0),
        "momentum": integral_norm(mom_f, 0, delta + 2.0),
        "hamiltonian_max": float(np.max(np.abs(ham))),
        "momentum_max": float(np.max(np.abs(mom))),
    }
    return ham_f, mom_f, norms
