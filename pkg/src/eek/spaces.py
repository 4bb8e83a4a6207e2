"""Weighted fractional Sobolev machinery.

The norm of order (s, delta) is the dyadic sum

    ||u||^2 = sum_j 2^((3/2+delta) 2j) || (psi_j^g u)(2^j .) ||^2_{H^s},

built from a smooth radial partition {psi_j}: psi_j = 1 on the annulus
{2^(j-3) <= |x| <= 2^(j+2)} with support in {2^(j-4) <= |x| <= 2^(j+3)}
(psi_0 covers {|x| <= 4}, supported in {|x| <= 8}).  Shell profiles for
j >= 1 are rescales of one mother profile, psi_j(x) = psi_1(2^(1-j) x);
after the 2^j coordinate rescale every shell lives in {|x| <= 8} and is
measured on a fixed base grid with half-width 16.

The classical integral norm with weight <x>^(delta+|alpha|) is provided
for integer orders m <= 2, and the double-integral half-integer norm is
available as a coarse-grid cross check (it costs O(n^6)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    Grid,
    GridField,
    SobolevIndex,
    bessel_apply,
    l2_norm,
    power_spectrum,
    scale_field,
    spectrum_norm,
)

SHELL_HALF_WIDTH = 16.0


def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, exp(-1/t)-based."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    out[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    a = np.exp(-1.0 / tm)
    b = np.exp(-1.0 / (1.0 - tm))
    out[mid] = a / (a + b)
    return out


def _plateau_profile(r, rise_lo, plateau_lo, plateau_hi, fall_hi):
    """Radial bump: 0 below rise_lo, 1 on [plateau_lo, plateau_hi], 0 above fall_hi."""
    r = np.asarray(r, dtype=np.float64)
    up = (
        _smooth_step((r - rise_lo) / (plateau_lo - rise_lo))
        if rise_lo > 0.0
        else np.ones_like(r)
    )
    down = _smooth_step((fall_hi - r) / (fall_hi - plateau_hi))
    return up * down


@dataclass(frozen=True)
class DyadicPartition:
    """Radial shell profiles psi_j, j = 0..j_max."""

    j_max: int

    def __post_init__(self):
        if self.j_max < 0:
            raise ValueError("j_max must be >= 0")

    def psi(self, j: int, r):
        """Evaluate psi_j at radii r."""
        if j == 0:
            return _plateau_profile(r, 0.0, 0.0, 4.0, 8.0)
        # mother profile: plateau [1/4, 8], support [1/8, 16]; shells are
        # dyadic rescales psi_j(x) = psi_1(2^(1-j) x)
        scale = 2.0 ** (1 - j)
        return _plateau_profile(
            np.asarray(r) * scale, 0.125, 0.25, 8.0, 16.0
        )

    def psi_sum(self, r):
        return sum(self.psi(j, r) for j in range(self.j_max + 1))

    def scaled_profile(self, j: int, r):
        """psi_j(2^j x) evaluated at radii r; identical for all j >= 1."""
        if j == 0:
            return self.psi(0, r)
        return self.psi(1, 2.0 * np.asarray(r))


def partition_for(grid: Grid) -> DyadicPartition:
    """Smallest truncation with 2^(j_max + 3) >= half_width."""
    j_max = max(0, math.ceil(math.log2(grid.half_width)) - 3)
    return DyadicPartition(j_max)


def build_partition(j_max: int) -> DyadicPartition:
    return DyadicPartition(j_max)


@dataclass
class NormReport:
    """Per-shell breakdown of a dyadic norm evaluation."""

    s: float
    delta: float
    gamma_psi: int
    shell_terms: list[float]
    truncation_warning: bool = False
    integral: float | None = None

    @property
    def dyadic(self) -> float:
        return math.sqrt(sum(t * t for t in self.shell_terms))


class ShellSpectra:
    """Tapered power spectra of the rescaled shell fields of one field.

    Computing the spectra once makes norms for any (s, delta) a cheap
    weighted sum; this is the workhorse behind the property harness.
    """

    def __init__(self, u: GridField, partition: DyadicPartition | None = None,
                 gamma_psi: int = 2, base_n: int | None = None):
        if gamma_psi not in (1, 2, 4):
            raise ValueError(f"gamma_psi must be 1, 2 or 4, got {gamma_psi}")
        self.partition = partition or partition_for(u.grid)
        self.gamma_psi = gamma_psi
        self.base = Grid(base_n or u.grid.n_per_axis, SHELL_HALF_WIDTH)
        r = self.base.radius()
        self.spectra = []
        for j in range(self.partition.j_max + 1):
            shell = scale_field(u, 2.0 ** j, target=self.base)
            profile = self.partition.scaled_profile(j, r) ** gamma_psi
            shell = GridField(self.base, shell.data * profile)
            self.spectra.append(power_spectrum(shell))

    def shell_terms(self, idx: SobolevIndex) -> list[float]:
        terms = []
        for j, spec in enumerate(self.spectra):
            weight = 2.0 ** ((1.5 + idx.delta) * j)
            terms.append(weight * spectrum_norm(self.base, spec, idx.s))
        return terms

    def norm(self, idx: SobolevIndex) -> float:
        return math.sqrt(sum(t * t for t in self.shell_terms(idx)))

    def report(self, idx: SobolevIndex) -> NormReport:
        terms = self.shell_terms(idx)
        total = math.sqrt(sum(t * t for t in terms))
        warn = total > 0 and terms[-1] > 0.1 * total
        return NormReport(idx.s, idx.delta, self.gamma_psi, terms, warn)


def weighted_norm(u: GridField, idx: SobolevIndex,
                  partition: DyadicPartition | None = None,
                  gamma_psi: int = 2) -> NormReport:
    """Dyadic (s, delta) norm of u with per-shell terms.

    Shells beyond the truncation index carry only their in-grid part; if
    the last shell still holds more than 10% of the total the report is
    flagged as truncation-suspect.
    """
    return ShellSpectra(u, partition, gamma_psi).report(idx)


def state_norm(fields_and_indices) -> float:
    """Root-sum-square of dyadic norms over (field, index) blocks."""
    return math.sqrt(
        sum(weighted_norm(u, idx).dyadic ** 2 for u, idx in fields_and_indices)
    )


def dyadic_l2_norm(u: GridField, delta: float,
                   partition: DyadicPartition | None = None) -> float:
    """Order-zero dyadic norm through the exact scaling identity
    ||(psi_j^2 u)(2^j .)||_{L^2}^2 = 2^(-3j) ||psi_j^2 u||_{L^2}^2,
    which needs no resampling; the fast path for contraction monitors."""
    partition = partition or partition_for(u.grid)
    r = u.grid.radius()
    h3 = u.grid.spacing ** 3
    total = 0.0
    for j in range(partition.j_max + 1):
        psi2 = partition.psi(j, r) ** 2
        total += 2.0 ** (2.0 * delta * j) * h3 * float(
            np.sum((psi2 * u.data) ** 2)
        )
    return math.sqrt(total)


# ------------------------------------------------------------------ integral


def _gradient(arr, h):
    return np.gradient(arr, h, axis=(0, 1, 2))


def integral_norm(u: GridField, m: int, delta: float) -> float:
    """Classical weighted norm: sum_{|a|<=m} int (<x>^(delta+|a|) d^a u)^2 dx,
    with centered differences; supported for m in {0, 1, 2}."""
    if m not in (0, 1, 2):
        raise ValueError(f"unsupported derivative order m = {m}")
    g = u.grid
    h = g.spacing
    w = 1.0 + g.radius()
    total = 0.0
    for c in range(u.components):
        total += np.sum((w ** delta * u.data[c]) ** 2)
        if m >= 1:
            grads = _gradient(u.data[c], h)
            for d in grads:
                total += np.sum((w ** (delta + 1) * d) ** 2)
            if m >= 2:
                # each multi-index |a| = 2 appears once: xx, yy, zz, xy, xz, yz
                for i, gi in enumerate(grads):
                    second = _gradient(gi, h)
                    for k in range(i, 3):
                        total += np.sum((w ** (delta + 2) * second[k]) ** 2)
    return float(np.sqrt(h ** 3 * total))


def lipschitz_halfinteger_norm(u: GridField, m: int, delta: float) -> float:
    """Double-integral norm at order s = m + 1/2 (coarse grids only).

    The pairwise sum costs O(n^6); it exists as a cross-check oracle for
    the spectral shell norm, not as a production path.
    """
    if m not in (0, 1):
        raise ValueError("double-integral form implemented for m in {0, 1}")
    g = u.grid
    if g.n_per_axis > 24:
        raise ValueError("double-integral norm is restricted to n <= 24")
    lam = 0.5
    h = g.spacing
    X, Y, Z = g.coordinate_arrays()
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    w = (1.0 + np.sqrt((pts ** 2).sum(axis=1))) ** (m + lam + delta)
    total = integral_norm(u, m, delta) ** 2
    if m == 0:
        fields = [u.data[c].ravel() for c in range(u.components)]
    else:
        fields = []
        for c in range(u.components):
            fields.extend(d.ravel() for d in _gradient(u.data[c], h))
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    kernel = d2 ** (-0.5 * (3 + 2 * lam))
    for f in fields:
        wf = w * f
        diff = wf[:, None] - wf[None, :]
        total += h ** 6 * np.sum(diff * diff * kernel)
    return float(np.sqrt(total))


# ------------------------------------------------------------- Kato--Ponce


def kato_ponce_check(f: GridField, g: GridField, s: float) -> dict:
    """Commutator test: ||L^s(fg) - f L^s g||_{L2} against the bracket
    C { ||grad f||_inf ||g||_{H^(s-1)} + ||f||_{H^s} ||g||_inf }."""
    if f.grid != g.grid:
        raise ValueError("fields must share a grid")
    grid = f.grid
    fg = GridField(grid, f.data * g.data)
    lhs_field = bessel_apply(fg, s).data - f.data * bessel_apply(g, s).data
    lhs = l2_norm(GridField(grid, lhs_field))
    grads = np.stack(_gradient(f.data[0], grid.spacing))
    grad_inf = float(np.max(np.sqrt((grads ** 2).sum(axis=0))))
    g_inf = float(np.max(np.abs(g.data)))
    s_minus = max(s - 1.0, 0.0)
    rhs = grad_inf * bessel_norm_of(g, s_minus) + bessel_norm_of(f, s) * g_inf
    anomaly = rhs < 1e-14 and lhs > 1e-10
    return {
        "lhs": lhs,
        "rhs": rhs,
        "ratio": lhs / rhs if rhs > 0 else math.inf,
        "anomaly": anomaly,
    }


def bessel_norm_of(u: GridField, s: float) -> float:
    return spectrum_norm(u.grid, power_spectrum(u), s)


# -------------------------------------------------------------- inequalities


@dataclass
class InequalityResult:
    name: str
    constants: list[float] = field(default_factory=list)

    @property
    def c_max(self) -> float:
        return max(self.constants) if self.constants else math.nan

    @property
    def spread(self) -> float:
        finite = [c for c in self.constants if np.isfinite(c) and c > 0]
        if not finite:
            return math.inf
        return max(finite) / min(finite)

    @property
    def passed(self) -> bool:
        return (
            bool(self.constants)
            and all(np.isfinite(c) for c in self.constants)
            and self.spread < 10.0
        )


def property_suite(family, seed: int = 0) -> dict[str, InequalityResult]:
    """Empirical constants for the estimates the weighted spaces satisfy.

    For every inequality the maximal ratio LHS/RHS-factors is fitted over
    the family; PASS means the constant is finite and varies by less than
    a factor 10 across the family.  Report-only: nothing raises.
    """
    family = list(family)
    if not family:
        raise ValueError("family must be nonempty")
    grid = family[0].grid
    results: dict[str, InequalityResult] = {}

    def record(name, value):
        results.setdefault(name, InequalityResult(name)).constants.append(value)

    s_idx = SobolevIndex(2.0, -1.0)
    for u in family:
        spectra = ShellSpectra(u, gamma_psi=2)

        # derivative: ||d_i u||_(s-1,delta+1) <= C ||u||_(s,delta)
        du = GridField(grid, np.stack(_gradient(u.data[0], grid.spacing)))
        record(
            "derivative",
            weighted_norm(du, SobolevIndex(s_idx.s - 1, s_idx.delta + 1)).dyadic
            / spectra.norm(s_idx),
        )

        # algebra: ||u^2||_(2,delta) <= C ||u||^2_(2,delta1), 2 delta1 >= delta - 3/2
        sq = GridField(grid, u.data * u.data)
        delta1 = 0.5 * (s_idx.delta - 1.5)
        record(
            "algebra",
            weighted_norm(sq, s_idx).dyadic
            / weighted_norm(u, SobolevIndex(s_idx.s, delta1)).dyadic ** 2,
        )

        # Moser: smooth F with F(0) = 0, composition bounded by the norm
        comp = GridField(grid, u.data / (1.0 + u.data ** 2))
        record("moser", weighted_norm(comp, s_idx).dyadic / spectra.norm(s_idx))

        # fractional power: || |u|^1.5 ||_(s,delta), s < gamma + 1/2 = 2
        frac = GridField(grid, np.abs(u.data) ** 1.5)
        idx_frac = SobolevIndex(1.5, s_idx.delta)
        record(
            "fractional_power",
            weighted_norm(frac, idx_frac).dyadic / spectra.norm(idx_frac),
        )

        # embedding: sup <x>^beta |u| <= C ||u||_(s,delta), beta <= delta + 3/2
        beta = s_idx.delta + 1.5
        wsup = float(np.max((1.0 + grid.radius()) ** beta * np.abs(u.data)))
        record("embedding", wsup / spectra.norm(s_idx))

        # intermediate: ||u||_(s',d) <= slack ||u||^(s'/s) ||u||^(1-s'/s)
        sp = 1.0
        record(
            "intermediate",
            spectra.norm(SobolevIndex(sp, s_idx.delta))
            / (
                spectra.norm(s_idx) ** (sp / s_idx.s)
                * spectra.norm(SobolevIndex(0.0, s_idx.delta)) ** (1 - sp / s_idx.s)
            ),
        )

    rng = np.random.default_rng(seed)
    for _ in range(3):
        i, k = rng.integers(0, len(family), size=2)
        kp = kato_ponce_check(family[i], family[k], 2.0)
        record("kato_ponce", kp["ratio"])

    return results
