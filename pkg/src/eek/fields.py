"""Grid-based fields on a truncated asymptotically flat domain.

Functions on R^3 are sampled on a uniform cell-centered grid over
[-L, L]^3.  Spectral norms are computed from the periodic FFT of the
truncated field after a smooth cosine taper over the outer 10% of each
axis; the taper is part of the discrete norm definition and suppresses
wrap-around of the non-periodic tails.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EEK1"

# fraction of each half-axis over which the cosine roll-off acts
TAPER_FRACTION = 0.1


class FieldFormatError(Exception):
    """Raised when a field file violates the binary layout."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on [-L, L]^3.

    Points are x_i = -L + (i + 1/2) * spacing along each axis, so the
    sampling is symmetric about the origin and has no node on the
    truncation boundary.
    """

    n_per_axis: int
    half_width: float

    def __post_init__(self):
        if self.n_per_axis < 16 or self.n_per_axis % 2 != 0:
            raise ValueError(
                f"n_per_axis must be even and >= 16, got {self.n_per_axis}"
            )
        if not (self.half_width > 0 and np.isfinite(self.half_width)):
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n_per_axis

    @property
    def shape(self):
        n = self.n_per_axis
        return (n, n, n)

    def axis_coordinates(self) -> np.ndarray:
        n, L = self.n_per_axis, self.half_width
        return -L + (np.arange(n) + 0.5) * self.spacing

    def coordinate_arrays(self):
        """Return (X, Y, Z), each (n, n, n); coordinate k varies along axis k,
        so tensor component k differentiates along np.gradient axis k."""
        c = self.axis_coordinates()
        X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
        return X, Y, Z

    def radius(self) -> np.ndarray:
        X, Y, Z = self.coordinate_arrays()
        return np.sqrt(X * X + Y * Y + Z * Z)

    def frequency_arrays(self):
        """Angular frequencies of the periodic transform, shape (n, n, n)."""
        n = self.n_per_axis
        xi = 2.0 * np.pi * np.fft.fftfreq(n, d=self.spacing)
        KX, KY, KZ = np.meshgrid(xi, xi, xi, indexing="ij")
        return KX, KY, KZ

    def taper(self) -> np.ndarray:
        """Cosine roll-off window over the outer TAPER_FRACTION of each axis."""
        c = np.abs(self.axis_coordinates())
        L = self.half_width
        r0 = (1.0 - TAPER_FRACTION) * L
        t = np.ones_like(c)
        outer = c > r0
        t[outer] = np.cos(0.5 * np.pi * (c[outer] - r0) / (L - r0)) ** 2
        return t[:, None, None] * t[None, :, None] * t[None, None, :]


@dataclass(frozen=True)
class SobolevIndex:
    """Differentiability order s >= 0 and decay weight exponent delta."""

    s: float
    delta: float

    def __post_init__(self):
        if not (self.s >= 0 and np.isfinite(self.s)):
            raise ValueError(f"order s must be >= 0, got {self.s}")
        if not np.isfinite(self.delta):
            raise ValueError(f"delta must be finite, got {self.delta}")


@dataclass(frozen=True)
class GridField:
    """Immutable sampled field: `data` has shape (components, n, n, n)."""

    grid: Grid
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != self.grid.shape:
            raise ValueError(
                f"data shape {arr.shape} incompatible with grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("field data contains non-finite entries")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def components(self) -> int:
        return self.data.shape[0]

    def component(self, c: int) -> np.ndarray:
        return self.data[c]

    @classmethod
    def from_function(cls, grid: Grid, func, components: int | None = None):
        """Sample func(X, Y, Z) -> array (or tuple of arrays) on the grid."""
        X, Y, Z = grid.coordinate_arrays()
        vals = func(X, Y, Z)
        if isinstance(vals, (tuple, list)):
            vals = np.stack(vals)
        vals = np.asarray(vals, dtype=np.float64)
        if vals.ndim == 3:
            vals = vals[None]
        if components is not None and vals.shape[0] != components:
            raise ValueError("component count mismatch")
        return cls(grid, vals)

    def boundary_max(self) -> float:
        """Largest |value| on the outermost cell layer."""
        a = np.abs(self.data)
        faces = [
            a[:, 0], a[:, -1],
            a[:, :, 0], a[:, :, -1],
            a[:, :, :, 0], a[:, :, :, -1],
        ]
        return float(max(f.max() for f in faces))


def scale_field(u: GridField, eps: float, target: Grid | None = None) -> GridField:
    """Return v with v(x) = u(eps * x) by trilinear interpolation.

    Query points outside the source grid read as zero.  The map is
    axis-aligned, so the interpolation separates into three 1-D passes.
    """
    if not (np.isfinite(eps) and eps > 0):
        raise ValueError(f"scaling factor must be positive and finite, got {eps}")
    target = target or u.grid
    if eps == 1.0 and target == u.grid:
        return u
    src = u.grid
    n = src.n_per_axis
    pos = (target.axis_coordinates() * eps + src.half_width) / src.spacing - 0.5
    i0 = np.floor(pos).astype(np.int64)
    w = pos - i0
    # zero halo: indices clip into the halo so exterior queries read 0
    lo = np.clip(i0 + 1, 0, n + 1)
    hi = np.clip(i0 + 2, 0, n + 1)
    arr = u.data
    for axis in range(3):
        pads = [(0, 0)] * arr.ndim
        pads[1 + axis] = (1, 1)
        p = np.pad(arr, pads, mode="constant")
        shape = [1] * arr.ndim
        shape[1 + axis] = len(pos)
        wk = w.reshape(shape)
        arr = p.take(lo, axis=1 + axis) * (1.0 - wk) + p.take(hi, axis=1 + axis) * wk
    return GridField(target, arr)


def _spectral_weight(grid: Grid, s: float) -> np.ndarray:
    KX, KY, KZ = grid.frequency_arrays()
    return (1.0 + KX * KX + KY * KY + KZ * KZ) ** s


def power_spectrum(u: GridField) -> np.ndarray:
    """|FFT|^2 of the tapered field, summed over components."""
    t = u.grid.taper()
    acc = None
    for c in range(u.components):
        F = np.fft.fftn(u.data[c] * t)
        p = F.real ** 2 + F.imag ** 2
        acc = p if acc is None else acc + p
    return acc


def spectrum_norm(grid: Grid, spectrum: np.ndarray, s: float) -> float:
    """H^s norm from a precomputed tapered power spectrum."""
    if s < 0:
        raise ValueError(f"order s must be >= 0, got {s}")
    # (h^3)^2 from the DFT-to-integral quadrature, times the frequency
    # cell volume (pi/L)^3 over (2 pi)^3; s = 0 then reproduces the
    # midpoint quadrature of the L^2 integral exactly.
    scale = grid.spacing ** 6 * (np.pi / grid.half_width) ** 3 / (2.0 * np.pi) ** 3
    if s == 0:
        total = spectrum.sum()
    else:
        total = (_spectral_weight(grid, s) * spectrum).sum()
    return float(np.sqrt(scale * total))


def bessel_norm(u: GridField, s: float) -> float:
    """Discrete H^s norm: sum over frequencies of (1+|xi|^2)^s |u^(xi)|^2.

    Multi-component fields are measured root-sum-square over components.
    """
    return spectrum_norm(u.grid, power_spectrum(u), s)


def bessel_apply(u: GridField, s: float) -> GridField:
    """Apply the smoothing operator of order s: weight the tapered
    transform by (1+|xi|^2)^(s/2) and invert."""
    t = u.grid.taper()
    w = (1.0 + sum(K * K for K in u.grid.frequency_arrays())) ** (0.5 * s)
    out = np.empty_like(u.data)
    for c in range(u.components):
        out[c] = np.fft.ifftn(w * np.fft.fftn(u.data[c] * t)).real
    return GridField(u.grid, out)


def l2_norm(u: GridField) -> float:
    """Midpoint-rule L^2 norm over the grid."""
    return float(np.sqrt(u.grid.spacing ** 3 * np.sum(u.data ** 2)))


DECAY_WARN_LEVEL = 1e-8


def write_field(path, u: GridField) -> None:
    """Binary layout: magic 'EEK1', u32 n, f64 L, u32 components, then
    components * n^3 f64 values, component-major then (z, y, x), little-endian."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", u.grid.n_per_axis))
        fh.write(struct.pack("<d", u.grid.half_width))
        fh.write(struct.pack("<I", u.components))
        fh.write(u.data.astype("<f8").tobytes())


def read_field(path, warn_decay: bool = True) -> GridField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FieldFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise FieldFormatError("truncated header: n_per_axis missing")
        n = struct.unpack("<I", raw)[0]
        raw = fh.read(8)
        if len(raw) < 8:
            raise FieldFormatError("truncated header: half_width missing")
        L = struct.unpack("<d", raw)[0]
        raw = fh.read(4)
        if len(raw) < 4:
            raise FieldFormatError("truncated header: components missing")
        comps = struct.unpack("<I", raw)[0]
        try:
            grid = Grid(int(n), float(L))
        except ValueError as exc:
            raise FieldFormatError(f"invalid header: {exc}") from exc
        count = comps * n ** 3
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise FieldFormatError(
                f"truncated payload: expected {count} f64 values, "
                f"got {len(payload) // 8}"
            )
        data = np.frombuffer(payload, dtype="<f8").reshape(comps, n, n, n)
    u = GridField(grid, data)
    bmax = u.boundary_max()
    if warn_decay and bmax > DECAY_WARN_LEVEL:
        warnings.warn(
            f"field is not decayed at the truncation boundary "
            f"(max |u| = {bmax:.3e} > {DECAY_WARN_LEVEL:.0e}); "
            f"norms and solves may be polluted by truncation",
            stacklevel=2,
        )
    return u
