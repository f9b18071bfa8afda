"""Real spherical harmonics, equirectangular projection and coefficient products.

Convention: real orthonormal basis, no Condon-Shortley phase, z is the polar
axis. Flat index ``k = l*l + l + m``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

MAX_DEGREE = 16
EMPTY_MAP_LIMIT = 0.95


class SHError(ValueError):
    pass


class EmptyMapError(SHError):
    """Raised when too few texels carry samples to project a map."""


def n_coeffs(L: int) -> int:
    return (L + 1) * (L + 1)


def flat_index(l: int, m: int) -> int:
    if l < 0 or abs(m) > l:
        raise SHError(f"invalid SH index (l={l}, m={m})")
    return l * l + l + m


def lm_from_index(k: int) -> tuple[int, int]:
    l = math.isqrt(k)
    return l, k - l * l - l


@functools.lru_cache(maxsize=None)
def norm_table(L: int) -> np.ndarray:
    """K_l^m normalisation constants, shape (L+1, L+1)."""
    kn = np.zeros((L + 1, L + 1))
    for l in range(L + 1):
        for m in range(l + 1):
            kn[l, m] = math.sqrt(
                (2 * l + 1) / (4 * math.pi) * math.exp(math.lgamma(l - m + 1) - math.lgamma(l + m + 1))
            )
    return kn


@numba.njit(cache=True)
def sh_basis_into(L, x, y, z, kn, out):
    """Write the (L+1)^2 basis values for unit direction (x, y, z) into ``out``."""
    sqrt2 = 1.4142135623730951
    cm = 1.0
    sm = 0.0
    pmm = 1.0
    for m in range(L + 1):
        if m > 0:
            c_new = cm * x - sm * y
            sm = cm * y + sm * x
            cm = c_new
            pmm *= 2 * m - 1
        p2 = 0.0
        p1 = 0.0
        for l in range(m, L + 1):
            if l == m:
                p = pmm
            elif l == m + 1:
                p = z * (2 * m + 1) * pmm
            else:
                p = ((2 * l - 1) * z * p1 - (l + m - 1) * p2) / (l - m)
            p2 = p1
            p1 = p
            base = l * l + l
            if m == 0:
                out[base] = kn[l, 0] * p
            else:
                out[base + m] = sqrt2 * kn[l, m] * p * cm
                out[base - m] = sqrt2 * kn[l, m] * p * sm


@numba.njit(cache=True)
def _basis_many(L, dirs, kn):
    K = (L + 1) * (L + 1)
    out = np.empty((dirs.shape[0], K))
    for i in range(dirs.shape[0]):
        sh_basis_into(L, dirs[i, 0], dirs[i, 1], dirs[i, 2], kn, out[i])
    return out


def _check_degree(L):
    if not 0 <= L <= MAX_DEGREE:
        raise SHError(f"SH degree {L} outside [0, {MAX_DEGREE}]")


def sh_basis(L: int, dirs) -> np.ndarray:
    """Basis values for one direction (shape (K,)) or many (shape (n, K))."""
    _check_degree(L)
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    out = _basis_many(L, np.ascontiguousarray(d.reshape(-1, 3)), norm_table(L))
    return out[0] if single else out


def sh_eval(l: int, m: int, dirs) -> np.ndarray | float:
    if l < 0 or l > MAX_DEGREE or abs(m) > l:
        raise SHError(f"invalid SH index (l={l}, m={m})")
    v = sh_basis(l, dirs)[..., flat_index(l, m)]
    return float(v) if np.ndim(v) == 0 else v


@dataclass
class SHVector:
    """RGB coefficient block laid out as [channel][k]."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim == 1:
            c = c.reshape(3, -1)
        if c.ndim != 2 or c.shape[0] != 3:
            raise SHError(f"SHVector needs shape (3, K), got {c.shape}")
        L = math.isqrt(c.shape[1]) - 1
        if n_coeffs(L) != c.shape[1]:
            raise SHError(f"{c.shape[1]} coefficients is not a square count")
        self.coeffs = c

    @property
    def degree(self) -> int:
        return math.isqrt(self.coeffs.shape[1]) - 1

    @classmethod
    def zeros(cls, L: int) -> "SHVector":
        return cls(np.zeros((3, n_coeffs(L))))

    def band(self, l: int) -> np.ndarray:
        return self.coeffs[:, l * l:(l + 1) * (l + 1)]

    def to_bytes(self) -> bytes:
        return self.coeffs.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, L: int) -> "SHVector":
        return cls(np.frombuffer(buf, dtype="<f4", count=3 * n_coeffs(L)).astype(np.float64))

    def __add__(self, other):
        return SHVector(self.coeffs + _coeffs(other))

    def __mul__(self, s):
        return SHVector(self.coeffs * s)

    __rmul__ = __mul__


def _coeffs(x) -> np.ndarray:
    return x.coeffs if isinstance(x, SHVector) else np.asarray(x, dtype=np.float64)


def sh_dot(a, b) -> np.ndarray:
    """Per-channel inner product of two coefficient blocks (any leading batch shape)."""
    ca, cb = _coeffs(a), _coeffs(b)
    if ca.shape[-1] != cb.shape[-1]:
        raise SHError(f"degree mismatch: {ca.shape[-1]} vs {cb.shape[-1]} coefficients")
    return np.einsum("...k,...k->...", ca, cb)


# -- equirectangular maps ------------------------------------------------------


@dataclass
class IrradianceMap:
    """Accumulated radiance samples on a latitude-longitude grid.

    Row 0 looks along +z; column 0 starts at azimuth 0 (+x) and azimuth grows
    toward +y.
    """

    width: int = 100
    height: int = 50
    sums: np.ndarray = field(default=None, repr=False)
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros((self.height, self.width, 3))
        if self.counts is None:
            self.counts = np.zeros((self.height, self.width), dtype=np.int64)

    def means(self) -> np.ndarray:
        c = self.counts[..., None]
        return np.divide(self.sums, c, out=np.zeros_like(self.sums), where=c > 0)

    def empty_fraction(self) -> float:
        return float(np.mean(self.counts == 0))

    @classmethod
    def from_function(cls, fn, width=100, height=50) -> "IrradianceMap":
        """Single-sample map with ``fn(dirs) -> (n, 3)`` evaluated at texel centres."""
        dirs = texel_directions(width, height).reshape(-1, 3)
        vals = np.asarray(fn(dirs), dtype=np.float64).reshape(height, width, -1)
        vals = np.broadcast_to(vals, (height, width, 3)).copy()
        return cls(width, height, vals, np.ones((height, width), dtype=np.int64))


@functools.lru_cache(maxsize=16)
def texel_directions(width: int, height: int) -> np.ndarray:
    theta = (np.arange(height) + 0.5) * math.pi / height
    phi = (np.arange(width) + 0.5) * 2 * math.pi / width
    st = np.sin(theta)[:, None]
    d = np.stack(
        [st * np.cos(phi)[None, :], st * np.sin(phi)[None, :], np.broadcast_to(np.cos(theta)[:, None], (height, width))],
        axis=-1,
    )
    d.flags.writeable = False
    return d


@functools.lru_cache(maxsize=16)
def texel_solid_angles(width: int, height: int) -> np.ndarray:
    """Exact per-texel solid angle (cos t0 - cos t1) * dphi; sums to 4*pi."""
    edges = np.cos(np.arange(height + 1) * math.pi / height)
    band = (edges[:-1] - edges[1:]) * (2 * math.pi / width)
    sa = np.repeat(band[:, None], width, axis=1)
    sa.flags.writeable = False
    return sa


@functools.lru_cache(maxsize=16)
def projection_matrix(width: int, height: int, L: int) -> np.ndarray:
    """(H*W, K) matrix of Y_k(texel) * solid_angle(texel)."""
    Y = sh_basis(L, texel_directions(width, height).reshape(-1, 3))
    P = Y * texel_solid_angles(width, height).reshape(-1, 1)
    P.flags.writeable = False
    return P


def project_means(means: np.ndarray, L: int) -> np.ndarray:
    """Project texel means of shape (..., H, W, 3) to coefficients (..., 3, K)."""
    h, w = means.shape[-3], means.shape[-2]
    P = projection_matrix(w, h, L)
    flat = means.reshape(means.shape[:-3] + (h * w, 3))
    return np.swapaxes(flat, -1, -2) @ P


def project_map(m: IrradianceMap, L: int = 4) -> SHVector:
    if not np.any(m.counts > 0):
        raise EmptyMapError("irradiance map has no samples")
    if m.empty_fraction() > EMPTY_MAP_LIMIT:
        raise EmptyMapError(f"{m.empty_fraction():.1%} of texels are empty")
    return SHVector(project_means(m.means(), L))


def direction_to_texel(d: np.ndarray, width: int, height: int):
    """Row/column of the texel containing each unit direction."""
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * math.pi)
    row = np.minimum((theta / math.pi * height).astype(np.int64), height - 1)
    col = np.minimum((phi / (2 * math.pi) * width).astype(np.int64), width - 1)
    return row, col


def band_energy(c) -> np.ndarray:
    """Per-band sum of squared coefficients, shape (3, L+1)."""
    c = _coeffs(c)
    L = math.isqrt(c.shape[-1]) - 1
    return np.stack([np.sum(c[..., l * l:(l + 1) * (l + 1)] ** 2, axis=-1) for l in range(L + 1)], axis=-1)


def hanning_window(L: int) -> np.ndarray:
    """Per-coefficient Hanning taper over bands (deringing)."""
    w = np.empty(n_coeffs(L))
    for l in range(L + 1):
        w[l * l:(l + 1) * (l + 1)] = 0.5 * (1 + math.cos(math.pi * l / (L + 1)))
    return w
