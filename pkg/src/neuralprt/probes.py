"""Spherical-harmonic light probes with across-probe radiance sharing.

Each frame every valid probe traces ``rays`` single-sample paths in random
directions. The resulting shaded points (radiance + world position) are
splatted into the irradiance maps of the source probe and of its 26 lattice
neighbours, using the direction from the *receiving* probe to the point.
A neighbour only receives a point it can see (segment test against the
scene), so light does not leak through thin geometry between probes.
Maps accumulate a running sum and count; their texel means (empty texels
take the nearest sampled texel's mean) are projected to SH light
coefficients. Shading points blend the 8 surrounding probes with trilinear
weights, dropping probes behind the surface or occluded from it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from .geometry import RAY_EPS, Scene, any_hit, closest_hit, new_stack
from .rng import new_state, rand, stream_key
from .sh import EMPTY_MAP_LIMIT, IrradianceMap, SHVector, n_coeffs, project_means
from .tracer import probe_ray, trace_path, uniform_sphere

DUMP_MAGIC = b"NPRTPRBE"
DUMP_HEADER = struct.Struct("<8sIIIIIIQI")


@dataclass
class ProbeConfig:
    n: int = 8
    rays: int = 100
    width: int = 100
    height: int = 50
    L: int = 4
    bounces: int = 3
    rr_start: int = 3
    inset: float = 0.05
    seed: int = 0
    validity_rays: int = 64
    backface_limit: float = 0.25
    share_visibility: bool = True

    def __post_init__(self):
        if self.n < 1 or self.rays < 1 or self.width < 1 or self.height < 1 or self.bounces < 1:
            raise ValueError("probe grid sizes, ray count and bounces must be positive")
        if not 0 <= self.inset < 0.5:
            raise ValueError("inset must be in [0, 0.5)")


@dataclass
class ShadedPoints:
    """Structure-of-arrays list of shaded points."""

    position: np.ndarray
    radiance: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.source)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))


@dataclass
class SHLightProbe:
    index: tuple
    position: np.ndarray
    irradiance_map: IrradianceMap
    light_coeffs: SHVector
    valid: bool


# -- kernels ------------------------------------------------------------------------------


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _scatter_kernel(sd, positions, valid, rays, bounces, rr_start, seed):
    n = positions.shape[0]
    ok = np.zeros((n, rays), dtype=np.bool_)
    rad = np.zeros((n, rays, 3))
    pos = np.zeros((n, rays, 3))
    for p in numba.prange(n):
        if not valid[p]:
            continue
        stack = new_stack()
        out = np.empty(3)
        px, py, pz = positions[p, 0], positions[p, 1], positions[p, 2]
        for r in range(rays):
            st = new_state(seed, p * rays + r)
            dx, dy, dz = uniform_sphere(rand(st), rand(st))
            first, t, emit = trace_path(sd, px, py, pz, dx, dy, dz, 1, bounces, rr_start, st, stack, out)
            if first >= 0:
                # an emitter seen first reflects no indirect light: keep it as a zero sample
                ok[p, r] = True
                if not emit:
                    rad[p, r, 0] = out[0]
                    rad[p, r, 1] = out[1]
                    rad[p, r, 2] = out[2]
                pos[p, r, 0] = px + t * dx
                pos[p, r, 1] = py + t * dy
                pos[p, r, 2] = pz + t * dz
    return ok, rad, pos


@numba.njit(cache=True, inline="always")
def _texel(dx, dy, dz, width, height):
    theta = math.acos(min(1.0, max(-1.0, dz)))
    phi = math.atan2(dy, dx)
    if phi < 0.0:
        phi += 2.0 * math.pi
    row = min(int(theta / math.pi * height), height - 1)
    col = min(int(phi / (2.0 * math.pi) * width), width - 1)
    return row, col


@numba.njit(cache=True, inline="always")
def _splat(positions, t, px, py, pz, r, g, b, sums, counts, width, height):
    dx = px - positions[t, 0]
    dy = py - positions[t, 1]
    dz = pz - positions[t, 2]
    ln = math.sqrt(dx * dx + dy * dy + dz * dz)
    if ln <= 0.0:
        return
    row, col = _texel(dx / ln, dy / ln, dz / ln, width, height)
    sums[t, row, col, 0] += r
    sums[t, row, col, 1] += g
    sums[t, row, col, 2] += b
    counts[t, row, col] += 1


@numba.njit(cache=True, inline="always")
def _sees(sd, occlusion, positions, t, s, px, py, pz, stack):
    """Whether receiving probe ``t`` sees a point shaded by source probe ``s``."""
    if not occlusion or t == s:
        return True
    dx = px - positions[t, 0]
    dy = py - positions[t, 1]
    dz = pz - positions[t, 2]
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    if d <= 2.0 * RAY_EPS:
        return True
    return not any_hit(sd, 0, positions[t, 0], positions[t, 1], positions[t, 2], dx / d, dy / d, dz / d, 0.0,
                       d - 2.0 * RAY_EPS, stack)


@numba.njit(cache=True)
def _raster_serial(n, positions, valid, target_mask, ppos, prad, psrc, sums, counts, sd, occlusion):
    """Point-major scatter; points must be sorted by source probe."""
    height, width = counts.shape[1], counts.shape[2]
    stack = new_stack()
    for q in range(psrc.shape[0]):
        s = psrc[q]
        si = s // (n * n)
        sj = (s // n) % n
        sk = s % n
        for a in range(max(0, si - 1), min(n, si + 2)):
            for b in range(max(0, sj - 1), min(n, sj + 2)):
                for c in range(max(0, sk - 1), min(n, sk + 2)):
                    t = (a * n + b) * n + c
                    if valid[t] and target_mask[t] and _sees(sd, occlusion, positions, t, s, ppos[q, 0], ppos[q, 1],
                                                             ppos[q, 2], stack):
                        _splat(positions, t, ppos[q, 0], ppos[q, 1], ppos[q, 2], prad[q, 0], prad[q, 1], prad[q, 2],
                               sums, counts, width, height)


@numba.njit(cache=True, parallel=True)
def _raster_gather(n, positions, valid, target_mask, ppos, prad, start, stop, sums, counts, sd, occlusion):
    """Probe-major gather: each receiving probe owns its map, so no write conflicts."""
    height, width = counts.shape[1], counts.shape[2]
    for t in numba.prange(n * n * n):
        if not (valid[t] and target_mask[t]):
            continue
        stack = new_stack()
        ti = t // (n * n)
        tj = (t // n) % n
        tk = t % n
        for a in range(max(0, ti - 1), min(n, ti + 2)):
            for b in range(max(0, tj - 1), min(n, tj + 2)):
                for c in range(max(0, tk - 1), min(n, tk + 2)):
                    s = (a * n + b) * n + c
                    for q in range(start[s], stop[s]):
                        if _sees(sd, occlusion, positions, t, s, ppos[q, 0], ppos[q, 1], ppos[q, 2], stack):
                            _splat(positions, t, ppos[q, 0], ppos[q, 1], ppos[q, 2], prad[q, 0], prad[q, 1],
                                   prad[q, 2], sums, counts, width, height)


@numba.njit(cache=True)
def _corner_weights(n, lo, spacing, valid, positions, sd, xs, ns, use_scene, ids, ws):
    """Pruned trilinear weights for the 8 surrounding probes of every point."""
    stack = new_stack()
    for q in range(xs.shape[0]):
        f = np.empty(3)
        base = np.empty(3, np.int64)
        for a in range(3):
            v = 0.0 if spacing[a] <= 0.0 else (xs[q, a] - lo[a]) / spacing[a]
            v = min(max(v, 0.0), n - 1.0)
            rv = round(v)
            if abs(v - rv) < 1e-9:
                v = rv
            b = min(int(math.floor(v)), max(n - 2, 0))
            base[a] = b
            f[a] = v - b
        total = 0.0
        for corner in range(8):
            ci = base[0] + (corner >> 2 & 1)
            cj = base[1] + (corner >> 1 & 1)
            ck = base[2] + (corner & 1)
            ci = min(ci, n - 1)
            cj = min(cj, n - 1)
            ck = min(ck, n - 1)
            pid = (ci * n + cj) * n + ck
            ids[q, corner] = pid
            w = (f[0] if corner >> 2 & 1 else 1.0 - f[0]) * (f[1] if corner >> 1 & 1 else 1.0 - f[1]) * \
                (f[2] if corner & 1 else 1.0 - f[2])
            if n == 1 and corner > 0:
                w = 0.0
            if w > 0.0 and not _probe_usable(sd, use_scene, valid, positions, pid, xs, ns, q, stack):
                w = 0.0
            ws[q, corner] = w
            total += w
        if total > 0.0:
            for corner in range(8):
                ws[q, corner] /= total
            continue
        # everything pruned: inverse distance x clamped cosine over the valid corners
        total = 0.0
        for corner in range(8):
            pid = ids[q, corner]
            w = 0.0
            if valid[pid] and not _dup(ids, q, corner):
                dx = positions[pid, 0] - xs[q, 0]
                dy = positions[pid, 1] - xs[q, 1]
                dz = positions[pid, 2] - xs[q, 2]
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                if d <= 0.0:
                    w = 1e30
                else:
                    cs = (dx * ns[q, 0] + dy * ns[q, 1] + dz * ns[q, 2]) / d
                    w = max(cs, 0.0) / d
            ws[q, corner] = w
            total += w
        if total <= 0.0:
            for corner in range(8):
                pid = ids[q, corner]
                w = 0.0
                if valid[pid] and not _dup(ids, q, corner):
                    dx = positions[pid, 0] - xs[q, 0]
                    dy = positions[pid, 1] - xs[q, 1]
                    dz = positions[pid, 2] - xs[q, 2]
                    w = 1.0 / max(math.sqrt(dx * dx + dy * dy + dz * dz), 1e-12)
                ws[q, corner] = w
                total += w
        if total > 0.0:
            for corner in range(8):
                ws[q, corner] /= total
            continue
        # no valid corner at all (e.g. the cell lies inside an object): widen the search
        for strict in (True, False):
            for r in range(1, n):
                if _ring_pick(n, base, r, strict, valid, positions, sd, xs, ns, use_scene, q, stack, ids, ws):
                    break
            if ws[q, 0] > 0.0:
                break


@numba.njit(cache=True)
def _ring_pick(n, base, r, strict, valid, positions, sd, xs, ns, use_scene, q, stack, ids, ws):
    """Up to 8 nearest valid probes within ``r`` cells of the base cell, weighted by inverse distance.

    ``strict`` keeps only probes that pass the side and occlusion tests. Slots
    are filled in order of decreasing weight; unused slots get weight 0.
    """
    for c in range(8):
        ids[q, c] = ids[q, 0]
        ws[q, c] = 0.0
    found = 0
    for i in range(max(base[0] - r, 0), min(base[0] + 1 + r, n - 1) + 1):
        for j in range(max(base[1] - r, 0), min(base[1] + 1 + r, n - 1) + 1):
            for k in range(max(base[2] - r, 0), min(base[2] + 1 + r, n - 1) + 1):
                pid = (i * n + j) * n + k
                if not valid[pid]:
                    continue
                if strict and not _probe_usable(sd, use_scene, valid, positions, pid, xs, ns, q, stack):
                    continue
                dx = positions[pid, 0] - xs[q, 0]
                dy = positions[pid, 1] - xs[q, 1]
                dz = positions[pid, 2] - xs[q, 2]
                w = 1.0 / max(math.sqrt(dx * dx + dy * dy + dz * dz), 1e-12)
                # insertion into the sorted top 8
                slot = min(found, 8)
                while slot > 0 and ws[q, slot - 1] < w:
                    if slot < 8:
                        ws[q, slot] = ws[q, slot - 1]
                        ids[q, slot] = ids[q, slot - 1]
                    slot -= 1
                if slot < 8:
                    ws[q, slot] = w
                    ids[q, slot] = pid
                found += 1
    if found == 0:
        return False
    total = 0.0
    for c in range(8):
        total += ws[q, c]
    for c in range(8):
        ws[q, c] /= total
    return True


@numba.njit(cache=True, inline="always")
def _dup(ids, q, corner):
    for c in range(corner):
        if ids[q, c] == ids[q, corner]:
            return True
    return False


@numba.njit(cache=True, inline="always")
def _probe_usable(sd, use_scene, valid, positions, pid, xs, ns, q, stack):
    if not valid[pid]:
        return False
    dx = positions[pid, 0] - xs[q, 0]
    dy = positions[pid, 1] - xs[q, 1]
    dz = positions[pid, 2] - xs[q, 2]
    if dx * ns[q, 0] + dy * ns[q, 1] + dz * ns[q, 2] < 0.0:
        return False
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    if not use_scene or d <= RAY_EPS:
        return True
    ox = xs[q, 0] + RAY_EPS * ns[q, 0]
    oy = xs[q, 1] + RAY_EPS * ns[q, 1]
    oz = xs[q, 2] + RAY_EPS * ns[q, 2]
    ex = positions[pid, 0] - ox
    ey = positions[pid, 1] - oy
    ez = positions[pid, 2] - oz
    de = math.sqrt(ex * ex + ey * ey + ez * ez)
    if de <= 0.0:
        return True
    return not any_hit(sd, 0, ox, oy, oz, ex / de, ey / de, ez / de, 0.0, de, stack)


@numba.njit(cache=True)
def _backface_fraction(sd, positions, rays):
    n = positions.shape[0]
    out = np.zeros(n)
    stack = new_stack()
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for p in range(n):
        back = 0
        for r in range(rays):
            z = 1.0 - (2.0 * r + 1.0) / rays
            rr = math.sqrt(max(0.0, 1.0 - z * z))
            dx = rr * math.cos(golden * r)
            dy = rr * math.sin(golden * r)
            t, tri, u, v = closest_hit(sd, 0, positions[p, 0], positions[p, 1], positions[p, 2], dx, dy, z, 0.0, np.inf,
                                       stack)
            if tri >= 0 and dx * sd.ng[tri, 0] + dy * sd.ng[tri, 1] + z * sd.ng[tri, 2] > 0.0:
                back += 1
        out[p] = back / rays
    return out


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _independent_kernel(sd, positions, valid, width, height, per_texel, bounces, rr_start, seed):
    n = positions.shape[0]
    means = np.zeros((n, height, width, 3))
    for p in numba.prange(n):
        if not valid[p]:
            continue
        stack = new_stack()
        out = np.empty(3)
        for row in range(height):
            for col in range(width):
                st = new_state(seed, (p * height + row) * width + col)
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                c0 = math.cos(row * math.pi / height)
                c1 = math.cos((row + 1) * math.pi / height)
                for s in range(per_texel):
                    # uniform in solid angle inside the texel
                    z = c0 + (c1 - c0) * rand(st)
                    phi = (col + rand(st)) * 2.0 * math.pi / width
                    r = math.sqrt(max(0.0, 1.0 - z * z))
                    dx = r * math.cos(phi)
                    dy = r * math.sin(phi)
                    hit, t = probe_ray(sd, positions[p, 0], positions[p, 1], positions[p, 2], dx, dy, z, bounces,
                                       rr_start, st, stack, out)
                    if hit:
                        acc0 += out[0]
                        acc1 += out[1]
                        acc2 += out[2]
                means[p, row, col, 0] = acc0 / per_texel
                means[p, row, col, 1] = acc1 / per_texel
                means[p, row, col, 2] = acc2 / per_texel
    return means


# -- grid -----------------------------------------------------------------------------------


class ProbeGrid:
    """N^3 probes on the lattice of an axis-aligned box, boundary probes included."""

    def __init__(self, lo, hi, config: ProbeConfig | None = None):
        self.config = cfg = config or ProbeConfig()
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi < self.lo):
            raise ValueError("probe bounds are inverted")
        n = cfg.n
        self.spacing = (self.hi - self.lo) / max(n - 1, 1)
        g = np.arange(n)
        ii, jj, kk = np.meshgrid(g, g, g, indexing="ij")
        lattice = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        self.positions = self.lo + lattice * self.spacing if n > 1 else np.tile((self.lo + self.hi) / 2, (1, 1))
        self.valid = np.ones(n**3, dtype=np.bool_)
        self.K = n_coeffs(cfg.L)
        self.sums = np.zeros((n**3, cfg.height, cfg.width, 3))
        self.counts = np.zeros((n**3, cfg.height, cfg.width), dtype=np.int64)
        self.coeffs = np.zeros((n**3, 3, self.K))
        self.stale = np.zeros(n**3, dtype=np.bool_)
        self.frame = 0
        self.fingerprint = None

    @classmethod
    def from_scene(cls, scene: Scene, config: ProbeConfig | None = None, check_validity: bool = True) -> "ProbeGrid":
        cfg = config or ProbeConfig()
        lo, hi = (np.asarray(b, dtype=np.float64) for b in (scene.probe_bounds or scene.bounds()))
        pad = (hi - lo) * cfg.inset
        grid = cls(lo + pad, hi - pad, cfg)
        if check_validity:
            grid.update_validity(scene)
        grid.fingerprint = scene.fingerprint()
        return grid

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def n_probes(self) -> int:
        return self.n**3

    def linear_index(self, i, j, k) -> int:
        return (i * self.n + j) * self.n + k

    def lattice_index(self, p: int) -> tuple:
        n = self.n
        return p // (n * n), (p // n) % n, p % n

    def neighbors(self, p: int) -> list[int]:
        """Probe ids within one lattice step (Chebyshev), including ``p``."""
        i, j, k = self.lattice_index(p)
        n = self.n
        return [self.linear_index(a, b, c) for a in range(max(0, i - 1), min(n, i + 2))
                for b in range(max(0, j - 1), min(n, j + 2)) for c in range(max(0, k - 1), min(n, k + 2))]

    def update_validity(self, scene: Scene):
        """Probes that mostly see back faces sit inside geometry and are disabled."""
        if scene.n_triangles == 0:
            self.valid[:] = True
            return self.valid
        frac = _backface_fraction(scene.data, self.positions, self.config.validity_rays)
        self.valid = frac <= self.config.backface_limit
        self.coeffs[~self.valid] = 0.0
        return self.valid

    def reset(self):
        self.sums[:] = 0.0
        self.counts[:] = 0
        self.coeffs[:] = 0.0
        self.stale[:] = False
        self.frame = 0

    def probe(self, p: int) -> SHLightProbe:
        cfg = self.config
        m = IrradianceMap(cfg.width, cfg.height, self.sums[p], self.counts[p])
        return SHLightProbe(self.lattice_index(p), self.positions[p], m, SHVector(self.coeffs[p]), bool(self.valid[p]))


def frame_seed(seed: int, frame: int) -> int:
    return int(stream_key(np.uint64(seed), np.uint64(frame)))


def scatter_probe_rays(scene: Scene, grid: ProbeGrid, frame_seed: int) -> ShadedPoints:
    """Trace ``rays`` single-sample paths per valid probe; keep every surface hit.

    Misses are dropped. Rays whose first hit is an emitter become zero-radiance
    points, since the probes carry indirect light only.
    """
    cfg = grid.config
    ok, rad, pos = _scatter_kernel(scene.data, grid.positions, grid.valid, cfg.rays, cfg.bounces, cfg.rr_start,
                                   np.uint64(frame_seed))
    src = np.broadcast_to(np.arange(grid.n_probes)[:, None], ok.shape)
    return ShadedPoints(pos[ok], rad[ok], src[ok].astype(np.int64))


def rasterize_shared(grid: ProbeGrid, points: ShadedPoints, targets=None, parallel: bool = True,
                     scene: Scene | None = None) -> ProbeGrid:
    """Splat points into the maps of their source probe and its lattice neighbours.

    ``targets`` restricts which receiving probes are updated (default: all).
    With a ``scene`` (and ``share_visibility`` on) a neighbour skips points
    hidden from it. Both execution modes add contributions per texel in the
    same order, so they produce identical sums.
    """
    mask = np.ones(grid.n_probes, dtype=np.bool_)
    if targets is not None:
        mask[:] = False
        mask[np.atleast_1d(targets)] = True
    if len(points) == 0:
        return grid
    order = np.argsort(points.source, kind="stable")
    ppos = np.ascontiguousarray(points.position[order], dtype=np.float64)
    prad = np.ascontiguousarray(points.radiance[order], dtype=np.float64)
    psrc = np.ascontiguousarray(points.source[order], dtype=np.int64)
    occlusion = scene is not None and scene.n_triangles > 0 and grid.config.share_visibility
    sd = scene.data if occlusion else _DUMMY.data
    if parallel:
        bounds = np.searchsorted(psrc, np.arange(grid.n_probes + 1))
        _raster_gather(grid.n, grid.positions, grid.valid, mask, ppos, prad, bounds[:-1], bounds[1:], grid.sums,
                       grid.counts, sd, occlusion)
    else:
        _raster_serial(grid.n, grid.positions, grid.valid, mask, ppos, prad, psrc, grid.sums, grid.counts, sd,
                       occlusion)
    return grid


def _fill_empty(means, empty):
    """Give texels without samples the mean of the nearest sampled texel (azimuth wraps)."""
    if not empty.any() or empty.all():
        return
    w = empty.shape[1]
    h = w // 2
    wrapped = np.concatenate([empty[:, -h:], empty, empty[:, :h]], axis=1)
    rows, cols = ndimage.distance_transform_edt(wrapped, return_distances=False, return_indices=True)
    rows = rows[:, h:h + w]
    cols = (cols[:, h:h + w] - h) % w
    means[empty] = means[rows[empty], cols[empty]]


def update_probe_sh(grid: ProbeGrid, probes=None) -> np.ndarray:
    """Project texel means to light coefficients; sparse maps keep old values and go stale."""
    ids = np.arange(grid.n_probes) if probes is None else np.atleast_1d(probes)
    counts = grid.counts[ids]
    empty = np.mean(counts == 0, axis=(1, 2))
    ok = grid.valid[ids] & (empty <= EMPTY_MAP_LIMIT)
    zero = grid.valid[ids] & (counts.sum(axis=(1, 2)) == 0)
    use = ids[ok]
    if len(use):
        c = grid.counts[use][..., None]
        means = np.divide(grid.sums[use], c, out=np.zeros_like(grid.sums[use]), where=c > 0)
        for q in range(len(use)):
            _fill_empty(means[q], c[q, :, :, 0] == 0)
        grid.coeffs[use] = project_means(means, grid.config.L)
    grid.stale[ids] = grid.valid[ids] & ~ok & ~zero
    grid.coeffs[ids[~grid.valid[ids]]] = 0.0
    return grid.coeffs[ids]


def step_frame(scene: Scene, grid: ProbeGrid, frame_seed_value: int | None = None, parallel: bool = True) -> ProbeGrid:
    """One accumulation frame. Accumulation restarts when the scene changed."""
    fp = scene.fingerprint()
    if grid.fingerprint is not None and fp != grid.fingerprint:
        grid.reset()
        grid.update_validity(scene)
    grid.fingerprint = fp
    seed = frame_seed(grid.config.seed, grid.frame) if frame_seed_value is None else frame_seed_value
    pts = scatter_probe_rays(scene, grid, seed)
    rasterize_shared(grid, pts, parallel=parallel, scene=scene)
    update_probe_sh(grid)
    grid.frame += 1
    return grid


def run_frames(scene: Scene, grid: ProbeGrid, frames: int, parallel: bool = True) -> ProbeGrid:
    for _ in range(frames):
        step_frame(scene, grid, parallel=parallel)
    return grid


def probe_weights(grid: ProbeGrid, xs, ns, scene: Scene | None = None):
    """(probe ids, weights), each shaped (m, 8). ``scene=None`` skips the occlusion test."""
    xs = np.ascontiguousarray(xs, dtype=np.float64).reshape(-1, 3)
    ns = np.ascontiguousarray(ns, dtype=np.float64).reshape(-1, 3)
    ids = np.zeros((len(xs), 8), dtype=np.int64)
    ws = np.zeros((len(xs), 8))
    sd = scene.data if scene is not None and scene.n_triangles else _DUMMY.data
    _corner_weights(grid.n, grid.lo, grid.spacing, grid.valid, grid.positions, sd, xs, ns,
                    scene is not None and scene.n_triangles > 0, ids, ws)
    return ids, ws


def interpolate_light_many(grid: ProbeGrid, xs, ns, scene: Scene | None = None, chunk: int = 8192) -> np.ndarray:
    ids, ws = probe_weights(grid, xs, ns, scene)
    out = np.empty((len(ids), 3, grid.K))
    for s in range(0, len(ids), chunk):
        sl = slice(s, s + chunk)
        out[sl] = np.einsum("qc,qcjk->qjk", ws[sl], grid.coeffs[ids[sl]])
    return out


def interpolate_light(grid: ProbeGrid, x, n, scene: Scene | None = None) -> SHVector:
    return SHVector(interpolate_light_many(grid, x, n, scene)[0])


def independent_probe_coeffs(scene: Scene, grid: ProbeGrid, per_texel: int = 4, seed: int = 1) -> np.ndarray:
    """Oracle: each probe fills its own map by tracing stratified rays through every texel."""
    cfg = grid.config
    means = _independent_kernel(scene.data, grid.positions, grid.valid, cfg.width, cfg.height, per_texel, cfg.bounces,
                                cfg.rr_start, np.uint64(seed))
    out = project_means(means, cfg.L)
    out[~grid.valid] = 0.0
    return out


def band_relative_error(a: np.ndarray, b: np.ndarray, valid=None) -> np.ndarray:
    """Per-band ||a - b|| / ||b|| pooled over probes and channels."""
    if valid is not None:
        a, b = a[valid], b[valid]
    L = math.isqrt(a.shape[-1]) - 1
    errs = []
    for l in range(L + 1):
        sl = slice(l * l, (l + 1) * (l + 1))
        den = np.sqrt(np.sum(b[..., sl] ** 2))
        errs.append(float(np.sqrt(np.sum((a[..., sl] - b[..., sl]) ** 2)) / den) if den > 0 else 0.0)
    return np.array(errs)


# -- dump ---------------------------------------------------------------------------------


def dump_record_dtype(K: int) -> np.dtype:
    return np.dtype([("position", "<f4", (3,)), ("valid", "<i4"), ("coeffs", "<f4", (3 * K,)), ("texels", "<u4")])


def write_probe_dump(grid: ProbeGrid, path, seed: int = 0, manifest: dict | None = None) -> Path:
    """Index file: header, JSON manifest, then per probe position, validity, coefficients, total texel count."""
    cfg = grid.config
    rec = np.zeros(grid.n_probes, dtype=dump_record_dtype(grid.K))
    rec["position"] = grid.positions
    rec["valid"] = grid.valid
    rec["coeffs"] = grid.coeffs.reshape(grid.n_probes, -1)
    rec["texels"] = np.minimum(grid.counts.sum(axis=(1, 2)), 2**32 - 1)
    blob = json.dumps({**grid_state(grid), **(manifest or {})}, sort_keys=True, default=str).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DUMP_HEADER.pack(DUMP_MAGIC, 1, cfg.n, cfg.L, cfg.width, cfg.height, grid.frame, seed & (2**64 - 1),
                                  len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())
    return path


def read_probe_dump(path):
    raw = Path(path).read_bytes()
    magic, ver, n, L, w, h, frames, seed, bl = DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: not a probe dump")
    meta = json.loads(raw[DUMP_HEADER.size:DUMP_HEADER.size + bl].decode())
    rec = np.frombuffer(raw, dump_record_dtype(n_coeffs(L)), n**3, DUMP_HEADER.size + bl)
    return {"n": n, "L": L, "width": w, "height": h, "frames": frames, "seed": seed, "manifest": meta, "records": rec}


def grid_state(grid: ProbeGrid) -> dict:
    return {"probe": asdict(grid.config), "frames": grid.frame, "lo": grid.lo.tolist(), "hi": grid.hi.tolist(),
            "valid": int(grid.valid.sum())}


def _dummy_scene():
    from .geometry import Material, MaterialKind, TriangleMesh

    tri = TriangleMesh(np.array([[1e6, 1e6, 1e6], [1e6 + 1, 1e6, 1e6], [1e6, 1e6 + 1, 1e6]]), None,
                       np.array([[0, 1, 2]]))
    return Scene([tri], [Material(MaterialKind.LAMBERTIAN, (0, 0, 0))])


class _Lazy:
    _scene = None

    @property
    def data(self):
        if self._scene is None:
            _Lazy._scene = _dummy_scene()
        return self._scene.data


_DUMMY = _Lazy()
