"""Ground-truth transfer coefficients and the training dataset file.

For a surface point x with outgoing direction wo, the transfer vector is

    t_c[k] = integral over the upper hemisphere of
             f_c(x, wi, wo) * V(x, wi, t) * (wi . n) * Y_k(wi) dwi

estimated with ``n_incident`` uniformly distributed hemisphere directions. The
directions come from a rank-1 lattice (R2 sequence) with a per-sample random
toroidal shift, so each direction is marginally uniform (pdf 1/2pi) and the
estimate stays unbiased while the error drops well below plain Monte Carlo.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from .geometry import RAY_EPS, Scene, SceneError, any_hit, interp_point, new_stack, sample_surface
from .rng import new_state, rand
from .sh import SHVector, n_coeffs, norm_table, sh_basis_into
from .tracer import GLOSSY, LAMBERTIAN, MIRROR, brdf_scale, to_world, uniform_hemisphere

DATASET_MAGIC = b"NPRTDSET"
DATASET_VERSION = 1
HEADER = struct.Struct("<8sIIQQQIIQII")
assert HEADER.size == 64

_R2_G = 1.32471795724474602596
_R2_A1 = 1.0 / _R2_G
_R2_A2 = 1.0 / (_R2_G * _R2_G)
_MIN_COS_OUT = 1e-3


class DatasetError(ValueError):
    pass


@dataclass
class BakeConfig:
    n_samples: int = 2_048_000
    n_incident: int = 2000
    t_threshold: float | None = None
    L: int = 4
    seed: int = 0
    chunk: int = 4096

    def __post_init__(self):
        if self.n_samples < 1 or self.n_incident < 1 or self.L < 0:
            raise ValueError("n_samples, n_incident must be positive and L >= 0")
        if self.t_threshold is not None and not self.t_threshold > 0:
            raise ValueError("t_threshold must be positive")

    def thresholds(self, scene: Scene) -> np.ndarray:
        """Per-object visibility distance; default twice the bounding-sphere radius."""
        if self.t_threshold is not None:
            return np.full(len(scene.objects), float(self.t_threshold))
        return np.array([2.0 * max(scene.object_radius(o), 1e-6) for o in range(len(scene.objects))])


def record_dtype(L: int) -> np.dtype:
    K = n_coeffs(L)
    return np.dtype([
        ("tri", "<u4"), ("idx", "<u4", (3,)), ("bary", "<f4", (3,)), ("x", "<f4", (3,)), ("wo", "<f4", (3,)),
        ("n", "<f4", (3,)), ("albedo", "<f4", (3,)), ("t", "<f4", (3, K)),
    ])


# -- kernels ---------------------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def visible(sd, obj, ox, oy, oz, wx, wy, wz, t_max, stack):
    """1 when the ray meets no triangle of object ``obj`` closer than ``t_max``."""
    root = sd.obj_root[obj]
    if root < 0:
        return 1.0
    if any_hit(sd, root, ox, oy, oz, wx, wy, wz, 0.0, t_max, stack):
        return 0.0
    return 1.0


@numba.njit(cache=True, error_model="numpy")
def transfer_into(sd, mat, obj, x, wo, n, ng, n_incident, t_max, L, kn, sx, sy, stack, ybuf, out):
    """Accumulate the transfer estimate for one (x, wo) into ``out`` (3, K)."""
    K = (L + 1) * (L + 1)
    for c in range(3):
        for k in range(K):
            out[c, k] = 0.0
    ar = sd.mat_albedo[mat, 0]
    ag = sd.mat_albedo[mat, 1]
    ab = sd.mat_albedo[mat, 2]
    if ar == 0.0 and ag == 0.0 and ab == 0.0:
        return
    # geometric normal on the shading side
    gx, gy, gz = ng[0], ng[1], ng[2]
    if gx * n[0] + gy * n[1] + gz * n[2] < 0.0:
        gx, gy, gz = -gx, -gy, -gz
    ox = x[0] + RAY_EPS * gx
    oy = x[1] + RAY_EPS * gy
    oz = x[2] + RAY_EPS * gz
    kind = sd.mat_kind[mat]
    if kind == MIRROR:
        dn = wo[0] * n[0] + wo[1] * n[1] + wo[2] * n[2]
        rx = 2.0 * dn * n[0] - wo[0]
        ry = 2.0 * dn * n[1] - wo[1]
        rz = 2.0 * dn * n[2] - wo[2]
        if rx * n[0] + ry * n[1] + rz * n[2] <= 0.0 or rx * gx + ry * gy + rz * gz <= 0.0:
            return
        if visible(sd, obj, ox, oy, oz, rx, ry, rz, t_max, stack) == 0.0:
            return
        sh_basis_into(L, rx, ry, rz, kn, ybuf)
        for k in range(K):
            out[0, k] = ar * ybuf[k]
            out[1, k] = ag * ybuf[k]
            out[2, k] = ab * ybuf[k]
        return
    inv_n = 2.0 * math.pi / n_incident
    for j in range(n_incident):
        u1 = sx + j * _R2_A1
        u1 -= math.floor(u1)
        u2 = sy + j * _R2_A2
        u2 -= math.floor(u2)
        lx, ly, lz = uniform_hemisphere(u1, u2)
        if lz <= 0.0:
            continue
        wx, wy, wz = to_world(lx, ly, lz, n[0], n[1], n[2])
        if wx * gx + wy * gy + wz * gz <= 0.0:
            continue
        f = brdf_scale(sd, mat, wx, wy, wz, wo[0], wo[1], wo[2], n[0], n[1], n[2])
        if f == 0.0:
            continue
        if visible(sd, obj, ox, oy, oz, wx, wy, wz, t_max, stack) == 0.0:
            continue
        s = f * lz * inv_n
        sh_basis_into(L, wx, wy, wz, kn, ybuf)
        for k in range(K):
            yk = ybuf[k] * s
            out[0, k] += ar * yk
            out[1, k] += ag * yk
            out[2, k] += ab * yk


@numba.njit(cache=True, error_model="numpy")
def _transfer_points(sd, mats, objs, xs, wos, ns, ngs, n_incident, t_max, L, kn, seed, stream):
    m = xs.shape[0]
    K = (L + 1) * (L + 1)
    res = np.zeros((m, 3, K))
    stack = new_stack()
    ybuf = np.empty(K)
    for i in range(m):
        st = new_state(seed, stream + i)
        sx = rand(st)
        sy = rand(st)
        tm = t_max[objs[i]] if objs[i] >= 0 else 0.0
        obj = objs[i] if objs[i] >= 0 else 0
        if objs[i] < 0:
            tm = -1.0
        transfer_into(sd, mats[i], obj, xs[i], wos[i], ns[i], ngs[i], n_incident, tm, L, kn, sx, sy, stack, ybuf, res[i])
    return res


@numba.njit(cache=True, error_model="numpy")
def _bake_chunk(sd, first, count, n_incident, t_max, L, kn, seed,
                tri_o, idx_o, bary_o, x_o, wo_o, n_o, alb_o, t_o):
    stack = new_stack()
    K = (L + 1) * (L + 1)
    ybuf = np.empty(K)
    bary = np.empty(3)
    x = np.empty(3)
    n = np.empty(3)
    wo = np.empty(3)
    ng = np.empty(3)
    acc = np.empty((3, K))
    for r in range(count):
        st = new_state(seed, first + r)
        p = sample_surface(sd, rand(st), rand(st), rand(st), bary)
        interp_point(sd, p, bary[0], bary[1], bary[2], x, n)
        for a in range(3):
            ng[a] = sd.ng[p, a]
        u1 = _MIN_COS_OUT + (1.0 - _MIN_COS_OUT) * rand(st)
        lx, ly, lz = uniform_hemisphere(u1, rand(st))
        wx, wy, wz = to_world(lx, ly, lz, n[0], n[1], n[2])
        wo[0] = wx
        wo[1] = wy
        wo[2] = wz
        mat = sd.tri_mat[p]
        obj = sd.tri_obj[p]
        sx = rand(st)
        sy = rand(st)
        transfer_into(sd, mat, obj, x, wo, n, ng, n_incident, t_max[obj], L, kn, sx, sy, stack, ybuf, acc)
        tri_o[r] = p
        for a in range(3):
            idx_o[r, a] = sd.tri[p, a]
            bary_o[r, a] = bary[a]
            x_o[r, a] = x[a]
            wo_o[r, a] = wo[a]
            n_o[r, a] = n[a]
            alb_o[r, a] = sd.mat_albedo[mat, a]
        for c in range(3):
            for k in range(K):
                t_o[r, c, k] = acc[c, k]


# -- public API ----------------------------------------------------------------------------


def visibility(scene: Scene, x_o, w_i, t_threshold: float, object_id: int, normal=None) -> int:
    """Object-centric visibility: 0 when ``object_id`` is hit within ``t_threshold``."""
    x = np.asarray(x_o, dtype=np.float64)
    w = np.asarray(w_i, dtype=np.float64)
    off = np.asarray(normal if normal is not None else w, dtype=np.float64)
    if np.dot(off, w) < 0:
        off = -off
    o = x + RAY_EPS * off / np.linalg.norm(off)
    return int(visible(scene.data, object_id, o[0], o[1], o[2], w[0], w[1], w[2], float(t_threshold), new_stack()))


def compute_transfer(scene: Scene, x_o, w_o, n, material: int, config: BakeConfig | None = None, rng=None,
                     object_id: int | None = None, geometric_normal=None) -> SHVector:
    """Transfer vector at one surface point. ``object_id=None`` disables self-occlusion."""
    cfg = config or BakeConfig()
    n = np.asarray(n, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    if np.dot(w_o, n) <= 0:
        raise ValueError("outgoing direction must lie in the upper hemisphere of n")
    ng = n if geometric_normal is None else np.asarray(geometric_normal, dtype=np.float64)
    seed = cfg.seed if rng is None else int(rng.integers(0, 2**63 - 1))
    res = transfer_points(scene, np.array([material]), np.array([-1 if object_id is None else object_id]),
                          x_o, w_o, n, ng, cfg, seed=seed)
    return SHVector(res[0])


def transfer_points(scene: Scene, materials, objects, xs, wos, ns, ngs, config: BakeConfig, seed: int = 0,
                    stream: int = 0) -> np.ndarray:
    """Transfer vectors for many points, shape (m, 3, K). Object id -1 disables occlusion."""
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    xs, wos, ns, ngs = f(xs), f(wos), f(ns), f(ngs)
    mats = np.ascontiguousarray(materials, dtype=np.int64).reshape(-1)
    objs = np.ascontiguousarray(objects, dtype=np.int64).reshape(-1)
    return _transfer_points(scene.data, mats, objs, xs, wos, ns, ngs, config.n_incident, config.thresholds(scene),
                            config.L, norm_table(config.L), np.uint64(seed), np.uint64(stream))


def bake_chunk(scene: Scene, config: BakeConfig, first: int, count: int) -> np.ndarray:
    rec = np.zeros(count, dtype=record_dtype(config.L))
    K = n_coeffs(config.L)
    tri = np.empty(count, np.int64)
    idx = np.empty((count, 3), np.int64)
    cols = [np.empty((count, 3)) for _ in range(5)]
    t = np.empty((count, 3, K))
    _bake_chunk(scene.data, first, count, config.n_incident, config.thresholds(scene), config.L, norm_table(config.L),
                np.uint64(config.seed), tri, idx, *cols, t)
    rec["tri"] = tri
    rec["idx"] = idx
    for name, c in zip(("bary", "x", "wo", "n", "albedo"), cols):
        rec[name] = c
    rec["t"] = t
    return rec


def bake_dataset(scene: Scene, config: BakeConfig, path, meta: dict | None = None, progress=None) -> Path:
    """Stream ``config.n_samples`` records to ``path``; returns the path."""
    if scene.data.surf_cdf[-1] <= 0:
        raise SceneError("degenerate scene: no surface area to sample")
    path = Path(path)
    blob = json.dumps({"bake": asdict(config), **(meta or {})}, sort_keys=True).encode()
    dt = record_dtype(config.L)
    header = HEADER.pack(DATASET_MAGIC, DATASET_VERSION, config.L, config.n_samples, scene.n_vertices,
                         scene.n_triangles, config.n_incident, dt.itemsize, config.seed & (2**64 - 1), len(blob), 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(blob)
        done = 0
        while done < config.n_samples:
            count = min(config.chunk, config.n_samples - done)
            fh.write(bake_chunk(scene, config, done, count).tobytes())
            done += count
            if progress is not None:
                progress(done, config.n_samples)
    return path


@dataclass
class Dataset:
    path: Path
    L: int
    n_records: int
    n_vertices: int
    n_triangles: int
    n_incident: int
    seed: int
    meta: dict
    records: np.ndarray

    @classmethod
    def open(cls, path) -> "Dataset":
        path = Path(path)
        with open(path, "rb") as fh:
            raw = fh.read(HEADER.size)
            if len(raw) < HEADER.size:
                raise DatasetError(f"{path}: truncated header")
            magic, ver, L, n, nv, nt, ninc, rb, seed, bl, _ = HEADER.unpack(raw)
            if magic != DATASET_MAGIC or ver != DATASET_VERSION:
                raise DatasetError(f"{path}: not a transfer dataset (magic {magic!r}, version {ver})")
            meta = json.loads(fh.read(bl).decode())
        dt = record_dtype(L)
        if dt.itemsize != rb:
            raise DatasetError(f"{path}: record size {rb} does not match degree {L}")
        offset = HEADER.size + bl
        if path.stat().st_size != offset + n * rb:
            raise DatasetError(f"{path}: expected {n} records, file size disagrees")
        recs = np.memmap(path, dtype=dt, mode="r", offset=offset, shape=(n,))
        return cls(path, L, n, nv, nt, ninc, seed, meta, recs)

    def check_scene(self, scene: Scene):
        if scene.n_vertices != self.n_vertices or scene.n_triangles != self.n_triangles:
            raise DatasetError(
                f"dataset was baked for {self.n_vertices} vertices / {self.n_triangles} triangles, "
                f"scene has {scene.n_vertices} / {scene.n_triangles}")

    def summary(self, limit: int = 200_000) -> dict:
        t = np.asarray(self.records["t"][:limit], dtype=np.float64)
        bands = [float(np.mean(np.abs(t[:, :, l * l:(l + 1) * (l + 1)]))) for l in range(self.L + 1)]
        return {"n_records": self.n_records, "L": self.L, "mean_abs_t": float(np.mean(np.abs(t))),
                "mean_abs_t_per_band": bands}
