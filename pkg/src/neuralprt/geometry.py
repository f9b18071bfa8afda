"""Triangle meshes, materials, lights, BVH construction and ray queries."""

from __future__ import annotations

import enum
import hashlib
import math
from collections import namedtuple
from dataclasses import dataclass, field, replace

import numba
import numpy as np

RAY_EPS = 1e-4
LEAF_SIZE = 4
_STACK = 64


class SceneError(ValueError):
    pass


class MaterialKind(enum.IntEnum):
    LAMBERTIAN = 0
    GLOSSY = 1
    MIRROR = 2


class LightKind(str, enum.Enum):
    AREA = "area"
    POINT = "point"
    ENVIRONMENT = "environment"


@dataclass
class Material:
    kind: MaterialKind = MaterialKind.LAMBERTIAN
    albedo: tuple = (0.8, 0.8, 0.8)
    glossy_exponent: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.kind = MaterialKind(self.kind)
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise SceneError(f"material {self.name!r}: albedo must be RGB in [0, 1], got {self.albedo}")
        self.albedo = tuple(float(x) for x in a)
        if self.kind == MaterialKind.GLOSSY and not self.glossy_exponent > 0:
            raise SceneError(f"material {self.name!r}: glossy_exponent must be > 0")


@dataclass
class TriangleMesh:
    positions: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray
    material_id: int = 0
    object_id: int = 0
    name: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.positions)):
            raise SceneError(f"mesh {self.name!r}: triangle index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.positions, self.triangles)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if n.shape != self.positions.shape:
            raise SceneError(f"mesh {self.name!r}: {len(n)} normals for {len(self.positions)} vertices")
        length = np.linalg.norm(n, axis=1, keepdims=True)
        if np.any(length == 0) or not np.all(np.isfinite(n)):
            raise SceneError(f"mesh {self.name!r}: zero or non-finite normal")
        self.normals = n / length

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.positions[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def translated(self, offset) -> "TriangleMesh":
        return replace(self, positions=self.positions + np.asarray(offset, dtype=np.float64))


@dataclass
class LightSource:
    kind: LightKind
    radiance: tuple = (1.0, 1.0, 1.0)
    position: tuple | None = None
    mesh: TriangleMesh | None = None
    env_map: np.ndarray | None = None

    def __post_init__(self):
        self.kind = LightKind(self.kind)
        r = np.asarray(self.radiance, dtype=np.float64)
        if r.shape != (3,) or np.any(r < 0) or not np.all(np.isfinite(r)):
            raise SceneError(f"{self.kind.value} light: radiance must be finite non-negative RGB")
        self.radiance = tuple(float(x) for x in r)
        if self.kind == LightKind.POINT and self.position is None:
            raise SceneError("point light needs a position")
        if self.kind == LightKind.AREA and self.mesh is None:
            raise SceneError("area light needs emitter geometry")
        if self.env_map is not None:
            m = np.asarray(self.env_map, dtype=np.float64)
            if m.ndim != 3 or m.shape[2] != 3 or np.any(m < 0):
                raise SceneError("environment map must be (H, W, 3) non-negative")
            self.env_map = m


@dataclass
class Camera:
    position: tuple = (0.0, -1.0, 0.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 0.0, 1.0)
    vfov: float = 40.0
    width: int = 64
    height: int = 64

    def basis(self):
        p = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - p
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return p, fwd, right, up

    def with_resolution(self, width: int, height: int) -> "Camera":
        return replace(self, width=int(width), height=int(height))


# -- tessellation ---------------------------------------------------------------


def vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = positions[triangles]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    n = np.zeros_like(positions)
    for j in range(3):
        np.add.at(n, triangles[:, j], fn)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(length > 0, n / np.where(length > 0, length, 1), np.array([0.0, 0.0, 1.0]))


def quad_mesh(origin, edge_u, edge_v, subdiv=(1, 1), **kw) -> TriangleMesh:
    """Planar quad, front face along cross(edge_u, edge_v)."""
    o, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, edge_u, edge_v))
    nu, nv = int(subdiv[0]), int(subdiv[1])
    s, t = np.meshgrid(np.linspace(0, 1, nu + 1), np.linspace(0, 1, nv + 1), indexing="ij")
    pos = o + s.reshape(-1, 1) * u + t.reshape(-1, 1) * v
    nrm = np.cross(u, v)
    nrm = np.tile(nrm / np.linalg.norm(nrm), (len(pos), 1))
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriangleMesh(pos, nrm, tris, **kw)


def sphere_mesh(center, radius, rings=16, segments=32, inward=False, **kw) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    theta = np.linspace(0, math.pi, rings + 1)
    phi = np.linspace(0, 2 * math.pi, segments + 1)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    pos = c + radius * dirs
    idx = np.arange((rings + 1) * (segments + 1)).reshape(rings + 1, segments + 1)
    tris = []
    for i in range(rings):
        for j in range(segments):
            a, b, cc, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            if i != 0:
                tris.append((a, b, d))
            if i != rings - 1:
                tris.append((b, cc, d))
    tris = np.asarray(tris, dtype=np.int64)
    nrm = dirs.copy()
    if inward:
        tris = tris[:, ::-1].copy()
        nrm = -nrm
    return TriangleMesh(pos, nrm, tris, **kw)


def box_mesh(center, size, rotate_z=0.0, subdiv=1, inward=False, **kw) -> TriangleMesh:
    """Axis-aligned box (optionally rotated about z) with flat per-face normals."""
    c = np.asarray(center, dtype=np.float64)
    h = 0.5 * np.asarray(size, dtype=np.float64)
    faces = []
    for axis in range(3):
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        for sign in (1.0, -1.0):
            o = np.zeros(3)
            o[axis] = sign * h[axis]
            u = np.zeros(3)
            v = np.zeros(3)
            u[a1] = 2 * h[a1]
            v[a2] = 2 * h[a2]
            if sign < 0:
                u, v = v, u
            o = o - 0.5 * u - 0.5 * v
            if inward:
                o, u = o + u, -u
            faces.append(quad_mesh(o, u, v, (subdiv, subdiv)))
    pos, nrm, tris = [], [], []
    base = 0
    ang = math.radians(rotate_z)
    R = np.array([[math.cos(ang), -math.sin(ang), 0], [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
    for f in faces:
        pos.append(f.positions @ R.T + c)
        nrm.append(f.normals @ R.T)
        tris.append(f.triangles + base)
        base += f.n_vertices
    return TriangleMesh(np.concatenate(pos), np.concatenate(nrm), np.concatenate(tris), **kw)


# -- BVH ------------------------------------------------------------------------


@numba.njit(cache=True)
def _surface_area(lo, hi):
    dx = max(hi[0] - lo[0], 0.0)
    dy = max(hi[1] - lo[1], 0.0)
    dz = max(hi[2] - lo[2], 0.0)
    return 2.0 * (dx * dy + dy * dz + dz * dx)


@numba.njit(cache=True)
def build_bvh(tlo, thi, cent, prim_ids, leaf_size):
    """Binned-SAH BVH over the given primitives.

    Returns node bounds, child links (-1 for leaves), leaf ranges and the
    reordered primitive list.
    """
    n = prim_ids.shape[0]
    prims = prim_ids.copy()
    maxn = max(2 * n, 1)
    bmin = np.zeros((maxn, 3))
    bmax = np.zeros((maxn, 3))
    left = np.full(maxn, -1, dtype=np.int64)
    right = np.full(maxn, -1, dtype=np.int64)
    start = np.zeros(maxn, dtype=np.int64)
    count = np.zeros(maxn, dtype=np.int64)
    NB = 12
    st_node = np.empty(2 * maxn + 2, dtype=np.int64)
    st_s = np.empty(2 * maxn + 2, dtype=np.int64)
    st_e = np.empty(2 * maxn + 2, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_s[0] = 0
    st_e[0] = n
    sp = 1
    nn = 1
    blo = np.empty((NB, 3))
    bhi = np.empty((NB, 3))
    bcnt = np.empty(NB, dtype=np.int64)
    rlo = np.empty((NB, 3))
    rhi = np.empty((NB, 3))
    rcnt = np.empty(NB, dtype=np.int64)
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_s[sp]
        e = st_e[sp]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(s, e):
            p = prims[i]
            for a in range(3):
                lo[a] = min(lo[a], tlo[p, a])
                hi[a] = max(hi[a], thi[p, a])
                clo[a] = min(clo[a], cent[p, a])
                chi[a] = max(chi[a], cent[p, a])
        bmin[node] = lo
        bmax[node] = hi
        cnt = e - s
        start[node] = s
        count[node] = cnt
        if cnt <= leaf_size:
            continue
        best_cost = np.inf
        best_axis = -1
        best_bin = -1
        for a in range(3):
            ext = chi[a] - clo[a]
            if ext <= 1e-12:
                continue
            for b in range(NB):
                bcnt[b] = 0
                for k in range(3):
                    blo[b, k] = np.inf
                    bhi[b, k] = -np.inf
            for i in range(s, e):
                p = prims[i]
                b = min(int(NB * (cent[p, a] - clo[a]) / ext), NB - 1)
                bcnt[b] += 1
                for k in range(3):
                    blo[b, k] = min(blo[b, k], tlo[p, k])
                    bhi[b, k] = max(bhi[b, k], thi[p, k])
            # suffix sweep
            acc_lo = np.full(3, np.inf)
            acc_hi = np.full(3, -np.inf)
            acc_c = 0
            for b in range(NB - 1, -1, -1):
                for k in range(3):
                    acc_lo[k] = min(acc_lo[k], blo[b, k])
                    acc_hi[k] = max(acc_hi[k], bhi[b, k])
                acc_c += bcnt[b]
                rlo[b] = acc_lo
                rhi[b] = acc_hi
                rcnt[b] = acc_c
            acc_lo = np.full(3, np.inf)
            acc_hi = np.full(3, -np.inf)
            acc_c = 0
            for b in range(NB - 1):
                for k in range(3):
                    acc_lo[k] = min(acc_lo[k], blo[b, k])
                    acc_hi[k] = max(acc_hi[k], bhi[b, k])
                acc_c += bcnt[b]
                if acc_c == 0 or rcnt[b + 1] == 0:
                    continue
                cost = acc_c * _surface_area(acc_lo, acc_hi) + rcnt[b + 1] * _surface_area(rlo[b + 1], rhi[b + 1])
                if cost < best_cost:
                    best_cost = cost
                    best_axis = a
                    best_bin = b
        if best_axis < 0:
            if cnt <= 4 * leaf_size:
                continue
            mid = (s + e) // 2
        else:
            ext = chi[best_axis] - clo[best_axis]
            i = s
            j = e - 1
            while i <= j:
                p = prims[i]
                b = min(int(NB * (cent[p, best_axis] - clo[best_axis]) / ext), NB - 1)
                if b <= best_bin:
                    i += 1
                else:
                    prims[i] = prims[j]
                    prims[j] = p
                    j -= 1
            mid = i
            if mid == s or mid == e:
                mid = (s + e) // 2
        left[node] = nn
        right[node] = nn + 1
        st_node[sp] = nn
        st_s[sp] = s
        st_e[sp] = mid
        sp += 1
        st_node[sp] = nn + 1
        st_s[sp] = mid
        st_e[sp] = e
        sp += 1
        nn += 2
    return bmin[:nn].copy(), bmax[:nn].copy(), left[:nn].copy(), right[:nn].copy(), start[:nn].copy(), count[:nn].copy(), prims


SceneData = namedtuple(
    "SceneData",
    [
        "pos", "nrm", "tri", "v0", "e1", "e2", "ng", "area",
        "tri_mat", "tri_obj", "emit",
        "mat_kind", "mat_albedo", "mat_exp",
        "bmin", "bmax", "left", "right", "start", "count", "prims", "obj_root",
        "surf_cdf", "emit_tris", "emit_cdf", "emit_pdf_area",
        "pl_pos", "pl_int",
        "env_kind", "env_const", "env_map",
        "light_sel",
    ],
)


@numba.njit(cache=True, inline="always")
def _ray_box(sd, node, ox, oy, oz, ix, iy, iz, tmin, tmax):
    t0 = (sd.bmin[node, 0] - ox) * ix
    t1 = (sd.bmax[node, 0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    lo = max(tmin, t0)
    hi = min(tmax, t1)
    t0 = (sd.bmin[node, 1] - oy) * iy
    t1 = (sd.bmax[node, 1] - oy) * iy
    if t0 > t1:
        t0, t1 = t1, t0
    lo = max(lo, t0)
    hi = min(hi, t1)
    t0 = (sd.bmin[node, 2] - oz) * iz
    t1 = (sd.bmax[node, 2] - oz) * iz
    if t0 > t1:
        t0, t1 = t1, t0
    lo = max(lo, t0)
    hi = min(hi, t1)
    if lo <= hi:
        return lo
    return np.inf


@numba.njit(cache=True, inline="always")
def _ray_tri(sd, p, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore; returns (t, u, v) with t = inf on miss."""
    e1x, e1y, e1z = sd.e1[p, 0], sd.e1[p, 1], sd.e1[p, 2]
    e2x, e2y, e2z = sd.e2[p, 0], sd.e2[p, 1], sd.e2[p, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - sd.v0[p, 0]
    ty = oy - sd.v0[p, 1]
    tz = oz - sd.v0[p, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@numba.njit(cache=True, error_model="numpy")
def closest_hit(sd, root, ox, oy, oz, dx, dy, dz, tmin, tmax, stack):
    """Nearest hit in (tmin, tmax). Returns (t, tri, u, v); tri = -1 on miss."""
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    best_t = tmax
    best_p = -1
    best_u = 0.0
    best_v = 0.0
    if _ray_box(sd, root, ox, oy, oz, ix, iy, iz, tmin, best_t) == np.inf:
        return np.inf, -1, 0.0, 0.0
    sp = 0
    stack[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        l = sd.left[node]
        if l < 0:
            s = sd.start[node]
            for i in range(s, s + sd.count[node]):
                p = sd.prims[i]
                t, u, v = _ray_tri(sd, p, ox, oy, oz, dx, dy, dz)
                if t > tmin and t < best_t:
                    best_t = t
                    best_p = p
                    best_u = u
                    best_v = v
            continue
        r = sd.right[node]
        tl = _ray_box(sd, l, ox, oy, oz, ix, iy, iz, tmin, best_t)
        tr = _ray_box(sd, r, ox, oy, oz, ix, iy, iz, tmin, best_t)
        if tl < tr:
            if tr != np.inf:
                stack[sp] = r
                sp += 1
            stack[sp] = l
            sp += 1
        else:
            if tl != np.inf:
                stack[sp] = l
                sp += 1
            if tr != np.inf:
                stack[sp] = r
                sp += 1
    if best_p < 0:
        return np.inf, -1, 0.0, 0.0
    return best_t, best_p, best_u, best_v


@numba.njit(cache=True, error_model="numpy")
def any_hit(sd, root, ox, oy, oz, dx, dy, dz, tmin, tmax, stack):
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    if _ray_box(sd, root, ox, oy, oz, ix, iy, iz, tmin, tmax) == np.inf:
        return False
    stack[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        l = sd.left[node]
        if l < 0:
            s = sd.start[node]
            for i in range(s, s + sd.count[node]):
                t, u, v = _ray_tri(sd, sd.prims[i], ox, oy, oz, dx, dy, dz)
                if t > tmin and t < tmax:
                    return True
            continue
        r = sd.right[node]
        if _ray_box(sd, l, ox, oy, oz, ix, iy, iz, tmin, tmax) != np.inf:
            stack[sp] = l
            sp += 1
        if _ray_box(sd, r, ox, oy, oz, ix, iy, iz, tmin, tmax) != np.inf:
            stack[sp] = r
            sp += 1
    return False


@numba.njit(cache=True)
def new_stack():
    return np.empty(_STACK, dtype=np.int64)


@numba.njit(cache=True)
def _closest_many(sd, o, d, tmin, tmax):
    n = o.shape[0]
    t_out = np.empty(n)
    tri_out = np.empty(n, dtype=np.int64)
    uv = np.empty((n, 2))
    stack = new_stack()
    for i in range(n):
        t, p, u, v = closest_hit(sd, 0, o[i, 0], o[i, 1], o[i, 2], d[i, 0], d[i, 1], d[i, 2], tmin[i], tmax[i], stack)
        t_out[i] = t
        tri_out[i] = p
        uv[i, 0] = u
        uv[i, 1] = v
    return t_out, tri_out, uv


# -- surface sampling -------------------------------------------------------------


@numba.njit(cache=True)
def _search_cdf(cdf, u):
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    return lo


@numba.njit(cache=True)
def sample_surface(sd, u0, u1, u2, out_bary):
    """Area-weighted triangle and uniform barycentrics; returns triangle id."""
    p = _search_cdf(sd.surf_cdf, u0 * sd.surf_cdf[-1])
    su = math.sqrt(u1)
    l0 = 1.0 - su
    l1 = u2 * su
    out_bary[0] = l0
    out_bary[1] = l1
    out_bary[2] = 1.0 - l0 - l1
    return p


@numba.njit(cache=True, inline="always")
def interp_point(sd, p, b0, b1, b2, out_pos, out_nrm):
    i0 = sd.tri[p, 0]
    i1 = sd.tri[p, 1]
    i2 = sd.tri[p, 2]
    nn = 0.0
    for a in range(3):
        out_pos[a] = b0 * sd.pos[i0, a] + b1 * sd.pos[i1, a] + b2 * sd.pos[i2, a]
        out_nrm[a] = b0 * sd.nrm[i0, a] + b1 * sd.nrm[i1, a] + b2 * sd.nrm[i2, a]
        nn += out_nrm[a] * out_nrm[a]
    nn = math.sqrt(nn)
    if nn > 0:
        for a in range(3):
            out_nrm[a] /= nn
    else:
        for a in range(3):
            out_nrm[a] = sd.ng[p, a]


# -- scene --------------------------------------------------------------------------


@dataclass
class Hit:
    t: float
    triangle: int
    bary: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    geometric_normal: np.ndarray
    material_id: int
    object_id: int


@dataclass
class SurfaceSample:
    triangle: int
    vertex_ids: np.ndarray
    bary: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray


def _luminance(rgb) -> float:
    r = np.asarray(rgb, dtype=np.float64)
    return float(0.2126 * r[..., 0] + 0.7152 * r[..., 1] + 0.0722 * r[..., 2])


@dataclass
class Scene:
    """Immutable scene; ``data`` holds the flattened arrays used by kernels."""

    meshes: list
    materials: list
    lights: list = field(default_factory=list)
    probe_bounds: tuple | None = None
    camera: Camera | None = None
    data: SceneData = field(default=None, repr=False)
    mesh_vertex_offset: np.ndarray = field(default=None, repr=False)
    mesh_triangle_offset: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.data is None:
            self._build()

    @property
    def n_vertices(self) -> int:
        return int(self.data.pos.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.data.tri.shape[0])

    @property
    def n_objects(self) -> int:
        return len(self.meshes)

    @property
    def environment(self) -> LightSource | None:
        for lt in self.lights:
            if lt.kind == LightKind.ENVIRONMENT:
                return lt
        return None

    def bounds(self):
        if self.n_vertices == 0:
            return np.zeros(3), np.zeros(3)
        return self.data.pos.min(axis=0), self.data.pos.max(axis=0)

    def _build(self):
        nm = len(self.materials)
        if nm == 0:
            raise SceneError("scene has no materials")
        for i, m in enumerate(self.meshes):
            if not 0 <= m.material_id < nm:
                raise SceneError(f"mesh {m.name or i!r}: material_id {m.material_id} undefined ({nm} materials)")
        materials = list(self.materials)
        objects = [replace(m, object_id=i) for i, m in enumerate(self.meshes)]
        emissive = {}
        if any(lt.kind == LightKind.AREA for lt in self.lights):
            materials.append(Material(MaterialKind.LAMBERTIAN, (0.0, 0.0, 0.0), name="__emitter__"))
            for li, lt in enumerate(self.lights):
                if lt.kind == LightKind.AREA:
                    emissive[len(objects)] = lt.radiance
                    objects.append(replace(lt.mesh, material_id=nm, object_id=len(objects), name=lt.mesh.name or f"light{li}"))
        self.objects = objects
        self.all_materials = materials
        meshes = objects

        vo = np.cumsum([0] + [m.n_vertices for m in meshes])
        to = np.cumsum([0] + [m.n_triangles for m in meshes])
        self.mesh_vertex_offset = vo
        self.mesh_triangle_offset = to
        pos = np.concatenate([np.zeros((0, 3))] + [m.positions for m in meshes])
        nrm = np.concatenate([np.zeros((0, 3))] + [m.normals for m in meshes])
        tri = np.concatenate([np.zeros((0, 3), np.int64)] + [m.triangles + vo[i] for i, m in enumerate(meshes)])
        tri_mat = np.concatenate([np.zeros(0, np.int64)] + [np.full(m.n_triangles, m.material_id, dtype=np.int64) for m in meshes])
        tri_obj = np.concatenate([np.zeros(0, np.int64)] + [np.full(m.n_triangles, i, dtype=np.int64) for i, m in enumerate(meshes)])
        emit = np.zeros((len(tri), 3))
        for oid, rad in emissive.items():
            emit[to[oid]:to[oid + 1]] = rad

        p = pos[tri]
        v0 = p[:, 0].copy()
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        cr = np.cross(e1, e2)
        dbl = np.linalg.norm(cr, axis=1)
        if not np.all(np.isfinite(dbl)):
            raise SceneError("non-finite triangle area")
        area = 0.5 * dbl
        ng = np.divide(cr, dbl[:, None], out=np.zeros_like(cr), where=dbl[:, None] > 0)

        # global BVH followed by one BVH per object, sharing the node pool
        tlo, thi, cent = p.min(axis=1), p.max(axis=1), p.mean(axis=1)
        parts = [np.arange(len(tri), dtype=np.int64)] + [np.arange(to[i], to[i + 1], dtype=np.int64) for i in range(len(meshes))]
        arrays = [[] for _ in range(7)]
        roots = []
        node_base = 0
        prim_base = 0
        for pi, ids in enumerate(parts):
            if len(ids) == 0 and pi > 0:
                roots.append(-1)
                continue
            bmin, bmax, left, right, start, count, prims = build_bvh(tlo, thi, cent, ids, LEAF_SIZE)
            left = np.where(left >= 0, left + node_base, -1)
            right = np.where(right >= 0, right + node_base, -1)
            for k, a in enumerate((bmin, bmax, left, right, start + prim_base, count, prims)):
                arrays[k].append(a)
            roots.append(node_base)
            node_base += len(bmin)
            prim_base += len(prims)
        bmin, bmax, left, right, start, count, prims = (np.concatenate(a) for a in arrays)
        obj_root = np.asarray(roots[1:], dtype=np.int64)

        mat_kind = np.array([int(m.kind) for m in materials], dtype=np.int64)
        mat_albedo = np.array([m.albedo for m in materials], dtype=np.float64)
        mat_exp = np.array([m.glossy_exponent for m in materials], dtype=np.float64)

        surf_w = np.where(np.any(emit > 0, axis=1), 0.0, area)
        if surf_w.sum() <= 0:
            surf_w = area.copy()
        surf_cdf = np.cumsum(np.concatenate([surf_w, [0.0]]))[:max(len(surf_w), 1)]

        emit_w = area * (0.2126 * emit[:, 0] + 0.7152 * emit[:, 1] + 0.0722 * emit[:, 2])
        emit_tris = np.nonzero(emit_w > 0)[0].astype(np.int64)
        emit_pdf_area = np.zeros(len(tri))
        if len(emit_tris):
            w = emit_w[emit_tris]
            emit_cdf = np.cumsum(w) / w.sum()
            emit_pdf_area[emit_tris] = (w / w.sum()) / area[emit_tris]
        else:
            emit_cdf = np.ones(1)

        pls = [lt for lt in self.lights if lt.kind == LightKind.POINT]
        pl_pos = np.array([lt.position for lt in pls], dtype=np.float64).reshape(-1, 3)
        pl_int = np.array([lt.radiance for lt in pls], dtype=np.float64).reshape(-1, 3)
        env = self.environment
        env_kind = 0
        env_const = np.zeros(3)
        env_map = np.zeros((1, 1, 3))
        if env is not None:
            if env.env_map is not None:
                env_kind = 2
                env_map = np.ascontiguousarray(env.env_map * np.asarray(env.radiance))
            elif max(env.radiance) > 0:
                env_kind = 1
                env_const = np.asarray(env.radiance, dtype=np.float64)
        sel = np.array([len(emit_tris) > 0, len(pls) > 0, env_kind > 0], dtype=np.float64)
        if sel.sum() > 0:
            sel /= sel.sum()

        self.data = SceneData(
            pos=pos, nrm=nrm, tri=tri, v0=v0, e1=e1, e2=e2, ng=ng, area=area,
            tri_mat=tri_mat, tri_obj=tri_obj, emit=emit,
            mat_kind=mat_kind, mat_albedo=mat_albedo, mat_exp=mat_exp,
            bmin=bmin, bmax=bmax, left=left, right=right, start=start, count=count, prims=prims, obj_root=obj_root,
            surf_cdf=surf_cdf, emit_tris=emit_tris, emit_cdf=emit_cdf, emit_pdf_area=emit_pdf_area,
            pl_pos=pl_pos, pl_int=pl_int,
            env_kind=env_kind, env_const=env_const, env_map=env_map,
            light_sel=sel,
        )

        if self.probe_bounds is None:
            lo, hi = self.bounds()
            self.probe_bounds = (tuple(lo), tuple(hi))
        else:
            lo = np.asarray(self.probe_bounds[0], dtype=np.float64)
            hi = np.asarray(self.probe_bounds[1], dtype=np.float64)
            slack = 1e-9 * max(1.0, float(np.abs(pos).max()))
            if np.any(pos < lo - slack) or np.any(pos > hi + slack):
                raise SceneError("probe_bounds must contain every mesh vertex")
            self.probe_bounds = (tuple(lo), tuple(hi))

    # -- queries --------------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for a in (self.data.pos, self.data.tri, self.data.mat_albedo, self.data.emit, self.data.pl_pos, self.data.pl_int,
                  self.data.env_const, self.data.env_map):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def hit_record(self, t: float, tri: int, u: float, v: float) -> Hit:
        sd = self.data
        bary = np.array([1.0 - u - v, u, v])
        idx = sd.tri[tri]
        position = bary @ sd.pos[idx]
        n = bary @ sd.nrm[idx]
        n /= np.linalg.norm(n)
        return Hit(float(t), int(tri), bary, position, n, sd.ng[tri].copy(), int(sd.tri_mat[tri]), int(sd.tri_obj[tri]))

    def intersect(self, origin, direction, t_min: float = 0.0, t_max: float = np.inf) -> Hit | None:
        o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
        d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
        t, tri, uv = _closest_many(self.data, o, d, np.array([t_min], float), np.array([t_max], float))
        if tri[0] < 0:
            return None
        return self.hit_record(t[0], tri[0], uv[0, 0], uv[0, 1])

    def intersect_many(self, origins, directions, t_min=0.0, t_max=np.inf):
        """Vectorised nearest hits: (t, triangle, uv), triangle = -1 on miss."""
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
        tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        return _closest_many(self.data, o, d, tmin, tmax)

    def sample_surface_point(self, rng: np.random.Generator) -> SurfaceSample:
        if self.data.surf_cdf[-1] <= 0:
            raise SceneError("degenerate scene: total surface area is zero")
        u = rng.random(3)
        return self.surface_sample_from_uniforms(*u)

    def surface_sample_from_uniforms(self, u0, u1, u2) -> SurfaceSample:
        sd = self.data
        bary = np.empty(3)
        p = sample_surface(sd, float(u0), float(u1), float(u2), bary)
        pos = np.empty(3)
        nrm = np.empty(3)
        interp_point(sd, p, bary[0], bary[1], bary[2], pos, nrm)
        return SurfaceSample(int(p), sd.tri[p].copy(), bary, pos, nrm, sd.mat_albedo[sd.tri_mat[p]].copy())

    def object_radius(self, obj: int) -> float:
        lo, hi = self.mesh_triangle_offset[obj], self.mesh_triangle_offset[obj + 1]
        idx = np.unique(self.data.tri[lo:hi])
        pts = self.data.pos[idx]
        c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        return float(np.max(np.linalg.norm(pts - c, axis=1)))

    def moved(self, object_id: int, offset) -> "Scene":
        """Copy with one object rigidly translated (vertex ordering unchanged)."""
        if not 0 <= object_id < len(self.meshes):
            raise SceneError(f"object {object_id} is not a movable mesh")
        meshes = [m.translated(offset) if i == object_id else m for i, m in enumerate(self.meshes)]
        return Scene(meshes, self.materials, list(self.lights), None, self.camera)

    def moved_light(self, light_index: int, offset) -> "Scene":
        lights = []
        for i, lt in enumerate(self.lights):
            if i == light_index:
                if lt.kind == LightKind.POINT:
                    lt = replace(lt, position=tuple(np.asarray(lt.position, dtype=float) + np.asarray(offset)))
                elif lt.kind == LightKind.AREA:
                    lt = replace(lt, mesh=lt.mesh.translated(offset))
                else:
                    raise SceneError("environment lights cannot be moved")
            lights.append(lt)
        return Scene(list(self.meshes), self.materials, lights, None, self.camera)


