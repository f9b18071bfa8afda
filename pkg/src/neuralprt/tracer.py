"""Unidirectional path tracer: reference images, probe-ray shading, direct lighting.

Contributions are tagged with their bounce index ``b`` (number of surface
scattering events between the light and the sensor). Emission seen directly has
``b = 0``; light reflected once has ``b = 1``. Modes select a band of ``b``:
direct_only keeps ``b <= 1``, gi_only keeps ``b >= 2``, full keeps everything.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .geometry import RAY_EPS, Camera, MaterialKind, Scene, any_hit, closest_hit, new_stack
from .rng import new_state, rand, substream

INV_PI = 1.0 / math.pi
INV_4PI = 1.0 / (4.0 * math.pi)
LAMBERTIAN = int(MaterialKind.LAMBERTIAN)
GLOSSY = int(MaterialKind.GLOSSY)
MIRROR = int(MaterialKind.MIRROR)


class Mode(str, enum.Enum):
    DIRECT_ONLY = "direct_only"
    GI_ONLY = "gi_only"
    FULL = "full"


@dataclass
class PathConfig:
    max_bounces: int = 8
    spp: int = 64
    mode: Mode = Mode.FULL
    rr_start: int = 3
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.max_bounces < 1 or self.spp < 1:
            raise ValueError("max_bounces and spp must be >= 1")

    def bounce_band(self):
        lo, hi = {Mode.DIRECT_ONLY: (0, 1), Mode.GI_ONLY: (2, self.max_bounces), Mode.FULL: (0, self.max_bounces)}[self.mode]
        return lo, min(hi, self.max_bounces)


# -- small vector helpers ---------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _normalize(x, y, z):
    n = math.sqrt(x * x + y * y + z * z)
    return x / n, y / n, z / n


@numba.njit(cache=True, inline="always")
def onb(nx, ny, nz):
    """Orthonormal tangent frame (Duff et al. branchless construction)."""
    sign = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    return (1.0 + sign * nx * nx * a, sign * b, -sign * nx), (b, sign + ny * ny * a, -ny)


@numba.njit(cache=True, inline="always")
def to_world(lx, ly, lz, nx, ny, nz):
    t, b = onb(nx, ny, nz)
    return (lx * t[0] + ly * b[0] + lz * nx, lx * t[1] + ly * b[1] + lz * ny, lx * t[2] + ly * b[2] + lz * nz)


@numba.njit(cache=True, inline="always")
def cosine_hemisphere(u1, u2):
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    return r * math.cos(phi), r * math.sin(phi), math.sqrt(max(0.0, 1.0 - u1))


@numba.njit(cache=True, inline="always")
def uniform_hemisphere(u1, u2):
    z = u1
    r = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u2
    return r * math.cos(phi), r * math.sin(phi), z


@numba.njit(cache=True, inline="always")
def uniform_sphere(u1, u2):
    z = 1.0 - 2.0 * u1
    r = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u2
    return r * math.cos(phi), r * math.sin(phi), z


@numba.njit(cache=True, inline="always")
def _lum(r, g, b):
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


# -- materials ------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def brdf_scale(sd, mat, wix, wiy, wiz, wox, woy, woz, nx, ny, nz):
    """Scalar lobe value; multiply by the material albedo for RGB. Mirrors return 0."""
    kind = sd.mat_kind[mat]
    if kind == LAMBERTIAN:
        return INV_PI
    if kind == GLOSSY:
        e = sd.mat_exp[mat]
        dn = wox * nx + woy * ny + woz * nz
        rx = 2.0 * dn * nx - wox
        ry = 2.0 * dn * ny - woy
        rz = 2.0 * dn * nz - woz
        c = rx * wix + ry * wiy + rz * wiz
        if c <= 0.0:
            return 0.0
        return (e + 2.0) * (0.5 * INV_PI) * c ** e
    return 0.0


# -- lights ---------------------------------------------------------------------------


@numba.njit(cache=True)
def env_radiance(sd, dx, dy, dz):
    if sd.env_kind == 1:
        return sd.env_const[0], sd.env_const[1], sd.env_const[2]
    if sd.env_kind == 2:
        h = sd.env_map.shape[0]
        w = sd.env_map.shape[1]
        theta = math.acos(min(1.0, max(-1.0, dz)))
        phi = math.atan2(dy, dx)
        if phi < 0.0:
            phi += 2.0 * math.pi
        row = min(int(theta / math.pi * h), h - 1)
        col = min(int(phi / (2.0 * math.pi) * w), w - 1)
        return sd.env_map[row, col, 0], sd.env_map[row, col, 1], sd.env_map[row, col, 2]
    return 0.0, 0.0, 0.0


@numba.njit(cache=True)
def _search(cdf, u):
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
def sample_light(sd, st, px, py, pz):
    """Pick a light and a direction from point p.

    Returns (wx, wy, wz, dist, Lr, Lg, Lb, pdf, delta). ``pdf`` is a solid-angle
    density including the light-selection probability (for point lights it is
    the selection probability and ``delta`` is True).
    """
    u = rand(st)
    sel = sd.light_sel
    if u < sel[0]:
        k = _search(sd.emit_cdf, rand(st))
        p = sd.emit_tris[k]
        su = math.sqrt(rand(st))
        b1 = 1.0 - su
        b2 = rand(st) * su
        qx = sd.v0[p, 0] + b1 * sd.e1[p, 0] + b2 * sd.e2[p, 0]
        qy = sd.v0[p, 1] + b1 * sd.e1[p, 1] + b2 * sd.e2[p, 1]
        qz = sd.v0[p, 2] + b1 * sd.e1[p, 2] + b2 * sd.e2[p, 2]
        dx = qx - px
        dy = qy - py
        dz = qz - pz
        d2 = dx * dx + dy * dy + dz * dz
        dist = math.sqrt(d2)
        if dist <= 0.0:
            return 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, False
        wx = dx / dist
        wy = dy / dist
        wz = dz / dist
        cl = -(wx * sd.ng[p, 0] + wy * sd.ng[p, 1] + wz * sd.ng[p, 2])
        if cl <= 0.0:
            return wx, wy, wz, dist, 0.0, 0.0, 0.0, 0.0, False
        pdf = sel[0] * sd.emit_pdf_area[p] * d2 / cl
        return wx, wy, wz, dist, sd.emit[p, 0], sd.emit[p, 1], sd.emit[p, 2], pdf, False
    if u < sel[0] + sel[1]:
        n = sd.pl_pos.shape[0]
        k = min(int(rand(st) * n), n - 1)
        dx = sd.pl_pos[k, 0] - px
        dy = sd.pl_pos[k, 1] - py
        dz = sd.pl_pos[k, 2] - pz
        d2 = dx * dx + dy * dy + dz * dz
        dist = math.sqrt(d2)
        if dist <= 0.0:
            return 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, True
        inv = 1.0 / d2
        return (dx / dist, dy / dist, dz / dist, dist, sd.pl_int[k, 0] * inv, sd.pl_int[k, 1] * inv,
                sd.pl_int[k, 2] * inv, sel[1] / n, True)
    if sel[2] > 0.0:
        wx, wy, wz = uniform_sphere(rand(st), rand(st))
        r, g, b = env_radiance(sd, wx, wy, wz)
        return wx, wy, wz, np.inf, r, g, b, sel[2] * INV_4PI, False
    return 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, False


# -- path integrator ----------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def trace_path(sd, ox, oy, oz, dx, dy, dz, b_lo, b_hi, rr_start, st, stack, out):
    """Accumulate radiance arriving at o from direction -d into ``out`` (RGB).

    Returns (first_tri, first_t, first_emissive); first_tri = -1 when the
    primary ray escapes.
    """
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    br = 1.0
    bg = 1.0
    bb = 1.0
    prev_pdf = 0.0
    prev_delta = True
    first_tri = -1
    first_t = np.inf
    first_emit = False
    for depth in range(b_hi + 1):
        t, p, u, v = closest_hit(sd, 0, ox, oy, oz, dx, dy, dz, 0.0, np.inf, stack)
        if p < 0:
            if sd.env_kind > 0 and depth >= b_lo:
                er, eg, eb = env_radiance(sd, dx, dy, dz)
                w = 1.0
                if not prev_delta:
                    pl = sd.light_sel[2] * INV_4PI
                    w = prev_pdf / (prev_pdf + pl)
                out[0] += br * er * w
                out[1] += bg * eg * w
                out[2] += bb * eb * w
            break
        gx, gy, gz = sd.ng[p, 0], sd.ng[p, 1], sd.ng[p, 2]
        cos_g = -(dx * gx + dy * gy + dz * gz)
        emissive = sd.emit[p, 0] > 0.0 or sd.emit[p, 1] > 0.0 or sd.emit[p, 2] > 0.0
        if depth == 0:
            first_tri = p
            first_t = t
            first_emit = emissive
        if emissive and cos_g > 0.0 and depth >= b_lo:
            w = 1.0
            if not prev_delta:
                pl = sd.light_sel[0] * sd.emit_pdf_area[p] * t * t / cos_g
                w = prev_pdf / (prev_pdf + pl)
            out[0] += br * sd.emit[p, 0] * w
            out[1] += bg * sd.emit[p, 1] * w
            out[2] += bb * sd.emit[p, 2] * w
        if depth == b_hi:
            break
        mat = sd.tri_mat[p]
        ar = sd.mat_albedo[mat, 0]
        ag = sd.mat_albedo[mat, 1]
        ab = sd.mat_albedo[mat, 2]
        if ar <= 0.0 and ag <= 0.0 and ab <= 0.0:
            break
        b0 = 1.0 - u - v
        i0 = sd.tri[p, 0]
        i1 = sd.tri[p, 1]
        i2 = sd.tri[p, 2]
        xx = b0 * sd.pos[i0, 0] + u * sd.pos[i1, 0] + v * sd.pos[i2, 0]
        xy = b0 * sd.pos[i0, 1] + u * sd.pos[i1, 1] + v * sd.pos[i2, 1]
        xz = b0 * sd.pos[i0, 2] + u * sd.pos[i1, 2] + v * sd.pos[i2, 2]
        nx = b0 * sd.nrm[i0, 0] + u * sd.nrm[i1, 0] + v * sd.nrm[i2, 0]
        ny = b0 * sd.nrm[i0, 1] + u * sd.nrm[i1, 1] + v * sd.nrm[i2, 1]
        nz = b0 * sd.nrm[i0, 2] + u * sd.nrm[i1, 2] + v * sd.nrm[i2, 2]
        nx, ny, nz = _normalize(nx, ny, nz)
        if cos_g < 0.0:
            gx, gy, gz = -gx, -gy, -gz
            nx, ny, nz = -nx, -ny, -nz
        wox, woy, woz = -dx, -dy, -dz
        if wox * nx + woy * ny + woz * nz <= 0.0:
            nx, ny, nz = gx, gy, gz
        kind = sd.mat_kind[mat]
        sox = xx + RAY_EPS * gx
        soy = xy + RAY_EPS * gy
        soz = xz + RAY_EPS * gz
        if kind != MIRROR and depth + 1 >= b_lo:
            # sampled from the offset origin so the shadow ray cannot reach the light's own surface
            wx, wy, wz, dist, lr, lg, lb, lpdf, delta = sample_light(sd, st, sox, soy, soz)
            cos_i = wx * nx + wy * ny + wz * nz
            if lpdf > 0.0 and cos_i > 0.0 and wx * gx + wy * gy + wz * gz > 0.0 and (lr > 0.0 or lg > 0.0 or lb > 0.0):
                if not any_hit(sd, 0, sox, soy, soz, wx, wy, wz, 0.0, dist - 2.0 * RAY_EPS, stack):
                    f = brdf_scale(sd, mat, wx, wy, wz, wox, woy, woz, nx, ny, nz)
                    w = 1.0
                    if not delta:
                        bp = cos_i * INV_PI
                        w = lpdf / (lpdf + bp)
                    s = f * cos_i * w / lpdf
                    out[0] += br * ar * lr * s
                    out[1] += bg * ag * lg * s
                    out[2] += bb * ab * lb * s
        if kind == MIRROR:
            dn = wox * nx + woy * ny + woz * nz
            dx = 2.0 * dn * nx - wox
            dy = 2.0 * dn * ny - woy
            dz = 2.0 * dn * nz - woz
            br *= ar
            bg *= ag
            bb *= ab
            prev_delta = True
        else:
            lx, ly, lz = cosine_hemisphere(rand(st), rand(st))
            dx, dy, dz = to_world(lx, ly, lz, nx, ny, nz)
            cos_i = lz
            if cos_i <= 0.0:
                break
            pdf = cos_i * INV_PI
            f = brdf_scale(sd, mat, dx, dy, dz, wox, woy, woz, nx, ny, nz)
            s = f * cos_i / pdf
            br *= ar * s
            bg *= ag * s
            bb *= ab * s
            prev_pdf = pdf
            prev_delta = False
        if dx * gx + dy * gy + dz * gz <= 0.0:
            break
        if depth + 1 >= rr_start:
            q = min(1.0, _lum(ar, ag, ab))
            if rand(st) >= q:
                break
            br /= q
            bg /= q
            bb /= q
        if br == 0.0 and bg == 0.0 and bb == 0.0:
            break
        ox, oy, oz = sox, soy, soz
    return first_tri, first_t, first_emit


# -- camera --------------------------------------------------------------------------


def camera_arrays(cam: Camera):
    p, fwd, right, up = cam.basis()
    th = math.tan(math.radians(cam.vfov) * 0.5)
    return np.stack([p, fwd, right * th * cam.width / cam.height, up * th])


@numba.njit(cache=True, inline="always")
def camera_ray(cam, width, height, i, j, jx, jy):
    sx = (2.0 * (j + jx) / width - 1.0)
    sy = (1.0 - 2.0 * (i + jy) / height)
    dx = cam[1, 0] + sx * cam[2, 0] + sy * cam[3, 0]
    dy = cam[1, 1] + sx * cam[2, 1] + sy * cam[3, 1]
    dz = cam[1, 2] + sx * cam[2, 2] + sy * cam[3, 2]
    return _normalize(dx, dy, dz)


@numba.njit(cache=True, parallel=True, error_model="numpy")
def _render_kernel(sd, cam, width, height, spp, b_lo, b_hi, rr_start, seed):
    mean = np.zeros((height, width, 3))
    sem = np.zeros((height, width, 3))
    for pix in numba.prange(width * height):
        i = pix // width
        j = pix % width
        stack = new_stack()
        base = new_state(seed, pix)
        out = np.empty(3)
        s1 = np.zeros(3)
        s2 = np.zeros(3)
        for s in range(spp):
            st = substream(base, s)
            dx, dy, dz = camera_ray(cam, width, height, i, j, rand(st), rand(st))
            trace_path(sd, cam[0, 0], cam[0, 1], cam[0, 2], dx, dy, dz, b_lo, b_hi, rr_start, st, stack, out)
            for c in range(3):
                s1[c] += out[c]
                s2[c] += out[c] * out[c]
        for c in range(3):
            m = s1[c] / spp
            mean[i, j, c] = m
            if spp > 1:
                var = max(0.0, (s2[c] / spp - m * m)) * spp / (spp - 1)
                sem[i, j, c] = math.sqrt(var / spp)
    return mean, sem


@numba.njit(cache=True, error_model="numpy")
def _trace_many(sd, o, d, spp, b_lo, b_hi, rr_start, seed, stream):
    n = o.shape[0]
    res = np.zeros((n, 3))
    stack = new_stack()
    out = np.empty(3)
    for k in range(n):
        base = new_state(seed, stream + k)
        for s in range(spp):
            st = substream(base, s)
            trace_path(sd, o[k, 0], o[k, 1], o[k, 2], d[k, 0], d[k, 1], d[k, 2], b_lo, b_hi, rr_start, st, stack, out)
            for c in range(3):
                res[k, c] += out[c]
        for c in range(3):
            res[k, c] /= spp
    return res


@dataclass
class ReferenceImage:
    image: np.ndarray
    std_error: np.ndarray


def _seed_from(rng) -> int:
    if rng is None:
        return 0
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


def trace_radiance(scene: Scene, origin, direction, config: PathConfig, rng=None) -> np.ndarray:
    """Mean of ``config.spp`` path samples of radiance arriving at ``origin`` along ``-direction``."""
    lo, hi = config.bounce_band()
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    seed = config.seed if rng is None else _seed_from(rng)
    return _trace_many(scene.data, o, d, config.spp, lo, hi, config.rr_start, np.uint64(seed), np.uint64(0))[0]


def trace_many(scene: Scene, origins, directions, config: PathConfig, stream: int = 0) -> np.ndarray:
    lo, hi = config.bounce_band()
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    return _trace_many(scene.data, o, d, config.spp, lo, hi, config.rr_start, np.uint64(config.seed), np.uint64(stream))


def render_reference(scene: Scene, camera: Camera, config: PathConfig) -> ReferenceImage:
    lo, hi = config.bounce_band()
    mean, sem = _render_kernel(scene.data, camera_arrays(camera), camera.width, camera.height, config.spp, lo, hi,
                               config.rr_start, np.uint64(config.seed))
    return ReferenceImage(mean, sem)


# -- probe rays -------------------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def probe_ray(sd, px, py, pz, dx, dy, dz, bounces, rr_start, st, stack, out):
    """Single-sample indirect radiance toward the probe; returns (hit, t).

    Misses, emitter hits and escapes report hit = False.
    """
    p, t, emit = trace_path(sd, px, py, pz, dx, dy, dz, 1, bounces, rr_start, st, stack, out)
    if p < 0 or emit:
        return False, t
    return True, t


@numba.njit(cache=True, error_model="numpy")
def _probe_rays(sd, o, d, bounces, rr_start, seed, stream):
    n = o.shape[0]
    rad = np.zeros((n, 3))
    pos = np.zeros((n, 3))
    ok = np.zeros(n, dtype=np.bool_)
    stack = new_stack()
    out = np.empty(3)
    for k in range(n):
        st = new_state(seed, stream + k)
        hit, t = probe_ray(sd, o[k, 0], o[k, 1], o[k, 2], d[k, 0], d[k, 1], d[k, 2], bounces, rr_start, st, stack, out)
        if hit:
            ok[k] = True
            for c in range(3):
                rad[k, c] = out[c]
                pos[k, c] = o[k, c] + t * d[k, c]
    return ok, rad, pos


def shade_probe_ray(scene: Scene, probe_pos, direction, bounces: int = 3, rng=None, rr_start: int = 3):
    """(radiance, first-hit position) or None when the ray misses or hits an emitter first."""
    if bounces < 1:
        raise ValueError("bounces must be >= 1")
    o = np.asarray(probe_pos, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    ok, rad, pos = _probe_rays(scene.data, o, d, bounces, rr_start, np.uint64(_seed_from(rng)), np.uint64(0))
    if not ok[0]:
        return None
    return rad[0], pos[0]


def shade_probe_rays(scene: Scene, origins, directions, bounces: int = 3, seed: int = 0, stream: int = 0,
                     rr_start: int = 3):
    """Vectorised probe-ray shading: (hit mask, radiance, first-hit position)."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    return _probe_rays(scene.data, o, d, bounces, rr_start, np.uint64(seed), np.uint64(stream))
