"""G-buffer generation and transfer x light shading.

A GI pixel is ``max(0, sum_k l_k(x) t_k(x, wo))`` per channel, where ``t``
comes from the neural model (or ground-truth baking) and ``l`` is blended from
the probe grid. Mirror pixels take an explicit reflection ray instead.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from .baker import BakeConfig, transfer_points
from .geometry import Camera, MaterialKind, Scene, closest_hit, new_stack
from .imageio import write_pfm, write_png
from .neural import NeuralTransferModel
from .probes import ProbeGrid, interpolate_light_many
from .sh import SHError, hanning_window, n_coeffs
from .tracer import Mode, PathConfig, _normalize, camera_arrays, camera_ray, env_radiance, render_reference

log = logging.getLogger(__name__)


class RenderMode(str, enum.Enum):
    GI_ONLY = "gi_only"
    GI_PLUS_DI = "gi_plus_di"


@dataclass
class RenderConfig:
    mode: RenderMode = RenderMode.GI_ONLY
    width: int = 128
    height: int = 128
    specular_bounces: int = 1
    exposure: float = 1.0
    seed: int = 0
    di_spp: int = 64
    hanning: bool = False

    def __post_init__(self):
        self.mode = RenderMode(self.mode)
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if self.specular_bounces < 0:
            raise ValueError("specular_bounces must be >= 0")


@dataclass
class GBuffer:
    hit: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    geometric_normal: np.ndarray
    view: np.ndarray
    albedo: np.ndarray
    triangle: np.ndarray
    vertex_ids: np.ndarray
    bary: np.ndarray
    material: np.ndarray
    kind: np.ndarray
    object_id: np.ndarray

    @property
    def shape(self):
        return self.hit.shape

    def select(self, mask) -> "GBuffer":
        """Flattened sub-buffer of the pixels in ``mask`` (1-D arrays)."""
        return GBuffer(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


@numba.njit(cache=True)
def _surface_at(sd, p, u, v, dx, dy, dz, out_pos, out_n, out_ng):
    """Hit attributes with normals turned toward the viewer (-d)."""
    b0 = 1.0 - u - v
    i0, i1, i2 = sd.tri[p, 0], sd.tri[p, 1], sd.tri[p, 2]
    for a in range(3):
        out_pos[a] = b0 * sd.pos[i0, a] + u * sd.pos[i1, a] + v * sd.pos[i2, a]
    nx = b0 * sd.nrm[i0, 0] + u * sd.nrm[i1, 0] + v * sd.nrm[i2, 0]
    ny = b0 * sd.nrm[i0, 1] + u * sd.nrm[i1, 1] + v * sd.nrm[i2, 1]
    nz = b0 * sd.nrm[i0, 2] + u * sd.nrm[i1, 2] + v * sd.nrm[i2, 2]
    nx, ny, nz = _normalize(nx, ny, nz)
    gx, gy, gz = sd.ng[p, 0], sd.ng[p, 1], sd.ng[p, 2]
    if gx * dx + gy * dy + gz * dz > 0.0:
        gx, gy, gz = -gx, -gy, -gz
        nx, ny, nz = -nx, -ny, -nz
    if nx * dx + ny * dy + nz * dz >= 0.0:
        nx, ny, nz = gx, gy, gz
    out_n[0], out_n[1], out_n[2] = nx, ny, nz
    out_ng[0], out_ng[1], out_ng[2] = gx, gy, gz


@numba.njit(cache=True)
def _gbuffer_kernel(sd, cam, width, height, hit, tri, bary, pos, nrm, ngo, view):
    stack = new_stack()
    for i in range(height):
        for j in range(width):
            dx, dy, dz = camera_ray(cam, width, height, i, j, 0.5, 0.5)
            t, p, u, v = closest_hit(sd, 0, cam[0, 0], cam[0, 1], cam[0, 2], dx, dy, dz, 0.0, np.inf, stack)
            if p < 0:
                continue
            hit[i, j] = True
            tri[i, j] = p
            bary[i, j, 0] = 1.0 - u - v
            bary[i, j, 1] = u
            bary[i, j, 2] = v
            _surface_at(sd, p, u, v, dx, dy, dz, pos[i, j], nrm[i, j], ngo[i, j])
            view[i, j, 0] = -dx
            view[i, j, 1] = -dy
            view[i, j, 2] = -dz


def _gbuffer_from(scene: Scene, hit, tri, bary, pos, nrm, ng, view) -> GBuffer:
    sd = scene.data
    t = np.where(hit, tri, 0)
    mat = np.where(hit, sd.tri_mat[t] if len(sd.tri) else 0, -1)
    alb = np.where(hit[..., None], sd.mat_albedo[np.maximum(mat, 0)], 0.0)
    kind = np.where(hit, sd.mat_kind[np.maximum(mat, 0)], -1)
    obj = np.where(hit, sd.tri_obj[t] if len(sd.tri) else 0, -1)
    vid = np.where(hit[..., None], sd.tri[t] if len(sd.tri) else 0, 0)
    return GBuffer(hit, pos, nrm, ng, view, alb, np.where(hit, tri, -1), vid, bary, mat, kind, obj)


def generate_gbuffer(scene: Scene, camera: Camera) -> GBuffer:
    h, w = camera.height, camera.width
    hit = np.zeros((h, w), dtype=np.bool_)
    tri = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    pos = np.zeros((h, w, 3))
    nrm = np.zeros((h, w, 3))
    ng = np.zeros((h, w, 3))
    view = np.zeros((h, w, 3))
    if scene.n_triangles:
        _gbuffer_kernel(scene.data, camera_arrays(camera), w, h, hit, tri, bary, pos, nrm, ng, view)
    return _gbuffer_from(scene, hit, tri, bary, pos, nrm, ng, view)


# -- transfer sources -------------------------------------------------------------------


class GroundTruthTransfer:
    """Bakes transfer directly at the shading points (bypasses the network)."""

    def __init__(self, scene: Scene, config: BakeConfig | None = None, seed: int = 0):
        self.scene = scene
        self.config = config or BakeConfig()
        self.seed = seed
        self.L = self.config.L

    def __call__(self, gb: GBuffer) -> np.ndarray:
        return transfer_points(self.scene, gb.material, gb.object_id, gb.position, gb.view, gb.normal,
                               gb.geometric_normal, self.config, seed=self.seed)


def transfer_for(source, gb: GBuffer) -> np.ndarray:
    """Transfer coefficients (m, 3, K) for a flattened G-buffer."""
    if isinstance(source, NeuralTransferModel):
        return source.predict(gb.vertex_ids, gb.bary, gb.view, gb.normal, gb.albedo).astype(np.float64)
    if callable(source):
        return np.asarray(source(gb), dtype=np.float64)
    raise TypeError(f"unsupported transfer source {type(source).__name__}")


def _degree(source) -> int | None:
    return getattr(source, "L", None)


@dataclass
class ShadeStats:
    shaded: int = 0
    clamped: int = 0


def shade_points(gb: GBuffer, source, grid: ProbeGrid, scene: Scene | None, hanning: bool = False,
                 stats: ShadeStats | None = None) -> np.ndarray:
    """GI radiance (m, 3) for flattened, non-mirror G-buffer points."""
    m = len(gb.hit)
    if m == 0:
        return np.zeros((0, 3))
    t = transfer_for(source, gb)
    if t.shape[-1] != grid.K:
        raise SHError(f"transfer has {t.shape[-1]} coefficients, probes have {grid.K}")
    light = interpolate_light_many(grid, gb.position, gb.normal, scene)
    if hanning:
        light = light * hanning_window(grid.config.L)
    raw = np.einsum("mck,mck->mc", light, t)
    if stats is not None:
        stats.shaded += m
        stats.clamped += int(np.count_nonzero(np.any(raw < 0, axis=1)))
    return np.maximum(raw, 0.0)


def shade_gi(gbuffer: GBuffer, model, grid: ProbeGrid, scene: Scene | None = None, hanning: bool = False,
             stats: ShadeStats | None = None) -> np.ndarray:
    """GI image; mirror pixels are left black for :func:`shade_specular`."""
    L = _degree(model)
    if L is not None and n_coeffs(L) != grid.K:
        raise SHError(f"model degree {L} does not match probe degree {grid.config.L}")
    img = np.zeros(gbuffer.shape + (3,))
    mask = gbuffer.hit & (gbuffer.kind != int(MaterialKind.MIRROR))
    stats = stats if stats is not None else ShadeStats()
    img[mask] = shade_points(gbuffer.select(mask), model, grid, scene, hanning, stats)
    if stats.clamped:
        log.info("clamped %d of %d GI pixels below zero", stats.clamped, stats.shaded)
    return img


@numba.njit(cache=True)
def _reflect_kernel(sd, pos, nrm, ng, view, hit, tri, bary, opos, onrm, ong, oview, env):
    """Follow one mirror reflection per input point; ``env`` gets the environment along it."""
    stack = new_stack()
    for q in range(pos.shape[0]):
        dn = view[q, 0] * nrm[q, 0] + view[q, 1] * nrm[q, 1] + view[q, 2] * nrm[q, 2]
        dx = 2.0 * dn * nrm[q, 0] - view[q, 0]
        dy = 2.0 * dn * nrm[q, 1] - view[q, 1]
        dz = 2.0 * dn * nrm[q, 2] - view[q, 2]
        ox = pos[q, 0] + 1e-4 * ng[q, 0]
        oy = pos[q, 1] + 1e-4 * ng[q, 1]
        oz = pos[q, 2] + 1e-4 * ng[q, 2]
        r, g, b = env_radiance(sd, dx, dy, dz)
        env[q, 0], env[q, 1], env[q, 2] = r, g, b
        t, p, u, v = closest_hit(sd, 0, ox, oy, oz, dx, dy, dz, 0.0, np.inf, stack)
        if p < 0:
            continue
        hit[q] = True
        tri[q] = p
        bary[q, 0] = 1.0 - u - v
        bary[q, 1] = u
        bary[q, 2] = v
        _surface_at(sd, p, u, v, dx, dy, dz, opos[q], onrm[q], ong[q])
        oview[q, 0], oview[q, 1], oview[q, 2] = -dx, -dy, -dz


def _reflect(scene: Scene, gb: GBuffer):
    m = len(gb.hit)
    hit = np.zeros(m, dtype=np.bool_)
    tri = np.full(m, -1, dtype=np.int64)
    arrs = [np.zeros((m, 3)) for _ in range(5)]
    env = np.zeros((m, 3))
    bary, pos, nrm, ng, view = arrs
    _reflect_kernel(scene.data, gb.position, gb.normal, gb.geometric_normal, gb.view, hit, tri, bary, pos, nrm, ng,
                    view, env)
    return _gbuffer_from(scene, hit, tri, bary, pos, nrm, ng, view), env


def shade_specular(gbuffer: GBuffer, scene: Scene, model, grid: ProbeGrid, bounces: int = 1,
                   hanning: bool = False) -> np.ndarray:
    """Mirror pixels: reflect, then shade the reflected hit like a GI pixel.

    Chained mirrors recurse up to ``bounces`` reflections; after that, or
    on a miss, the environment radiance along the last reflected ray is used.
    """
    if bounces < 1:
        raise ValueError("bounces must be >= 1")
    img = np.zeros(gbuffer.shape + (3,))
    mask = gbuffer.hit & (gbuffer.kind == int(MaterialKind.MIRROR))
    if not mask.any():
        return img
    cur = gbuffer.select(mask)
    weight = cur.albedo.copy()
    out = np.zeros((len(cur.hit), 3))
    rows = np.arange(len(cur.hit))
    for depth in range(bounces):
        nxt, env = _reflect(scene, cur)
        miss = ~nxt.hit
        out[rows[miss]] += weight[miss] * env[miss]
        diffuse = nxt.hit & (nxt.kind != int(MaterialKind.MIRROR))
        if diffuse.any():
            out[rows[diffuse]] += weight[diffuse] * shade_points(nxt.select(diffuse), model, grid, scene, hanning)
        chain = nxt.hit & (nxt.kind == int(MaterialKind.MIRROR))
        if not chain.any():
            break
        if depth == bounces - 1:
            # recursion cap: the next reflection is replaced by the environment along it
            _, env2 = _reflect(scene, nxt.select(chain))
            out[rows[chain]] += weight[chain] * nxt.albedo[chain] * env2
            break
        weight = weight[chain] * nxt.albedo[chain]
        rows = rows[chain]
        cur = nxt.select(chain)
    img[mask] = out
    return img


# -- full frame ---------------------------------------------------------------------------


@dataclass
class RenderResult:
    gi: np.ndarray
    di: np.ndarray | None
    image: np.ndarray
    gbuffer: GBuffer
    stats: ShadeStats


def render(scene: Scene, camera: Camera, model, grid: ProbeGrid, config: RenderConfig) -> RenderResult:
    cam = camera.with_resolution(config.width, config.height)
    gb = generate_gbuffer(scene, cam)
    stats = ShadeStats()
    gi = shade_gi(gb, model, grid, scene, config.hanning, stats)
    if config.specular_bounces > 0:
        gi = gi + shade_specular(gb, scene, model, grid, config.specular_bounces, config.hanning)
    di = None
    if config.mode == RenderMode.GI_PLUS_DI:
        di = render_reference(scene, cam, PathConfig(spp=config.di_spp, mode=Mode.DIRECT_ONLY, seed=config.seed)).image
    img = gi if di is None else gi + di
    return RenderResult(gi, di, img, gb, stats)


def composite(gi: np.ndarray, di: np.ndarray | None, config: RenderConfig) -> np.ndarray:
    if di is None or config.mode == RenderMode.GI_ONLY:
        return np.asarray(gi)
    if di.shape != gi.shape:
        raise ValueError(f"GI {gi.shape} and DI {di.shape} resolutions differ")
    return gi + di


def composite_and_write(gi: np.ndarray, di: np.ndarray | None, config: RenderConfig, out_dir, stem: str = "render"):
    """Write ``<stem>.pfm`` (linear) and ``<stem>.png`` (tone mapped); returns both paths."""
    img = composite(gi, di, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_pfm(out / f"{stem}.pfm", img), write_png(out / f"{stem}.png", img, config.exposure)


def config_dict(config: RenderConfig) -> dict:
    d = asdict(config)
    d["mode"] = config.mode.value
    return d
