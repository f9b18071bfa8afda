"""Scene files (JSON) and Wavefront OBJ meshes.

Scene document, ``format_version`` 1::

    {
      "format_version": 1,
      "materials": [{"name": "white", "kind": "lambertian", "albedo": [0.8, 0.8, 0.8]},
                    {"name": "blue", "kind": "glossy", "albedo": [...], "glossy_exponent": 12}],
      "meshes": [
        {"name": "tri", "material": "white", "positions": [[x, y, z], ...], "triangles": [[0, 1, 2], ...],
         "normals": [[...], ...]},                      # normals optional
        {"name": "bunny", "material": 0, "file": "bunny.obj"},   # path relative to the scene file
        {"name": "floor", "material": 0, "shape": "quad", "origin": [...], "edge_u": [...], "edge_v": [...],
         "subdiv": [4, 4]},
        {"shape": "sphere", "center": [...], "radius": 0.5, "rings": 16, "segments": 32, "inward": false},
        {"shape": "box", "center": [...], "size": [...], "rotate_z": 0, "subdiv": 1, "inward": false}
      ],
      "lights": [
        {"kind": "point", "position": [...], "intensity": [r, g, b]},
        {"kind": "area", "radiance": [r, g, b], "mesh": {<mesh entry without material>}},
        {"kind": "environment", "radiance": [r, g, b], "map": "sky.pfm"}        # map optional
      ],
      "probe_bounds": [[xmin, ymin, zmin], [xmax, ymax, zmax]],                 # optional
      "camera": {"position": [...], "look_at": [...], "up": [0, 0, 1], "vfov": 45, "width": 128, "height": 128}
    }

Materials may be referenced by index or by name.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import (Camera, LightKind, LightSource, Material, MaterialKind, Scene, SceneError, TriangleMesh, box_mesh,
                       quad_mesh, sphere_mesh)
from .imageio import read_pfm

FORMAT_VERSION = 1


class SceneFormatError(SceneError):
    pass


def _vec(entry, key, where, n=3, default=None):
    if key not in entry:
        if default is not None:
            return default
        raise SceneFormatError(f"{where}: missing field '{key}'")
    try:
        a = np.asarray(entry[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{where}.{key}: expected numbers") from None
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise SceneFormatError(f"{where}.{key}: expected {n} finite numbers, got {entry[key]!r}")
    return a


def load_obj(path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Positions, per-vertex normals (None when absent) and fan-triangulated faces."""
    path = Path(path)
    vs, vns = [], []
    corners = {}
    pos, nrm, tris = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                vs.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                vns.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                face = []
                for tok in parts[1:]:
                    f = tok.split("/")
                    vi = int(f[0])
                    vi = vi - 1 if vi > 0 else len(vs) + vi
                    ni = -1
                    if len(f) > 2 and f[2]:
                        ni = int(f[2])
                        ni = ni - 1 if ni > 0 else len(vns) + ni
                    if not 0 <= vi < len(vs) or (ni != -1 and not 0 <= ni < len(vns)):
                        raise SceneFormatError(f"{path}:{lineno}: face index out of range")
                    key = (vi, ni)
                    if key not in corners:
                        corners[key] = len(pos)
                        pos.append(vs[vi])
                        nrm.append(vns[ni] if ni >= 0 else None)
                    face.append(corners[key])
                if len(face) < 3:
                    raise SceneFormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(face) - 1):
                    tris.append([face[0], face[k], face[k + 1]])
        except ValueError as e:
            raise SceneFormatError(f"{path}:{lineno}: {e}") from None
    if not tris:
        raise SceneFormatError(f"{path}: no faces")
    normals = None if any(n is None for n in nrm) else np.asarray(nrm, dtype=np.float64)
    return np.asarray(pos, dtype=np.float64), normals, np.asarray(tris, dtype=np.int64)


def _material_index(ref, names, n, where):
    if isinstance(ref, str):
        if ref not in names:
            raise SceneFormatError(f"{where}.material: unknown material '{ref}'")
        return names[ref]
    if not isinstance(ref, int) or isinstance(ref, bool):
        raise SceneFormatError(f"{where}.material: expected index or name, got {ref!r}")
    if not 0 <= ref < n:
        raise SceneFormatError(f"{where}.material: material_id {ref} undefined ({n} materials)")
    return ref


def _mesh(entry, where, base: Path, mat_id=0) -> TriangleMesh:
    if not isinstance(entry, dict):
        raise SceneFormatError(f"{where}: expected an object")
    name = str(entry.get("name", where))
    kw = dict(material_id=mat_id, name=name)
    try:
        if "file" in entry:
            f = base / entry["file"]
            if not f.exists():
                raise SceneFormatError(f"{where}.file: mesh file {f} not found")
            p, n, t = load_obj(f)
            return TriangleMesh(p, n, t, **kw)
        shape = entry.get("shape")
        if shape == "quad":
            return quad_mesh(_vec(entry, "origin", where), _vec(entry, "edge_u", where), _vec(entry, "edge_v", where),
                             tuple(entry.get("subdiv", (1, 1))), **kw)
        if shape == "sphere":
            return sphere_mesh(_vec(entry, "center", where), float(entry.get("radius", 1.0)), int(entry.get("rings", 16)),
                               int(entry.get("segments", 32)), bool(entry.get("inward", False)), **kw)
        if shape == "box":
            return box_mesh(_vec(entry, "center", where), _vec(entry, "size", where), float(entry.get("rotate_z", 0.0)),
                            int(entry.get("subdiv", 1)), bool(entry.get("inward", False)), **kw)
        if shape is not None:
            raise SceneFormatError(f"{where}.shape: unknown shape '{shape}'")
        if "positions" not in entry or "triangles" not in entry:
            raise SceneFormatError(f"{where}: needs 'positions' and 'triangles', a 'file' or a 'shape'")
        p = np.asarray(entry["positions"], dtype=np.float64)
        t = np.asarray(entry["triangles"], dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise SceneFormatError(f"{where}.positions: expected a list of 3D points")
        if t.ndim != 2 or t.shape[1] != 3:
            raise SceneFormatError(f"{where}.triangles: expected a list of index triples")
        n = entry.get("normals")
        return TriangleMesh(p, None if n is None else np.asarray(n, dtype=np.float64), t, **kw)
    except SceneFormatError:
        raise
    except (SceneError, ValueError, TypeError) as e:
        raise SceneFormatError(f"{where}: {e}") from None


def scene_from_dict(doc: dict, base=".") -> Scene:
    base = Path(base)
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be an object")
    ver = doc.get("format_version")
    if ver != FORMAT_VERSION:
        raise SceneFormatError(f"format_version: expected {FORMAT_VERSION}, got {ver!r}")
    materials, names = [], {}
    for i, m in enumerate(doc.get("materials", [])):
        where = f"materials[{i}]"
        try:
            kind = MaterialKind[str(m.get("kind", "lambertian")).upper()]
        except KeyError:
            raise SceneFormatError(f"{where}.kind: unknown material kind {m.get('kind')!r}") from None
        try:
            materials.append(Material(kind, tuple(_vec(m, "albedo", where)), float(m.get("glossy_exponent", 1.0)),
                                      str(m.get("name", ""))))
        except SceneError as e:
            raise SceneFormatError(f"{where}: {e}") from None
        if m.get("name"):
            names[m["name"]] = i
    if not materials:
        raise SceneFormatError("materials: at least one material is required")
    meshes = []
    for i, e in enumerate(doc.get("meshes", [])):
        where = f"meshes[{i}]"
        mid = _material_index(e.get("material", 0), names, len(materials), where)
        meshes.append(_mesh(e, where, base, mid))
    lights = []
    for i, lt in enumerate(doc.get("lights", [])):
        where = f"lights[{i}]"
        kind = lt.get("kind")
        try:
            if kind == "point":
                lights.append(LightSource(LightKind.POINT, tuple(_vec(lt, "intensity", where)),
                                          position=tuple(_vec(lt, "position", where))))
            elif kind == "area":
                if "mesh" not in lt:
                    raise SceneFormatError(f"{where}: area light needs a 'mesh'")
                lights.append(LightSource(LightKind.AREA, tuple(_vec(lt, "radiance", where)),
                                          mesh=_mesh(lt["mesh"], f"{where}.mesh", base)))
            elif kind == "environment":
                env = None
                if "map" in lt:
                    f = base / lt["map"]
                    if not f.exists():
                        raise SceneFormatError(f"{where}.map: {f} not found")
                    env = read_pfm(f).astype(np.float64)
                lights.append(LightSource(LightKind.ENVIRONMENT, tuple(_vec(lt, "radiance", where, default=np.ones(3))),
                                          env_map=env))
            else:
                raise SceneFormatError(f"{where}.kind: unknown light kind {kind!r}")
        except SceneFormatError:
            raise
        except SceneError as e:
            raise SceneFormatError(f"{where}: {e}") from None
    bounds = None
    if "probe_bounds" in doc:
        pb = doc["probe_bounds"]
        if not (isinstance(pb, list) and len(pb) == 2):
            raise SceneFormatError("probe_bounds: expected [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
        bounds = (tuple(_vec({"lo": pb[0]}, "lo", "probe_bounds")), tuple(_vec({"hi": pb[1]}, "hi", "probe_bounds")))
    cam = None
    if "camera" in doc:
        c = doc["camera"]
        cam = Camera(tuple(_vec(c, "position", "camera")), tuple(_vec(c, "look_at", "camera")),
                     tuple(_vec(c, "up", "camera", default=np.array([0.0, 0.0, 1.0]))), float(c.get("vfov", 45.0)),
                     int(c.get("width", 128)), int(c.get("height", 128)))
    try:
        return Scene(meshes, materials, lights, bounds, cam)
    except SceneFormatError:
        raise
    except SceneError as e:
        raise SceneFormatError(str(e)) from None


def load_scene(path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"{path}: scene file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return scene_from_dict(doc, path.parent)


def _mesh_dict(m: TriangleMesh, material=None) -> dict:
    d = {"name": m.name, "positions": m.positions.tolist(), "triangles": m.triangles.tolist(),
         "normals": m.normals.tolist()}
    if material is not None:
        d["material"] = material
    return d


def scene_to_dict(scene: Scene) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "materials": [{"name": m.name, "kind": m.kind.name.lower(), "albedo": list(m.albedo),
                       "glossy_exponent": m.glossy_exponent} for m in scene.materials],
        "meshes": [_mesh_dict(m, m.material_id) for m in scene.meshes],
        "lights": [],
        "probe_bounds": [list(scene.probe_bounds[0]), list(scene.probe_bounds[1])],
    }
    for lt in scene.lights:
        if lt.kind == LightKind.POINT:
            doc["lights"].append({"kind": "point", "position": list(lt.position), "intensity": list(lt.radiance)})
        elif lt.kind == LightKind.AREA:
            doc["lights"].append({"kind": "area", "radiance": list(lt.radiance), "mesh": _mesh_dict(lt.mesh)})
        else:
            if lt.env_map is not None:
                raise SceneFormatError("environment maps are not embedded; save the map as PFM and reference it")
            doc["lights"].append({"kind": "environment", "radiance": list(lt.radiance)})
    if scene.camera is not None:
        c = scene.camera
        doc["camera"] = {"position": list(c.position), "look_at": list(c.look_at), "up": list(c.up), "vfov": c.vfov,
                         "width": c.width, "height": c.height}
    return doc


def save_scene(scene: Scene, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scene_to_dict(scene), default=float))
    return path


def resolve_scene(spec: str) -> Scene:
    """A scene file path, or ``builtin:<name>`` for the bundled scenes."""
    from .scenes import BUILTIN

    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN:
            raise SceneFormatError(f"unknown built-in scene '{name}' (have {', '.join(sorted(BUILTIN))})")
        return BUILTIN[name]()
    return load_scene(spec)
