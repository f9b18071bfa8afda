"""Built-in test scenes.

The desk scene is a closed 2 m room (each wall its own object, so wall
transfer stays unoccluded), lit by a ceiling area light, with a desk and a few
objects on and under it.
"""

from __future__ import annotations

import numpy as np

from .geometry import (Camera, LightKind, LightSource, Material, MaterialKind, Scene, TriangleMesh, box_mesh, quad_mesh,
                       sphere_mesh)

ROOM = 2.0


def room_walls(size=ROOM, height=ROOM, subdiv=6, materials=(0, 0, 0, 1, 2, 0)):
    """Six inward-facing quads: floor, ceiling, back, front, left, right."""
    s, h = size, height
    sd = (subdiv, subdiv)
    mk = lambda o, u, v, m, name: quad_mesh(o, u, v, sd, material_id=m, name=name)
    return [
        mk((0, 0, 0), (s, 0, 0), (0, s, 0), materials[0], "floor"),
        mk((0, 0, h), (0, s, 0), (s, 0, 0), materials[1], "ceiling"),
        mk((0, s, 0), (s, 0, 0), (0, 0, h), materials[2], "back"),
        mk((0, 0, 0), (0, 0, h), (s, 0, 0), materials[5], "front"),
        mk((0, 0, 0), (0, s, 0), (0, 0, h), materials[3], "left"),
        mk((s, 0, 0), (0, 0, h), (0, s, 0), materials[4], "right"),
    ]


def desk_scene(width=128, height=128, light_radiance=(12.0, 11.0, 9.5), glossy=True) -> Scene:
    materials = [
        Material(MaterialKind.LAMBERTIAN, (0.75, 0.75, 0.72), name="white"),
        Material(MaterialKind.LAMBERTIAN, (0.70, 0.15, 0.12), name="red"),
        Material(MaterialKind.LAMBERTIAN, (0.15, 0.55, 0.20), name="green"),
        Material(MaterialKind.LAMBERTIAN, (0.55, 0.40, 0.25), name="wood"),
        Material(MaterialKind.GLOSSY if glossy else MaterialKind.LAMBERTIAN, (0.25, 0.35, 0.75), 12.0, name="blue"),
        Material(MaterialKind.LAMBERTIAN, (0.80, 0.70, 0.30), name="yellow"),
    ]
    meshes = room_walls(materials=(0, 0, 0, 1, 2, 0))
    top_z = 0.75
    meshes.append(box_mesh((1.0, 1.3, top_z - 0.03), (1.2, 0.6, 0.06), subdiv=3, material_id=3, name="desk"))
    for lx in (0.45, 1.55):
        for ly in (1.05, 1.55):
            meshes.append(box_mesh((lx, ly, (top_z - 0.06) / 2), (0.05, 0.05, top_z - 0.06), material_id=3,
                                   name="leg"))
    meshes.append(sphere_mesh((0.75, 1.3, top_z + 0.18), 0.18, rings=12, segments=24, material_id=4, name="ball"))
    meshes.append(box_mesh((1.3, 1.35, top_z + 0.15), (0.25, 0.25, 0.3), rotate_z=30.0, subdiv=2, material_id=5,
                           name="block"))
    meshes.append(box_mesh((0.45, 0.55, 0.2), (0.35, 0.35, 0.4), rotate_z=-20.0, subdiv=2, material_id=0,
                           name="crate"))
    lamp = quad_mesh((0.7, 0.8, ROOM - 1e-3), (0.6, 0, 0), (0, 0.6, 0), (2, 2), name="ceiling_light")
    lamp = TriangleMesh(lamp.positions, -lamp.normals, lamp.triangles[:, ::-1], name="ceiling_light")
    lights = [LightSource(LightKind.AREA, light_radiance, mesh=lamp)]
    cam = Camera((1.0, 0.08, 1.15), (1.0, 1.4, 0.75), (0, 0, 1), 62.0, width, height)
    return Scene(meshes, materials, lights, ((0, 0, 0), (ROOM, ROOM, ROOM)), cam)


def furnace_scene(albedo=1.0, radius=1.0, env=(1.0, 1.0, 1.0)) -> Scene:
    """Sphere seen from inside, under a constant environment (which it fully blocks)."""
    s = sphere_mesh((0, 0, 0), radius, rings=24, segments=48, inward=True, material_id=0)
    return Scene([s], [Material(MaterialKind.LAMBERTIAN, (albedo,) * 3)], [LightSource(LightKind.ENVIRONMENT, env)],
                 camera=Camera((0, 0, 0), (0, 1, 0), (0, 0, 1), 60.0, 32, 32))


def plane_under_sky(albedo=1.0, env=(1.0, 1.0, 1.0), size=4.0) -> Scene:
    p = quad_mesh((-size / 2, -size / 2, 0), (size, 0, 0), (0, size, 0), (4, 4), material_id=0)
    return Scene([p], [Material(MaterialKind.LAMBERTIAN, (albedo,) * 3)], [LightSource(LightKind.ENVIRONMENT, env)],
                 camera=Camera((0, -0.5, 0.5), (0, 0, 0), (0, 0, 1), 40.0, 32, 32))


def lit_sphere_interior(radius=1.0, albedo=0.5, intensity=(1.0, 1.0, 1.0)) -> Scene:
    """Diffuse sphere with a point light at its centre: wall radiance is the same everywhere."""
    s = sphere_mesh((0, 0, 0), radius, rings=32, segments=64, inward=True, material_id=0)
    return Scene([s], [Material(MaterialKind.LAMBERTIAN, (albedo,) * 3)],
                 [LightSource(LightKind.POINT, intensity, position=(0.0, 0.0, 0.0))])


def cornell_box(subdiv=2) -> Scene:
    """Classic five-wall box with two spheres and a ceiling light, camera on the open side."""
    s = 1.0
    mats = [Material(MaterialKind.LAMBERTIAN, (0.73, 0.73, 0.73)), Material(MaterialKind.LAMBERTIAN, (0.65, 0.05, 0.05)),
            Material(MaterialKind.LAMBERTIAN, (0.12, 0.45, 0.15))]
    walls = room_walls(s, s, subdiv, materials=(0, 0, 0, 1, 2, 0))
    walls = [w for w in walls if w.name != "front"]
    walls.append(sphere_mesh((0.3, 0.6, 0.18), 0.18, 10, 20, material_id=0, name="s1"))
    walls.append(sphere_mesh((0.7, 0.35, 0.15), 0.15, 10, 20, material_id=0, name="s2"))
    lamp = quad_mesh((0.4, 0.4, s - 1e-3), (0, 0.2, 0), (0.2, 0, 0), name="lamp")
    return Scene(walls, mats, [LightSource(LightKind.AREA, (15.0, 15.0, 15.0), mesh=lamp)],
                 camera=Camera((0.5, -1.1, 0.5), (0.5, 0.5, 0.5), (0, 0, 1), 40.0, 64, 64))


BUILTIN = {"desk": desk_scene, "furnace": furnace_scene, "plane": plane_under_sky, "cornell": cornell_box,
           "lit-sphere": lit_sphere_interior}
