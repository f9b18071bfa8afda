import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralprt.geometry import LightKind, LightSource, Material, Scene, box_mesh, quad_mesh
from neuralprt.probes import (ProbeConfig, ProbeGrid, ShadedPoints, _fill_empty, band_relative_error,
                              independent_probe_coeffs, interpolate_light, interpolate_light_many, probe_weights, rasterize_shared,
                              read_probe_dump, run_frames, scatter_probe_rays, step_frame, update_probe_sh,
                              write_probe_dump)
from neuralprt.scenes import desk_scene, lit_sphere_interior
from neuralprt.sh import direction_to_texel, project_means

from conftest import unit_vectors

BOUNCE_1_3 = 0.5 / math.pi * (1 + 0.5 + 0.25)  # lit sphere: rho = 0.5, unit intensity, radius 1


def unit_grid(n=3, **kw):
    return ProbeGrid((0, 0, 0), (n - 1, n - 1, n - 1), ProbeConfig(n=n, **kw))


def random_points(rng, grid, m):
    src = rng.integers(0, grid.n_probes, m)
    pos = grid.positions[src] + rng.normal(scale=0.7, size=(m, 3))
    return ShadedPoints(pos, rng.uniform(size=(m, 3)), src)


# -- lattice ------------------------------------------------------------------------------


def test_lattice_includes_boundary_and_inset():
    s = Scene([box_mesh((1, 1, 1), (2, 2, 2), inward=True)], [Material()])
    g = ProbeGrid.from_scene(s, ProbeConfig(n=4), check_validity=False)
    np.testing.assert_allclose(g.positions.min(axis=0), 0.1)
    np.testing.assert_allclose(g.positions.max(axis=0), 1.9)
    assert g.n_probes == 64
    assert np.allclose(g.positions[g.linear_index(1, 2, 3)], [0.1 + 1.8 / 3, 0.1 + 3.6 / 3, 1.9])
    assert g.lattice_index(g.linear_index(1, 2, 3)) == (1, 2, 3)


def test_neighbourhood_sizes():
    g = unit_grid(4)
    assert len(g.neighbors(g.linear_index(0, 0, 0))) == 8
    assert len(g.neighbors(g.linear_index(0, 1, 1))) == 18
    assert len(g.neighbors(g.linear_index(1, 2, 1))) == 27


def test_probes_inside_geometry_are_invalid():
    room = box_mesh((1, 1, 1), (2, 2, 2), inward=True)
    block = box_mesh((0.5, 0.5, 0.5), (0.7, 0.7, 0.7))
    g = ProbeGrid((0.5, 0.5, 0.5), (1.5, 1.5, 1.5), ProbeConfig(n=2))
    g.update_validity(Scene([room, block], [Material()]))
    assert not g.valid[0]
    assert g.valid[1:].all()


def test_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(n=0)
    with pytest.raises(ValueError):
        ProbeConfig(inset=0.6)
    with pytest.raises(ValueError):
        ProbeGrid((1, 0, 0), (0, 1, 1))


# -- rasterization ------------------------------------------------------------------------


def test_parallel_and_serial_rasterization_identical():
    rng = np.random.default_rng(0)
    a, b = unit_grid(4, width=20, height=10), unit_grid(4, width=20, height=10)
    a.valid[5] = b.valid[5] = False
    pts = random_points(rng, a, 5000)
    rasterize_shared(a, pts, parallel=True)
    rasterize_shared(b, pts, parallel=False)
    assert np.array_equal(a.counts, b.counts)
    assert a.sums.tobytes() == b.sums.tobytes()


def test_rasterization_conserves_samples():
    rng = np.random.default_rng(1)
    g = unit_grid(3, width=16, height=8)
    g.valid[13] = False
    pts = random_points(rng, g, 400)
    rasterize_shared(g, pts)
    receivers = np.array([sum(g.valid[t] for t in g.neighbors(s)) for s in pts.source])
    assert g.counts.sum() == receivers.sum()
    np.testing.assert_allclose(g.sums.sum(axis=(0, 1, 2)), (pts.radiance * receivers[:, None]).sum(axis=0))
    assert g.counts[13].sum() == 0


def test_rasterization_is_local():
    g = unit_grid(4, width=16, height=8)
    rasterize_shared(g, ShadedPoints(np.array([[0.2, 0.1, 0.3]]), np.ones((1, 3)), np.array([0])))
    touched = set(np.nonzero(g.counts.sum(axis=(1, 2)))[0])
    assert touched == set(g.neighbors(0))


@given(st.integers(0, 26), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_texel_chosen_from_receiving_probe(src, dx, dy, dz):
    g = unit_grid(3, width=24, height=12)
    p = g.positions[src] + [dx, dy, dz]
    rasterize_shared(g, ShadedPoints(p[None], np.ones((1, 3)), np.array([src])), parallel=False)
    for t in g.neighbors(src):
        d = p - g.positions[t]
        if np.linalg.norm(d) == 0:
            continue
        row, col = direction_to_texel(d / np.linalg.norm(d), 24, 12)
        assert g.counts[t, row, col] == 1


def test_targets_restrict_receivers():
    rng = np.random.default_rng(2)
    g = unit_grid(3, width=8, height=4)
    rasterize_shared(g, random_points(rng, g, 200), targets=[4, 13])
    live = np.nonzero(g.counts.sum(axis=(1, 2)))[0]
    assert set(live) <= {4, 13}


def test_shared_points_hidden_from_a_neighbour_are_skipped():
    wall = quad_mesh((0.5, -1, -1), (0, 3, 0), (0, 0, 3))
    s = Scene([wall], [Material()])
    pts = ShadedPoints(np.array([[0.25, 0.5, 0.5]]), np.ones((1, 3)), np.array([0]))
    g = unit_grid(2, width=8, height=4)
    rasterize_shared(g, pts, scene=s)
    got = g.counts.sum(axis=(1, 2))
    # probes at x = 1 are behind the wall; the source probe always keeps its own point
    assert np.array_equal(got, (g.positions[:, 0] == 0).astype(int))
    for parallel in (True, False):
        blind = unit_grid(2, width=8, height=4, share_visibility=False)
        rasterize_shared(blind, pts, scene=s, parallel=parallel)
        assert np.all(blind.counts.sum(axis=(1, 2)) == 1)
    serial = unit_grid(2, width=8, height=4)
    rasterize_shared(serial, pts, scene=s, parallel=False)
    assert np.array_equal(serial.counts, g.counts)


def test_emitter_first_hits_are_zero_points():
    floor = quad_mesh((-5, -5, 0), (10, 0, 0), (0, 10, 0), material_id=0)
    lamp = quad_mesh((-5, 5, 1), (10, 0, 0), (0, -10, 0))
    s = Scene([floor], [Material()], [LightSource(LightKind.AREA, (2.0, 2.0, 2.0), mesh=lamp)])
    g = ProbeGrid((0, 0, 0.5), (0, 0, 0.5), ProbeConfig(n=1, rays=400))
    pts = scatter_probe_rays(s, g, 5)
    up = pts.position[:, 2] > 0.99
    assert up.sum() > 100 and (~up).sum() > 100
    assert np.all(pts.radiance[up] == 0)
    assert np.all(pts.radiance[~up] > 0)


def test_empty_texels_take_the_nearest_sample():
    means = np.zeros((2, 8, 3))
    means[:, 0] = 1.0
    means[:, 3] = 2.0
    empty = np.ones((2, 8), dtype=bool)
    empty[:, [0, 3]] = False
    _fill_empty(means, empty)
    # columns 6 and 7 reach column 0 across the azimuth seam
    np.testing.assert_array_equal(means[0, :, 0], [1, 1, 2, 2, 2, 2, 1, 1])


def test_holes_in_a_constant_map_do_not_bias_it():
    rng = np.random.default_rng(8)
    g = unit_grid(1, width=40, height=20)
    hit = rng.uniform(size=(20, 40)) < 0.3
    g.counts[0][hit] = 1
    g.sums[0][hit] = 0.7
    update_probe_sh(g)
    full = project_means(np.full((20, 40, 3), 0.7), 4)
    np.testing.assert_allclose(g.coeffs[0], full, atol=1e-12)


def test_sparse_maps_are_stale_and_keep_coefficients():
    g = unit_grid(2, width=10, height=5)
    g.coeffs[:] = 7.0
    rasterize_shared(g, ShadedPoints(np.array([[0.5, 0.5, 0.5]]), np.ones((1, 3)), np.array([0])))
    update_probe_sh(g)
    assert g.stale.all()
    assert np.all(g.coeffs == 7.0)
    g.counts[:] = 1
    update_probe_sh(g)
    assert not g.stale.any()


# -- interpolation ------------------------------------------------------------------------


def test_delta_at_probe():
    g = unit_grid(4)
    rng = np.random.default_rng(3)
    g.coeffs = rng.normal(size=g.coeffs.shape)
    for p in range(g.n_probes):
        n = unit_vectors(rng, 1)[0]
        ids, ws = probe_weights(g, g.positions[p], n)
        assert ws[0][ids[0] == p].sum() == 1.0
        assert np.all(ws[0][ids[0] != p] == 0.0)
        assert np.array_equal(interpolate_light(g, g.positions[p], n).coeffs, g.coeffs[p])


@given(st.lists(st.floats(0, 3), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_partition_of_unity(x, n):
    n = np.asarray(n)
    if np.linalg.norm(n) < 1e-3:
        n = np.array([0, 0, 1.0])
    g = unit_grid(4)
    ids, ws = probe_weights(g, np.asarray(x), n / np.linalg.norm(n))
    assert np.all(ws >= 0)
    assert ws.sum() == pytest.approx(1.0, abs=1e-12)
    # a constant field is reproduced exactly
    g.coeffs[:] = 2.5
    np.testing.assert_allclose(interpolate_light(g, x, n / np.linalg.norm(n)).coeffs, 2.5, rtol=1e-12)


def test_trilinear_weights_without_pruning():
    g = unit_grid(2)
    x = np.array([0.25, 0.5, 0.75])
    # a zero normal puts every probe in the tangent plane, so nothing is pruned
    ids, ws = probe_weights(g, x, np.zeros(3))
    fx, fy, fz = x
    expect = {}
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                expect[g.linear_index(i, j, k)] = (fx if i else 1 - fx) * (fy if j else 1 - fy) * (fz if k else 1 - fz)
    got = dict(zip(ids[0].tolist(), ws[0].tolist()))
    for pid, w in expect.items():
        assert got[pid] == pytest.approx(w, abs=1e-15)


def test_side_test_prunes_probes_behind_the_surface():
    g = unit_grid(2)
    x = np.array([0.25, 0.5, 0.5])
    ids, ws = probe_weights(g, x, np.array([1.0, 0, 0]))
    back = g.positions[ids[0], 0] < x[0]
    assert np.all(ws[0][back] == 0.0)
    # the survivors keep their relative trilinear weights: four corners at x = 1, equal yz weights
    np.testing.assert_allclose(ws[0][~back], 0.25, rtol=1e-15)
    # a probe exactly in the tangent plane is kept
    ids, ws = probe_weights(g, np.array([0.0, 0.5, 0.5]), np.array([1.0, 0, 0]))
    assert ws[0][g.positions[ids[0], 0] == 0.0].sum() > 0


def test_occluded_probes_are_pruned():
    wall = quad_mesh((-1, -1, 0.6), (3, 0, 0), (0, 3, 0))
    s = Scene([wall], [Material()])
    g = unit_grid(2)
    x = np.array([0.5, 0.5, 0.5])
    ids, ws = probe_weights(g, x, np.array([0, 0, 1.0]), scene=s)
    top = g.positions[ids[0], 2] == 1.0
    # probes above are behind the wall, probes below are behind the surface: everything is pruned,
    # so the fallback weights valid probes by inverse distance x clamped cosine
    d = g.positions[ids[0]] - x
    dist = np.linalg.norm(d, axis=1)
    w = np.maximum(d @ [0, 0, 1.0] / dist, 0) / dist
    np.testing.assert_allclose(ws[0], w / w.sum(), rtol=1e-14)
    assert np.all(ws[0][~top] == 0)


def test_all_pruned_fallback_inverse_distance():
    g = unit_grid(2)
    for p in range(8):
        if g.positions[p, 2] == 1.0:
            g.valid[p] = False
    x = np.array([0.3, 0.6, 0.4])
    ids, ws = probe_weights(g, x, np.array([0, 0, 1.0]))
    # upper corners are invalid, lower ones face away: cosines are all zero, so plain inverse distance
    low = g.positions[ids[0], 2] == 0.0
    inv = np.where(low, 1.0 / np.linalg.norm(g.positions[ids[0]] - x, axis=1), 0.0)
    np.testing.assert_allclose(ws[0], inv / inv.sum(), rtol=1e-14)
    assert ws[0].sum() == pytest.approx(1.0, abs=1e-15)


def test_cell_without_valid_corners_widens_the_search():
    g = unit_grid(4)
    x = np.array([1.4, 1.45, 1.3])
    inner = np.all((g.positions >= 1) & (g.positions <= 2), axis=1)
    g.valid[inner] = False
    ids, ws = probe_weights(g, x, np.array([0, 0, 1.0]))
    d = np.linalg.norm(g.positions - x, axis=1)
    # probes below the point face away from the normal, so only those above it are used
    ok = ~inner & (g.positions[:, 2] >= x[2])
    near = np.argsort(np.where(ok, d, np.inf))[:8]
    assert set(ids[0][ws[0] > 0]) == set(near)
    np.testing.assert_allclose(np.sort(ws[0]), np.sort(1 / d[near] / (1 / d[near]).sum()), rtol=1e-14)
    g.valid[:] = False
    assert probe_weights(g, x, np.array([0, 0, 1.0]))[1].sum() == 0.0


def test_points_outside_the_grid_clamp():
    g = unit_grid(3)
    g.coeffs = np.arange(g.n_probes, dtype=float)[:, None, None] * np.ones(g.coeffs.shape[1:])
    far = np.array([-5.0, -5.0, -5.0])
    assert np.array_equal(interpolate_light(g, far, np.array([1.0, 1, 1]) / math.sqrt(3)).coeffs, g.coeffs[0])


def test_batch_interpolation_matches_single():
    rng = np.random.default_rng(6)
    g = unit_grid(3)
    g.coeffs = rng.normal(size=g.coeffs.shape)
    xs = rng.uniform(0, 2, (50, 3))
    ns = unit_vectors(rng, 50)
    many = interpolate_light_many(g, xs, ns, chunk=7)
    for q in range(50):
        np.testing.assert_allclose(many[q], interpolate_light(g, xs[q], ns[q]).coeffs, rtol=1e-14)


# -- frames -------------------------------------------------------------------------------


def interior_grid(scene, **kw):
    """Grid well inside the unit sphere of the lit-sphere scene."""
    g = ProbeGrid((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), ProbeConfig(**kw))
    g.update_validity(scene)
    return g


@pytest.fixture(scope="module")
def sphere_grid():
    s = lit_sphere_interior()
    g = interior_grid(s, n=3, rays=400, width=40, height=20)
    run_frames(s, g, 20)
    return s, g


def test_constant_radiance_projects_to_dc(sphere_grid):
    _, g = sphere_grid
    assert g.valid.all() and not g.stale.any()
    c = g.coeffs
    np.testing.assert_allclose(c[:, :, 0], BOUNCE_1_3 * math.sqrt(4 * math.pi), rtol=0.03)
    assert np.max(np.abs(c[:, :, 1:])) < 0.03 * c[:, :, 0].min()


def test_probes_outside_a_closed_surface_are_invalid():
    s = lit_sphere_interior()
    # probes just outside the sphere see its inward-facing back side in most directions
    g = ProbeGrid((-1.02, -0.0, -0.0), (1.02, 0.0, 0.0), ProbeConfig(n=3))
    g.update_validity(s)
    assert g.valid.tolist() == [False] * 9 + [True] * 9 + [False] * 9


def test_shared_matches_independent_on_sphere(sphere_grid):
    s, g = sphere_grid
    ind = independent_probe_coeffs(s, g, per_texel=4)
    err = band_relative_error(g.coeffs, ind, g.valid)
    assert err[0] < 0.02


def test_frames_are_deterministic():
    s = lit_sphere_interior()
    a = interior_grid(s, n=2, rays=50, width=16, height=8)
    b = interior_grid(s, n=2, rays=50, width=16, height=8)
    run_frames(s, a, 3, parallel=True)
    run_frames(s, b, 3, parallel=False)
    assert a.coeffs.tobytes() == b.coeffs.tobytes() and a.frame == 3
    assert np.all(a.coeffs[:, :, 0] > 0)
    c = interior_grid(s, n=2, rays=50, width=16, height=8, seed=1)
    run_frames(s, c, 3)
    assert a.coeffs.tobytes() != c.coeffs.tobytes()


def test_scene_change_resets_accumulation():
    s = desk_scene(8, 8)
    g = ProbeGrid.from_scene(s, ProbeConfig(n=2, rays=20, width=16, height=8))
    run_frames(s, g, 2)
    assert g.frame == 2
    moved = s.moved(10, (0.1, 0, 0))
    step_frame(moved, g)
    assert g.frame == 1 and g.fingerprint == moved.fingerprint()
    fresh = ProbeGrid.from_scene(moved, ProbeConfig(n=2, rays=20, width=16, height=8))
    step_frame(moved, fresh, frame_seed_value=None)
    assert np.array_equal(g.counts, fresh.counts)


def test_scatter_keeps_only_surface_hits(sphere_grid):
    s, g = sphere_grid
    pts = scatter_probe_rays(s, g, 123)
    assert len(pts) == g.valid.sum() * g.config.rays
    np.testing.assert_allclose(np.linalg.norm(pts.position, axis=1), 1.0, atol=0.01)
    assert set(np.unique(pts.source)) == set(np.nonzero(g.valid)[0])


def test_probe_dump_round_trip(sphere_grid, tmp_path):
    _, g = sphere_grid
    path = write_probe_dump(g, tmp_path / "probes.bin", seed=9, manifest={"note": "x"})
    d = read_probe_dump(path)
    assert (d["n"], d["L"], d["width"], d["height"], d["frames"], d["seed"]) == (3, 4, 40, 20, 20, 9)
    assert d["manifest"]["note"] == "x" and d["manifest"]["frames"] == 20
    rec = d["records"]
    np.testing.assert_allclose(rec["coeffs"].reshape(-1, 3, 25), g.coeffs, rtol=1e-6, atol=1e-7)
    assert np.array_equal(rec["valid"].astype(bool), g.valid)
    assert np.array_equal(rec["texels"], g.counts.sum(axis=(1, 2)))
    probe = g.probe(13)
    assert probe.valid and probe.index == (1, 1, 1)
    assert probe.irradiance_map.counts.sum() == rec["texels"][13]


def test_band_relative_error():
    b = np.ones((2, 3, 9))
    assert np.all(band_relative_error(b, b) == 0)
    a = b.copy()
    a[..., 1:4] *= 1.1
    np.testing.assert_allclose(band_relative_error(a, b), [0, 0.1, 0], atol=1e-12)
