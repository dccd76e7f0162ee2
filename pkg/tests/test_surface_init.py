"""Marching cubes and position sampling oracles."""

import numpy as np
import pytest

from splatdistill.exceptions import InitializationError
from splatdistill.surface_init import (
    DensityGrid,
    InitStrategy,
    InitStrategyKind,
    SurfaceMesh,
    default_iso_level,
    eval_density_grid,
    grid_positions,
    marching_cubes,
    random_positions,
    sample_positions,
    sample_surface_points,
    write_obj,
)
from splatdistill.teacher import NerfHead
from splatdistill.triplane import TriPlane


def _sphere_grid(g=64, amp=40.0, radius=0.5):
    ax = np.linspace(-1, 1, g, dtype=np.float32)
    xs, ys, zs = np.meshgrid(ax, ax, ax, indexing="ij")
    r = np.sqrt(xs**2 + ys**2 + zs**2)
    vals = amp * np.maximum(0.0, 1.0 - r / radius)
    return DensityGrid(g, vals.astype(np.float32))


def _trilinear(grid: DensityGrid, p):
    ax = grid.axis_coords().astype(np.float64)
    g = grid.resolution
    out = 0.0
    u = (np.asarray(p, dtype=np.float64) + 1.0) / 2.0 * (g - 1)
    i0 = np.minimum(np.floor(u).astype(int), g - 2)
    d = u - i0
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = (
                    (d[0] if cx else 1 - d[0])
                    * (d[1] if cy else 1 - d[1])
                    * (d[2] if cz else 1 - d[2])
                )
                out += w * float(grid.values[i0[0] + cx, i0[1] + cy, i0[2] + cz])
    return out


class TestMarchingCubes:
    def test_all_below_iso_gives_empty_mesh(self):
        grid = DensityGrid(8, np.full((8, 8, 8), 1.0, dtype=np.float32))
        mesh = marching_cubes(grid, iso=5.0)
        assert mesh.empty

    def test_sphere_vertices_near_true_radius(self):
        g = 64
        grid = _sphere_grid(g=g)
        mesh = marching_cubes(grid, iso=20.0)
        assert not mesh.empty
        radii = np.linalg.norm(mesh.vertices, axis=1)
        cell_diag = np.sqrt(3.0) * 2.0 / (g - 1)
        assert np.abs(radii - 0.25).max() < cell_diag

    def test_vertex_trilinear_density_equals_iso(self):
        grid = _sphere_grid(g=32)
        iso = 20.0
        mesh = marching_cubes(grid, iso)
        rng = np.random.default_rng(0)
        pick = rng.choice(mesh.vertices.shape[0], size=200, replace=False)
        for vi in pick:
            assert abs(_trilinear(grid, mesh.vertices[vi]) - iso) < 1e-4

    def test_single_hot_cell_produces_small_closed_surface(self):
        g = 16
        vals = np.zeros((g, g, g), dtype=np.float32)
        vals[7, 8, 6] = 10.0
        grid = DensityGrid(g, vals)
        mesh = marching_cubes(grid, iso=5.0)
        assert not mesh.empty
        # all vertices within the 2-cell neighborhood of the hot lattice point
        hot = np.array([grid.axis_coords()[i] for i in (7, 8, 6)])
        cell = 2.0 / (g - 1)
        assert np.abs(mesh.vertices - hot).max() <= cell + 1e-6
        # closed surface: every edge is shared by exactly two triangles
        edges = {}
        for tri in mesh.triangles:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = tuple(sorted((int(tri[a]), int(tri[b]))))
                edges[key] = edges.get(key, 0) + 1
        assert set(edges.values()) == {2}

    def test_deterministic(self):
        grid = _sphere_grid(g=24)
        m1 = marching_cubes(grid, 20.0)
        m2 = marching_cubes(grid, 20.0)
        np.testing.assert_array_equal(m1.vertices, m2.vertices)
        np.testing.assert_array_equal(m1.triangles, m2.triangles)


class TestSurfaceSampling:
    def _mesh(self):
        return marching_cubes(_sphere_grid(g=48), iso=20.0)

    def test_zero_shrink_points_lie_on_triangle_planes(self):
        mesh = self._mesh()
        rng = np.random.default_rng(1)
        pts = sample_surface_points(mesh, 2000, 0.0, rng)
        # distance to the closest triangle plane among all triangles is
        # expensive; instead re-sample with recorded picks via radius check:
        # every surface point of the sphere mesh lies within one cell of r=0.25
        radii = np.linalg.norm(pts, axis=1)
        cell_diag = np.sqrt(3.0) * 2.0 / 47
        assert np.abs(radii - 0.25).max() < cell_diag

    def test_zero_shrink_exactly_on_picked_triangle(self):
        # direct barycentric check with a controlled single-triangle mesh
        tri = SurfaceMesh(
            vertices=np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float32),
            triangles=np.array([[0, 1, 2]]),
        )
        rng = np.random.default_rng(2)
        pts = sample_surface_points(tri, 500, 0.0, rng)
        assert np.abs(pts[:, 2]).max() < 1e-5  # on the z=0 plane
        assert (pts[:, 0] >= -1e-6).all() and (pts[:, 1] >= -1e-6).all()
        assert (pts[:, 0] + pts[:, 1] <= 1 + 1e-5).all()

    def test_shrink_bounds_on_sphere(self):
        mesh = self._mesh()
        rng = np.random.default_rng(3)
        pts = sample_surface_points(mesh, 5000, 0.15, rng)
        radii = np.linalg.norm(pts, axis=1)
        eps = np.sqrt(3.0) * 2.0 / 47  # mesh vertices are within a cell of r
        assert radii.max() <= 0.25 + eps
        assert radii.min() >= 0.25 * (1 - 0.15) - eps

    def test_triangle_area_proportional_counts(self):
        # two triangles with area ratio 4:1
        mesh = SurfaceMesh(
            vertices=np.array(
                [
                    [-0.9, -0.9, 0.0], [-0.1, -0.9, 0.0], [-0.9, -0.1, 0.0],
                    [0.5, 0.5, 0.0], [0.9, 0.5, 0.0], [0.5, 0.9, 0.0],
                ],
                dtype=np.float32,
            ),
            triangles=np.array([[0, 1, 2], [3, 4, 5]]),
        )
        areas = mesh.areas()
        assert areas[0] / areas[1] == pytest.approx(4.0)
        rng = np.random.default_rng(4)
        n = 20000
        pts = sample_surface_points(mesh, n, 0.0, rng)
        n_small = int((pts[:, 0] >= 0.0).sum())
        p = 0.2
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(n_small - n * p) < 3 * sigma

    def test_empty_mesh_raises(self):
        mesh = SurfaceMesh(np.zeros((0, 3), np.float32), np.zeros((0, 3), np.int64))
        with pytest.raises(InitializationError):
            sample_surface_points(mesh, 10, 0.1, np.random.default_rng(0))


class TestStrategies:
    def test_grid_n8_is_half_lattice(self):
        pts = grid_positions(8)
        expect = {(-0.5, -0.5), (0.5, 0.5)}
        got = sorted(map(tuple, np.unique(np.abs(pts), axis=0).tolist()))
        np.testing.assert_allclose(np.abs(pts), 0.5)
        assert pts.shape == (8, 3)

    def test_random_reproducible_and_in_cube(self):
        a = random_positions(100, np.random.default_rng(9))
        b = random_positions(100, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert np.abs(a).max() <= 1.0

    def test_marching_cubes_strategy_places_points_in_dense_regions(self):
        rng = np.random.default_rng(5)
        head = NerfHead(rng, channels=4, hidden=8)
        # bias the density head so the zero tri-plane gives a uniform field,
        # then nudge the planes to carve a blob around the origin
        tp = TriPlane.zeros(16, 4)
        strat = InitStrategy(kind="marching_cubes", count=500, grid_resolution=24)
        pts = sample_positions(strat, tp, head, np.random.default_rng(6))
        assert pts.shape == (500, 3)
        assert np.abs(pts).max() <= 1.0

    def test_fallback_to_random_on_flat_field(self):
        rng = np.random.default_rng(7)
        head = NerfHead(rng, channels=4, hidden=8)
        for w in head.mlp.weights:
            w.data[:] = 0
        tp = TriPlane.zeros(16, 4)  # constant ln(2) density -> no crossing at cap
        strat = InitStrategy(kind="marching_cubes", count=64, grid_resolution=16)
        with pytest.warns(RuntimeWarning):
            pts = sample_positions(strat, tp, head, np.random.default_rng(8))
        assert pts.shape == (64, 3)


def test_eval_density_grid_constant_for_zero_head():
    rng = np.random.default_rng(10)
    head = NerfHead(rng, channels=4, hidden=8)
    for w in head.mlp.weights:
        w.data[:] = 0
    grid = eval_density_grid(TriPlane.zeros(8, 4), head, resolution=8)
    np.testing.assert_allclose(grid.values, np.log(2.0), rtol=1e-5)


def test_eval_density_grid_agrees_at_shared_corner_points():
    rng = np.random.default_rng(11)
    head = NerfHead(rng, channels=4, hidden=8)
    tp = TriPlane(
        __import__("splatdistill.diffmath", fromlist=["tensor"]).tensor(
            rng.normal(size=(3, 8, 8, 4)).astype(np.float32)
        )
    )
    g8 = eval_density_grid(tp, head, resolution=8)
    g64 = eval_density_grid(tp, head, resolution=64)
    for i in (0, 7):
        for j in (0, 7):
            for k in (0, 7):
                a = g8.values[i, j, k]
                b = g64.values[i * 9, j * 9, k * 9]
                assert a == b


def test_default_iso_uses_cell_opacity_until_capped():
    grid = DensityGrid(128, np.full((128, 128, 128), 200.0, dtype=np.float32))
    assert default_iso_level(grid) == pytest.approx(np.log(2.0) * 64)
    soft = DensityGrid(128, np.full((128, 128, 128), 10.0, dtype=np.float32))
    assert default_iso_level(soft) == pytest.approx(5.0)


def test_write_obj(tmp_path):
    mesh = marching_cubes(_sphere_grid(16), 20.0)
    path = tmp_path / "m.obj"
    write_obj(mesh, path)
    lines = path.read_text().splitlines()
    nv = sum(1 for l in lines if l.startswith("v "))
    nf = sum(1 for l in lines if l.startswith("f "))
    assert nv == mesh.vertices.shape[0] and nf == mesh.triangles.shape[0]
