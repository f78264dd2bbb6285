import numpy as np
import pytest

from retrivox import geometry as G
from retrivox.grids import ScalarGrid3


def analytic_sphere_field(n, center, r):
    idx = np.indices((n, n, n)).astype(float) + 0.5
    return np.sqrt(((idx - np.asarray(center).reshape(3, 1, 1, 1)) ** 2).sum(0)) - r


def oracle_point_triangle(p, a, b, c):
    """Independent formulation: plane foot if barycentric-inside, else the
    nearest of the three edge segments."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    proj = p - np.dot(p - a, n) * n
    M = np.stack([b - a, c - a], axis=1)
    uv, *_ = np.linalg.lstsq(M, proj - a, rcond=None)
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        return abs(np.dot(p - a, n))

    def seg(s, e):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        return np.linalg.norm(p - (s + t * (e - s)))

    return min(seg(a, b), seg(b, c), seg(c, a))


class TestTriMesh:
    def test_degenerate_faces_dropped(self):
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        faces = [[0, 1, 2], [0, 1, 3]]  # second is collinear
        mesh = G.TriMesh(verts, faces)
        assert mesh.n_faces == 1
        assert mesh.dropped_faces == 1

    def test_bad_indices_raise(self):
        with pytest.raises(ValueError):
            G.TriMesh([[0, 0, 0]], [[0, 0, 5]])

    def test_normals_unit(self):
        mesh = G.uv_sphere_mesh((0, 0, 0), 1.0)
        np.testing.assert_allclose(np.linalg.norm(mesh.face_normals, axis=1), 1.0, atol=1e-6)

    def test_primitives_watertight(self):
        assert G.box_mesh((0, 0, 0), (1, 2, 3)).is_watertight()
        assert G.uv_sphere_mesh((0, 0, 0), 1.0).is_watertight()
        assert G.cylinder_mesh((0, 0, 0), 1.0, 2.0).is_watertight()
        assert not G.square_mesh((0, 0, 0), (1, 0, 0), (0, 1, 0)).is_watertight()


class TestMeshToTdf:
    def test_plane_of_square_zero(self):
        # large square crossing voxel centers at z = 4.5 exactly
        sq = G.square_mesh((-10, -10, 4.5), (30, 0, 0), (0, 30, 0))
        tdf = G.mesh_to_tdf(sq, (8, 8, 8), 1.0, (0, 0, 0), trunc=3.0)
        np.testing.assert_allclose(tdf.values[:, :, 4], 0.0, atol=1e-7)

    def test_sphere_center_clamped(self):
        # r = 8 > trunc: the center voxel is beyond truncation
        sph = G.uv_sphere_mesh((8.0, 8.0, 8.0), 8.0)
        tdf = G.mesh_to_tdf(sph, (16, 16, 16), 1.0, (0, 0, 0), trunc=3.0)
        assert tdf.values[8, 8, 8] == 1.0

    def test_empty_mesh_raises(self):
        empty = G.TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            G.mesh_to_tdf(empty, (4, 4, 4), 1.0)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        tri = rng.uniform(2, 10, size=(3, 3))
        mesh = G.TriMesh(tri, [[0, 1, 2]])
        tdf = G.mesh_to_tdf(mesh, (12, 12, 12), 1.0, (0, 0, 0), trunc=3.0)
        for _ in range(50):
            v = rng.integers(0, 12, size=3)
            center = v + 0.5
            d = oracle_point_triangle(center.astype(float), tri[0], tri[1], tri[2])
            expect = min(d, 3.0) / 3.0
            assert abs(tdf.values[v[0], v[1], v[2]] - expect) < 1e-6


class TestPointTriangleDistance:
    def test_matches_oracle_random(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b, c = rng.normal(size=(3, 3))
            p = rng.normal(size=3) * 2
            got = G.point_triangle_distances(p[None], a[None], b[None], c[None])[0]
            want = oracle_point_triangle(p, a, b, c)
            assert abs(got - want) < 1e-10


class TestMarchingCubes:
    def test_sphere_area_and_euler(self):
        field = analytic_sphere_field(28, (14.3, 13.8, 14.1), 10.0)
        mesh = G.marching_cubes_field(field, 0.0, 1.0, (0, 0, 0))
        assert abs(mesh.area - 4 * np.pi * 100) / (4 * np.pi * 100) < 0.05
        assert G.euler_characteristic(mesh) == 2
        assert mesh.is_watertight()

    def test_constant_field_empty(self):
        grid = ScalarGrid3.full((8, 8, 8), 1.0)
        assert G.marching_cubes(grid).is_empty
        assert G.marching_cubes_field(np.full((8, 8, 8), -1.0), 0.0).is_empty

    def test_world_coordinates(self):
        field = analytic_sphere_field(20, (10.2, 10.2, 10.2), 6.0)
        mesh = G.marching_cubes_field(field, 0.0, voxel_size=0.5, origin=(3.0, 4.0, 5.0))
        center_w = np.array([3.0, 4.0, 5.0]) + 10.2 * 0.5
        r = np.linalg.norm(mesh.vertices - center_w, axis=1)
        np.testing.assert_allclose(r, 6.0 * 0.5, atol=0.1)

    def test_no_nan_no_bad_indices(self):
        rng = np.random.default_rng(9)
        field = rng.normal(size=(10, 10, 10))
        mesh = G.marching_cubes_field(field, 0.0)
        assert np.isfinite(mesh.vertices).all()
        if mesh.n_faces:
            assert mesh.faces.max() < mesh.n_vertices

    def test_tdf_roundtrip_recovers_radius(self):
        center = np.array([14.3, 13.8, 14.1])
        sph = G.uv_sphere_mesh(center, 10.0, n_theta=24, n_phi=32)
        tdf = G.mesh_to_tdf(sph, (28, 28, 28), 1.0, (0, 0, 0), trunc=3.0)
        mesh = G.marching_cubes(tdf)
        r = np.linalg.norm(mesh.vertices - center, axis=1)
        assert abs(r.mean() - 10.0) < 0.5


class TestSampleSurface:
    def test_count_zero(self):
        mesh = G.box_mesh((0, 0, 0), (1, 1, 1))
        assert G.sample_surface(mesh, 0, seed=1).shape == (0, 3)

    def test_empty_mesh_raises(self):
        empty = G.TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            G.sample_surface(empty, 5, seed=1)

    def test_single_triangle_plane_and_centroid(self):
        tri = np.array([[0.0, 0, 0], [2, 0, 0], [0, 2, 0]])
        mesh = G.TriMesh(tri, [[0, 1, 2]])
        pts = G.sample_surface(mesh, 10_000, seed=4)
        assert np.abs(pts[:, 2]).max() < 1e-6
        centroid = tri.mean(axis=0)
        # LLN: sample mean within 2% of the triangle diameter of the centroid
        assert np.linalg.norm(pts.mean(axis=0) - centroid) < 0.02 * 2 * np.sqrt(2)

    def test_area_weighting_ratio(self):
        verts = np.array([[0.0, 0, 0], [3, 0, 0], [0, 2, 0],   # area 3
                          [10.0, 0, 0], [11, 0, 0], [10, 2, 0]])  # area 1
        mesh = G.TriMesh(verts, [[0, 1, 2], [3, 4, 5]])
        pts, fi = G.sample_surface_with_faces(mesh, 100_000, seed=8)
        frac = (fi == 0).mean()
        assert abs(frac - 0.75) < 0.02  # binomial bound

    def test_deterministic(self):
        mesh = G.uv_sphere_mesh((0, 0, 0), 1.0)
        a = G.sample_surface(mesh, 100, seed=12)
        b = G.sample_surface(mesh, 100, seed=12)
        np.testing.assert_array_equal(a, b)


class TestVoxelize:
    def test_cube_exact(self):
        cube = G.box_mesh((4, 4, 4), (8, 8, 8))
        occ = G.voxelize_mesh(cube, (16, 16, 16), 1.0, (0, 0, 0))
        assert occ.values.sum() == 8 ** 3
        assert occ.values[4:12, 4:12, 4:12].all()

    def test_empty_mesh_zeros(self):
        empty = G.TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        occ = G.voxelize_mesh(empty, (4, 4, 4), 1.0)
        assert occ.values.sum() == 0

    def test_sphere_volume_within_3pct(self):
        sph = G.uv_sphere_mesh((14.3, 13.8, 14.1), 10.0, n_theta=28, n_phi=40)
        occ = G.voxelize_mesh(sph, (28, 28, 28), 1.0, (0, 0, 0))
        vol = occ.values.sum()
        analytic = 4.0 / 3.0 * np.pi * 1000
        assert abs(vol - analytic) / analytic < 0.03

    def test_open_mesh_warns_shell(self):
        sq = G.square_mesh((1, 1, 4.5), (6, 0, 0), (0, 6, 0))
        with pytest.warns(UserWarning):
            occ = G.voxelize_mesh(sq, (8, 8, 8), 1.0, (0, 0, 0))
        assert occ.values.sum() > 0
        assert occ.values[:, :, 0].sum() == 0  # far layers stay empty

    def test_mc_sphere_iou_vs_analytic(self):
        n, center, r = 28, np.array([14.3, 13.8, 14.1]), 10.0
        field = analytic_sphere_field(n, center, r)
        mesh = G.marching_cubes_field(field, 0.0, 1.0, (0, 0, 0))
        vox = G.voxelize_mesh(mesh, (n, n, n), 1.0, (0, 0, 0)).values
        idx = np.indices((n, n, n)).astype(float) + 0.5
        ana = np.sqrt(((idx - center.reshape(3, 1, 1, 1)) ** 2).sum(0)) <= r
        iou = ((vox > 0) & ana).sum() / ((vox > 0) | ana).sum()
        assert iou >= 0.95


class TestObjIO:
    def test_roundtrip(self, tmp_path):
        mesh = G.cylinder_mesh((1, 2, 3), 2.0, 4.0, n_seg=12)
        path = tmp_path / "cyl.obj"
        G.save_obj(path, mesh)
        back = G.load_obj(path)
        assert back.n_faces == mesh.n_faces
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-7)

    def test_fan_triangulation(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = G.load_obj(path)
        assert mesh.n_faces == 2

    def test_slash_indices(self, tmp_path):
        path = tmp_path / "m.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
        assert G.load_obj(path).n_faces == 1
