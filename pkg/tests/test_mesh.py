import numpy as np
import pytest

from nightrelight.mesh import (
    BACKDROP,
    SKY,
    MeshError,
    TriangleMesh,
    attach_materials,
    backproject,
    build_scene_mesh,
    project,
    remove_spurious_faces,
    restore_watertight,
    triangulate_grid,
)
from nightrelight.scene_io import PAPER_INTRINSICS, Intrinsics, LightCategory

INTR = Intrinsics(10.0, 10.0, 2.0, 2.0)


def step_scene(rng, H=8, W=10):
    d = np.full((H, W), rng.uniform(1, 3))
    col = rng.integers(2, W - 2)
    d[:, col:] = rng.uniform(5, 9)
    if rng.random() < 0.5:
        r = rng.integers(1, H - 3)
        d[r:r + 2, 1:3] = rng.uniform(0.5, 0.8)  # a small near blob
    return d


def audit(mesh):
    _, counts = mesh.edge_counts()
    return counts


class TestBackproject:
    def test_principal_point(self):
        d = np.full((1080, 1920), 10.0)
        x = backproject(d, PAPER_INTRINSICS)
        np.testing.assert_allclose(x[539, 959] + [0.5 * 10 / 1780, 0.5 * 10 / 1780, 0], [0, 0, 10], atol=1e-12)

    def test_unit_offset(self):
        intr = Intrinsics(2.0, 2.0, 1.0, 1.0)
        x = backproject(np.full((3, 4), 2.0), intr)
        np.testing.assert_allclose(x[1, 3], [2.0, 0.0, 2.0])

    def test_round_trip(self, rng):
        d = rng.uniform(1, 80, (32, 32))
        uv = project(backproject(d, PAPER_INTRINSICS), PAPER_INTRINSICS)
        v, u = np.mgrid[0:32, 0:32]
        assert np.max(np.abs(uv - np.stack([u, v], -1))) < 1e-6

    def test_rejects_non_positive(self):
        with pytest.raises(MeshError):
            backproject(np.zeros((2, 2)), INTR)


class TestTriangulate:
    def test_counts(self):
        assert triangulate_grid(backproject(np.ones((2, 2)), INTR)).n_faces == 2
        assert triangulate_grid(backproject(np.ones((5, 7)), INTR)).n_faces == 2 * 4 * 6

    def test_split_isolates_deep_vertex(self):
        # a b / c d with d deep: diagonal b-c has zero disparity, a-d has 4
        d = np.array([[1.0, 1.0], [1.0, 5.0]])
        m = triangulate_grid(backproject(d, INTR))
        assert all({1, 2} <= set(f) for f in m.faces.tolist())
        # only one face touches the deep vertex
        assert sum(3 in f for f in m.faces.tolist()) == 1

    def test_faces_point_at_camera(self, rng):
        m = triangulate_grid(backproject(rng.uniform(2, 3, (6, 6)), INTR))
        centroids = m.vertices[m.faces].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", m.face_normals(), -centroids) > 0)

    def test_too_small(self):
        with pytest.raises(MeshError):
            triangulate_grid(np.ones((1, 4, 3)))


class TestSpurious:
    def test_plane_keeps_everything(self):
        m = triangulate_grid(backproject(np.full((6, 6), 3.0), INTR))
        assert remove_spurious_faces(m, None, 0.01).n_faces == m.n_faces

    def test_infinite_tau_only_uncertain(self):
        d = np.ones((4, 4))
        d[:, 2:] = 10.0
        m = triangulate_grid(backproject(d, INTR))
        unc = np.zeros((4, 4), bool)
        unc[:2, :2] = True
        out = remove_spurious_faces(m, unc, np.inf)
        assert out.n_faces == m.n_faces - 2

    def test_step_edge(self):
        d = np.ones((5, 6))
        d[:, 3:] = 5.0
        m = triangulate_grid(backproject(d, INTR))
        z = m.vertices[m.faces, 2]
        straddle = z.max(1) / z.min(1) > 1.5
        out = remove_spurious_faces(m, None, 0.5)
        assert out.n_faces == m.n_faces - straddle.sum() == m.n_faces - 8


class TestWatertight:
    def test_closed_mesh_unchanged(self):
        v = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 2.0]])
        f = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
        m = TriangleMesh(v, f)
        assert restore_watertight(m) is m

    def test_square_with_hole(self):
        m = triangulate_grid(backproject(np.full((4, 4), 2.0), INTR))
        centre = np.all(np.isin(m.faces, [5, 6, 9, 10]), axis=1)
        holed = m.select_faces(~centre)
        assert holed.boundary_edge_count() > 0
        out = restore_watertight(holed)
        assert np.all(audit(out) == 2)
        assert out.euler_characteristic() % 2 == 0

    def test_random_step_scenes(self, rng):
        for _ in range(10):
            d = step_scene(rng)
            m = remove_spurious_faces(triangulate_grid(backproject(d, INTR)), None, 0.3)
            out = restore_watertight(m)
            assert np.all(audit(out) == 2)
            assert np.isclose(out.areas()[: m.n_faces].sum(), m.areas().sum())
            assert np.all(out.kind[m.n_faces:] == BACKDROP)
            assert np.all(out.albedo[m.n_faces:] == 0.05)
            assert out.meta["far_depth"] == pytest.approx(1.5 * d.max())

    def test_non_manifold_rejected(self):
        v = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1], [0, -1, 1], [1, 1, 1.0]])
        f = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
        with pytest.raises(MeshError, match="non-manifold"):
            restore_watertight(TriangleMesh(v, f))

    def test_pipeline_mesh_closed(self, rng):
        d = rng.uniform(4, 5, (16, 16))
        d[5:9, 5:9] = 1.5
        m = build_scene_mesh(d, INTR)
        assert m.boundary_edge_count() == 0 and m.is_closed()


class TestMaterials:
    def test_uniform_albedo(self):
        m = triangulate_grid(backproject(np.full((4, 4), 2.0), INTR))
        out = attach_materials(m, np.full((4, 4, 3), 0.3), np.zeros((4, 4), int))
        np.testing.assert_allclose(out.albedo, 0.3)
        assert not out.category.any()

    def test_light_region_tagging(self):
        m = triangulate_grid(backproject(np.full((6, 6), 2.0), INTR))
        cat = np.zeros((6, 6), int)
        cat[1:4, 1:4] = LightCategory.STREET_LIGHT_HT
        out = attach_materials(m, np.full((6, 6, 3), 0.5), cat)
        px_cat = cat.ravel()[m.face_pixels]
        expected = (px_cat == LightCategory.STREET_LIGHT_HT).sum(axis=1) >= 2
        np.testing.assert_array_equal(out.category == LightCategory.STREET_LIGHT_HT, expected)
        inside = np.all(px_cat == LightCategory.STREET_LIGHT_HT, axis=1)
        assert inside.any() and np.all(out.category[inside] == LightCategory.STREET_LIGHT_HT)
        np.testing.assert_allclose(np.abs(out.light_normal[expected][:, 2]), 1.0)

    def test_sky_faces(self):
        m = triangulate_grid(backproject(np.full((4, 4), 2.0), INTR))
        sky = np.zeros((4, 4), bool)
        sky[:2] = True
        out = attach_materials(m, np.full((4, 4, 3), 0.5), np.zeros((4, 4), int), sky_mask=sky)
        votes = sky.ravel()[m.face_pixels].sum(axis=1)
        np.testing.assert_array_equal(out.kind == SKY, votes >= 2)
        assert (votes == 3).sum() == 6 and (votes == 2).sum() == 3


def test_write_ply(tmp_path):
    m = triangulate_grid(backproject(np.full((3, 3), 2.0), INTR))
    m.write_ply(tmp_path / "m.ply")
    text = (tmp_path / "m.ply").read_text()
    assert "element face 8" in text and "property int category" in text
    assert len(text.strip().splitlines()) == text.splitlines().index("end_header") + 1 + 9 + 8
