import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nightrelight.scene_io import (
    PAPER_INTRINSICS,
    Intrinsics,
    LightCategory,
    SceneError,
    bilinear_upsample,
    guide_features,
    joint_bilateral_upsample,
    load_scene_bundle,
    read_mask,
    read_pfm,
    write_image,
    write_mask,
    write_pfm,
)


def bilinear_oracle(src, H, W):
    h, w = src.shape
    out = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            sy = y * (h - 1) / (H - 1)
            sx = x * (w - 1) / (W - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[y, x] = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
                         + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
    return out


def jbu_oracle(low, feat, sigma_s, sigma_r, reach=2.0):
    h, w = low.shape
    H, W = feat.shape
    sy, sx = (h - 1) / (H - 1), (w - 1) / (W - 1)
    out = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            num = den = 0.0
            for i in range(h):
                for j in range(w):
                    if abs(i - y * sy) > reach * sigma_s * sy + 1e-9 or abs(j - x * sx) > reach * sigma_s * sx + 1e-9:
                        continue
                    qy, qx = i / sy, j / sx
                    gy = min(H - 1, int(math.floor(qy + 0.5)))
                    gx = min(W - 1, int(math.floor(qx + 0.5)))
                    wgt = math.exp(-((qy - y) ** 2 + (qx - x) ** 2) / (2 * sigma_s**2))
                    wgt *= math.exp(-((feat[y, x] - feat[gy, gx]) ** 2) / (2 * sigma_r**2))
                    num += wgt * low[i, j]
                    den += wgt
            out[y, x] = num / den
    return out


class TestFormats:
    def test_pfm_round_trip(self, tmp_path, rng):
        for shape in [(5, 7), (4, 6, 3)]:
            a = rng.random(shape).astype(np.float32)
            write_pfm(tmp_path / "a.pfm", a)
            np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), a)

    def test_pfm_rejects_garbage(self, tmp_path):
        (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(SceneError):
            read_pfm(tmp_path / "x.pfm")

    def test_mask_is_16_bit(self, tmp_path):
        ids = np.array([[0, 1], [300, 65535]])
        write_mask(tmp_path / "m.png", ids)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), ids)

    def test_light_category_labels(self):
        assert len(LightCategory) == 16
        assert LightCategory.from_label(LightCategory.STREET_LIGHT_HT.label) is LightCategory.STREET_LIGHT_HT

    def test_intrinsics(self):
        K = PAPER_INTRINSICS.K
        assert K[0, 0] == 1780 and K[0, 2] == 959.5 and K[1, 2] == 539.5
        assert Intrinsics.from_dict(PAPER_INTRINSICS.to_dict()) == PAPER_INTRINSICS


class TestBilinear:
    def test_constant(self):
        out = bilinear_upsample(np.full((3, 4), 3.0), (11, 9))
        assert np.all(out == 3.0)

    def test_aligned_row(self):
        np.testing.assert_allclose(bilinear_upsample(np.array([[0.0, 1.0]]), (1, 3)), [[0, 0.5, 1]])

    def test_matches_oracle(self, rng):
        src = rng.random((8, 8)) * 10 + 1
        np.testing.assert_allclose(bilinear_upsample(src, (16, 16)), bilinear_oracle(src, 16, 16), atol=1e-6)

    def test_vector_maps_renormalized(self, rng):
        n = rng.normal(size=(4, 4, 3))
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        out = bilinear_upsample(n, (9, 9))
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)

    def test_errors(self):
        with pytest.raises(SceneError):
            bilinear_upsample(np.zeros((0, 3)), (4, 4))
        with pytest.raises(SceneError):
            bilinear_upsample(np.zeros((5, 5)), (4, 4))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 6)),
                  elements=st.floats(-100, 100)), st.integers(0, 6), st.integers(0, 6))
    def test_convex_combination(self, src, dh, dw):
        out = bilinear_upsample(src, (src.shape[0] + dh, src.shape[1] + dw))
        assert out.min() >= src.min() - 1e-9 and out.max() <= src.max() + 1e-9


class TestJointBilateral:
    def test_constant_low_res(self, rng):
        guide = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
        out = joint_bilateral_upsample(np.full((4, 4), 0.3), guide)
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_constant_guide_is_spatial_only(self, rng):
        low = rng.random((4, 4))
        guide = np.full((8, 8, 3), 128, dtype=np.uint8)
        a = joint_bilateral_upsample(low, guide, sigma_range=0.1)
        b = joint_bilateral_upsample(low, guide, sigma_range=math.inf)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_two_tone_guide_matches_oracle(self, rng):
        low = rng.random((4, 4))
        guide = np.zeros((8, 8, 3), dtype=np.uint8)
        guide[:, 5:] = 220
        out = joint_bilateral_upsample(low, guide, sigma_range=0.1)
        feat = guide_features(guide)[..., 0]
        np.testing.assert_allclose(out, jbu_oracle(low, feat, 2.0, 0.1), atol=1e-6)

    def test_edge_preserving(self):
        # a step in the low-res map that lines up with a step in the guide stays sharp
        low = np.zeros((4, 4))
        low[:, 2:] = 1.0
        guide = np.zeros((7, 7, 3), dtype=np.uint8)
        guide[:, 4:] = 255
        out = joint_bilateral_upsample(low, guide, sigma_range=0.05)
        assert out[:, :3].max() < 0.05 and out[:, 4:].min() > 0.95


def _write_scene(tmp_path, H=8, W=8, depth=None, **over):
    depth = np.full((H, W), 5.0) if depth is None else depth
    rng = np.random.default_rng(0)
    write_image(tmp_path / "day.png", (rng.random((H, W, 3)) * 255).astype(np.uint8))
    write_pfm(tmp_path / "depth.pfm", depth)
    n = np.zeros(depth.shape + (3,))
    n[..., 2] = -1
    write_pfm(tmp_path / "normals.pfm", n)
    write_pfm(tmp_path / "albedo.pfm", np.full((H, W, 3), 0.5))
    write_mask(tmp_path / "inst.png", np.ones((H, W), int))
    write_mask(tmp_path / "light.png", np.zeros((H, W), int))
    spec = {"image": "day.png", "depth": "depth.pfm", "normals": "normals.pfm", "albedo": "albedo.pfm",
            "instance_mask": "inst.png", "light_category": "light.png",
            "intrinsics": {"fx": 10, "fy": 10, "cx": 3.5, "cy": 3.5},
            "instances": {"1": {"class": "car", "moving": True}}}
    spec.update(over)
    (tmp_path / "scene.json").write_text(json.dumps(spec))
    return tmp_path / "scene.json"


class TestLoadBundle:
    def test_full_resolution_unchanged(self, tmp_path, rng):
        d = rng.random((8, 8)).astype(np.float32) + 1
        b = load_scene_bundle(_write_scene(tmp_path, depth=d))
        np.testing.assert_array_equal(b.depth, d)
        assert b.instance_classes == {1: "car"} and b.moving_instances == {1}

    def test_half_resolution_depth(self, tmp_path):
        b = load_scene_bundle(_write_scene(tmp_path, depth=np.full((4, 4), 2.0)))
        assert b.depth.shape == (8, 8)

    def test_nan_depth(self, tmp_path):
        d = np.full((8, 8), 2.0)
        d[3, 3] = np.nan
        with pytest.raises(SceneError, match="non-finite depth"):
            load_scene_bundle(_write_scene(tmp_path, depth=d))

    def test_non_positive_depth(self, tmp_path):
        with pytest.raises(SceneError, match="non-positive depth"):
            load_scene_bundle(_write_scene(tmp_path, depth=np.zeros((8, 8))))

    def test_missing_file(self, tmp_path):
        with pytest.raises(SceneError, match="missing file"):
            load_scene_bundle(_write_scene(tmp_path, albedo="nope.pfm"))

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(SceneError, match="dimension mismatch"):
            load_scene_bundle(_write_scene(tmp_path, depth=np.full((16, 16), 2.0)))

    def test_unknown_light_category(self, tmp_path):
        p = _write_scene(tmp_path)
        write_mask(tmp_path / "light.png", np.full((8, 8), 99))
        with pytest.raises(SceneError, match="unknown light categories"):
            load_scene_bundle(p)

    def test_deterministic(self, synthetic_scene):
        a, b = load_scene_bundle(synthetic_scene), load_scene_bundle(synthetic_scene)
        for name in ("depth", "normals", "albedo", "instance_mask", "light_category"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert a.shape == (64, 64) and a.sky_mask.any()
