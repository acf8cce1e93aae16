import json

import numpy as np
import pytest

from nightrelight.color import SRGB_TO_XYZ
from nightrelight.illuminants import (
    PATTERNS,
    CaptureError,
    RawCapture,
    build_illuminant_db,
    camera_to_xyz,
    cfa_channels,
    compute_chromaticity,
    demosaic_bilinear,
    demosaic_nearest,
    load_capture,
    normalize_raw,
    process_capture,
    read_pgm16,
    save_capture,
    synthesize_capture,
    white_balance_E,
    white_balance_gains,
    write_pgm16,
)

# a plausible, non-diagonal camera-to-XYZ matrix
CAM = np.array([
    [0.62, 0.25, 0.09],
    [0.28, 0.80, -0.08],
    [0.02, -0.12, 1.05],
])


def capture(mosaic, pattern="RGGB", black=0, white=1000, cam=np.eye(3)):
    H, W = mosaic.shape
    return RawCapture(np.asarray(mosaic, np.uint16), pattern, black, white, cam, (0, 0, H, W), (0, 0, H, W))


class TestNormalize:
    def test_levels(self):
        cap = capture(np.array([[100, 1100], [600, 2000]]), black=100, white=1100)
        np.testing.assert_allclose(normalize_raw(cap), [[0, 1], [0.5, 1]])

    def test_active_area_crop(self):
        m = np.arange(36, dtype=np.uint16).reshape(6, 6)
        cap = RawCapture(m, "RGGB", 0, 100, np.eye(3), (1, 2, 5, 6), (2, 3, 4, 5))
        assert normalize_raw(cap).shape == (4, 4)
        assert cap.region_in_active == (1, 1, 3, 3)

    def test_validation(self):
        m = np.zeros((4, 4))
        with pytest.raises(CaptureError):
            capture(m, black=100, white=100)
        with pytest.raises(CaptureError):
            capture(m, pattern="RGBW")
        with pytest.raises(CaptureError):
            capture(m, cam=np.zeros((3, 3)))
        with pytest.raises(CaptureError):
            RawCapture(m, "RGGB", 0, 1, np.eye(3), (0, 0, 4, 4), (2, 2, 6, 6))


class TestWhiteBalance:
    def test_identity_camera(self):
        np.testing.assert_allclose(white_balance_gains(np.eye(3)), 1.0)

    def test_red_doubled(self):
        # a camera whose red channel reads twice as high needs half the gain
        cam = np.diag([0.5, 1.0, 1.0])
        np.testing.assert_allclose(white_balance_gains(cam), [0.5, 1.0, 1.0])

    def test_balanced_E_card_is_neutral(self):
        cam_E = np.linalg.solve(CAM, np.ones(3))
        mosaic = cam_E[cfa_channels((6, 6), "GRBG")]
        np.testing.assert_allclose(white_balance_E(mosaic, CAM, "GRBG"), cam_E[1])


class TestDemosaic:
    @pytest.mark.parametrize("pattern", list(PATTERNS))
    def test_constant(self, pattern):
        out = demosaic_bilinear(np.full((8, 10), 0.3), pattern)
        assert out.shape == (8, 10, 3)
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_uniform_red_field(self):
        ch = cfa_channels((8, 8), "RGGB")
        mosaic = np.where(ch == 0, 0.8, 0.0)
        out = demosaic_bilinear(mosaic, "RGGB")
        np.testing.assert_allclose(out[..., 0], 0.8, atol=1e-15)
        np.testing.assert_allclose(out[..., 1:], 0.0, atol=1e-15)

    def test_patterns(self):
        assert cfa_channels((2, 2), "RGGB").tolist() == [[0, 1], [1, 2]]
        assert cfa_channels((2, 2), "BGGR").tolist() == [[2, 1], [1, 0]]
        assert cfa_channels((3, 3), "GBRG").tolist() == [[1, 2, 1], [0, 1, 0], [1, 2, 1]]
        with pytest.raises(CaptureError):
            cfa_channels((2, 2), "XYZW")

    def test_samples_kept(self, rng):
        m = rng.random((6, 6))
        out = demosaic_bilinear(m, "BGGR")
        ch = cfa_channels(m.shape, "BGGR")
        np.testing.assert_array_equal(np.take_along_axis(out, ch[..., None], 2)[..., 0], m)


class TestColor:
    def test_camera_to_xyz(self, rng):
        rgb = rng.random((4, 4, 3))
        np.testing.assert_array_equal(camera_to_xyz(rgb, np.eye(3)), rgb)
        np.testing.assert_allclose(camera_to_xyz(rgb, SRGB_TO_XYZ)[1, 2], SRGB_TO_XYZ @ rgb[1, 2])
        np.testing.assert_allclose(camera_to_xyz(2 * rgb + rgb, CAM), 3 * camera_to_xyz(rgb, CAM))

    def test_chromaticity(self):
        assert compute_chromaticity(np.ones((4, 4, 3)), (0, 0, 4, 4)) == pytest.approx((1 / 3, 1 / 3), abs=1e-15)
        xyz = np.zeros((4, 4, 3))
        xyz[1:3, 1:3] = (2, 1, 1)
        assert compute_chromaticity(xyz, (1, 1, 3, 3)) == pytest.approx((0.5, 0.25))
        with pytest.raises(CaptureError):
            compute_chromaticity(xyz, (0, 0, 1, 1))
        with pytest.raises(CaptureError):
            compute_chromaticity(xyz, (2, 2, 2, 2))


class TestRoundTrip:
    def test_equal_energy(self):
        cap = synthesize_capture((1 / 3, 1 / 3), np.eye(3), exposure=0.5)
        assert process_capture(cap) == pytest.approx((1 / 3, 1 / 3), abs=1e-9)

    @pytest.mark.parametrize("pattern", list(PATTERNS))
    def test_injected(self, pattern):
        xy = process_capture(synthesize_capture((0.45, 0.41), CAM, pattern=pattern))
        assert xy == pytest.approx((0.45, 0.41), abs=0.005)

    def test_scale_invariance(self):
        a = process_capture(synthesize_capture((0.38, 0.37), CAM, exposure=0.2))
        b = process_capture(synthesize_capture((0.38, 0.37), CAM, exposure=0.6))
        assert a == pytest.approx(b, abs=1e-4)
        # exact scaling of the normalized signal leaves chromaticity unchanged
        cap = synthesize_capture((0.38, 0.37), CAM)
        lin = normalize_raw(cap)
        xyz = lambda s: camera_to_xyz(demosaic_bilinear(s * lin, "RGGB"), CAM)
        assert compute_chromaticity(xyz(1.0), cap.region_in_active) == pytest.approx(
            compute_chromaticity(xyz(3.7), cap.region_in_active), abs=1e-6)

    def test_random_round_trips(self, rng):
        for i in range(20):
            x, y = rng.uniform(0.25, 0.55), rng.uniform(0.28, 0.42)
            cap = synthesize_capture((x, y), CAM, noise=0.002, seed=i)
            assert process_capture(cap) == pytest.approx((x, y), abs=0.005)

    def test_bilinear_vs_nearest(self):
        cap = synthesize_capture((0.5, 0.4), CAM)
        a = process_capture(cap)
        b = process_capture(cap, demosaic=demosaic_nearest)
        assert a == pytest.approx(b, abs=1e-4)


class TestFiles:
    def test_pgm_round_trip(self, tmp_path, rng):
        m = rng.integers(0, 65536, (5, 7)).astype(np.uint16)
        write_pgm16(tmp_path / "a.pgm", m)
        np.testing.assert_array_equal(read_pgm16(tmp_path / "a.pgm"), m)

    def test_capture_round_trip(self, tmp_path):
        cap = synthesize_capture((0.4, 0.4), CAM, category="clock")
        save_capture(tmp_path / "c.json", cap)
        back = load_capture(tmp_path / "c.json")
        np.testing.assert_array_equal(back.mosaic, cap.mosaic)
        assert (back.pattern, back.region, back.category) == (cap.pattern, cap.region, "clock")

    def test_missing_mosaic(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"pattern": "RGGB"}))
        with pytest.raises(CaptureError):
            load_capture(tmp_path / "x.json")

    def test_build_db(self, tmp_path):
        truth = {"street_light_HT": [(0.50, 0.41), (0.45, 0.40)], "advertisement": [(0.30, 0.31)]}
        k = 0
        for cat, xys in truth.items():
            for xy in xys:
                save_capture(tmp_path / f"cap{k}.json", synthesize_capture(xy, CAM, category=cat, seed=k))
                k += 1
        db = build_illuminant_db(tmp_path)
        assert set(db) == set(truth)
        for cat, xys in truth.items():
            np.testing.assert_allclose(db.samples(cat), xys, atol=0.005)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(CaptureError):
            build_illuminant_db(tmp_path)
