"""Gray-card raw captures to illuminant chromaticities.

A capture is a 16-bit binary PGM Bayer mosaic next to a JSON sidecar::

    {"pattern": "RGGB", "black_level": 512, "white_level": 16383,
     "cam_to_xyz": [[...], [...], [...]],
     "active_area": [top, left, bottom, right],
     "region": [top, left, bottom, right],
     "category": "street_light_HT"}

``cam_to_xyz`` maps un-balanced linear camera RGB to XYZ. ``region`` is in
full-sensor coordinates, and the Bayer ``pattern`` refers to the top-left
pixel of the active area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .lights import IlluminantDB

PATTERNS = {
    "RGGB": ((0, 1), (1, 2)),
    "BGGR": ((2, 1), (1, 0)),
    "GRBG": ((1, 0), (2, 1)),
    "GBRG": ((1, 2), (0, 1)),
}


class CaptureError(ValueError):
    pass


@dataclass
class RawCapture:
    mosaic: np.ndarray  # (H, W) uint16 counts
    pattern: str
    black_level: float
    white_level: float
    cam_to_xyz: np.ndarray
    active_area: tuple[int, int, int, int]
    region: tuple[int, int, int, int]
    category: str = "unknown"

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise CaptureError(f"unknown Bayer pattern {self.pattern!r}")
        if not self.black_level < self.white_level:
            raise CaptureError("white level must exceed black level")
        self.cam_to_xyz = np.asarray(self.cam_to_xyz, dtype=np.float64)
        if abs(np.linalg.det(self.cam_to_xyz)) < 1e-12:
            raise CaptureError("camera matrix is singular")
        t, l, b, r = self.active_area
        rt, rl, rb, rr = self.region
        if not (t <= rt < rb <= b and l <= rl < rr <= r):
            raise CaptureError("card region lies outside the active area")

    @property
    def region_in_active(self) -> tuple[int, int, int, int]:
        t, l = self.active_area[:2]
        rt, rl, rb, rr = self.region
        return rt - t, rl - l, rb - t, rr - l


def read_pgm16(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise CaptureError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def write_pgm16(path: str | Path, mosaic: np.ndarray) -> None:
    m = np.asarray(mosaic, dtype=np.uint16)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(m.astype(">u2").tobytes())


def load_capture(json_path: str | Path) -> RawCapture:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    pgm = json_path.with_suffix(".pgm")
    if "mosaic" in meta:
        pgm = json_path.parent / meta["mosaic"]
    if not pgm.exists():
        raise CaptureError(f"missing mosaic {pgm}")
    mosaic = read_pgm16(pgm)
    H, W = mosaic.shape
    return RawCapture(
        mosaic=mosaic,
        pattern=meta["pattern"],
        black_level=float(meta["black_level"]),
        white_level=float(meta["white_level"]),
        cam_to_xyz=np.array(meta["cam_to_xyz"], dtype=np.float64),
        active_area=tuple(meta.get("active_area", (0, 0, H, W))),
        region=tuple(meta["region"]),
        category=meta.get("category", "unknown"),
    )


def save_capture(json_path: str | Path, cap: RawCapture) -> None:
    json_path = Path(json_path)
    write_pgm16(json_path.with_suffix(".pgm"), cap.mosaic)
    json_path.write_text(json.dumps({
        "pattern": cap.pattern, "black_level": cap.black_level, "white_level": cap.white_level,
        "cam_to_xyz": cap.cam_to_xyz.tolist(), "active_area": list(cap.active_area),
        "region": list(cap.region), "category": cap.category,
    }, indent=1))


def normalize_raw(cap: RawCapture) -> np.ndarray:
    """Crop to the active area and map [black, white] counts to [0, 1]."""
    t, l, b, r = cap.active_area
    m = cap.mosaic[t:b, l:r].astype(np.float64)
    return np.clip((m - cap.black_level) / (cap.white_level - cap.black_level), 0.0, 1.0)


def cfa_channels(shape: tuple[int, int], pattern: str) -> np.ndarray:
    """Per-pixel channel index (0=R, 1=G, 2=B) of a Bayer layout."""
    if pattern not in PATTERNS:
        raise CaptureError(f"unknown Bayer pattern {pattern!r}")
    tile = np.array(PATTERNS[pattern])
    H, W = shape
    return np.tile(tile, ((H + 1) // 2, (W + 1) // 2))[:H, :W]


def white_balance_gains(cam_to_xyz: np.ndarray) -> np.ndarray:
    """Gains that make an equal-energy (E) lit neutral come out R = G = B.

    The camera's response to E is cam_to_xyz^-1 @ (1, 1, 1); gains are its
    reciprocal, normalized to a unit green gain.
    """
    resp = np.linalg.solve(np.asarray(cam_to_xyz, dtype=np.float64), np.ones(3))
    if np.any(np.abs(resp) < 1e-12):
        raise CaptureError("camera has zero response to illuminant E in some channel")
    gains = 1.0 / resp
    return gains / gains[1]


def white_balance_E(mosaic: np.ndarray, cam_to_xyz: np.ndarray, pattern: str) -> np.ndarray:
    gains = white_balance_gains(cam_to_xyz)
    return mosaic * gains[cfa_channels(mosaic.shape, pattern)]


_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def demosaic_bilinear(mosaic: np.ndarray, pattern: str) -> np.ndarray:
    """Bilinear CFA interpolation, renormalized at the borders."""
    ch = cfa_channels(mosaic.shape, pattern)
    out = np.empty(mosaic.shape + (3,))
    for c, k in ((0, _K_RB), (1, _K_G), (2, _K_RB)):
        mask = (ch == c).astype(np.float64)
        num = convolve(mosaic * mask, k, mode="constant")
        den = convolve(mask, k, mode="constant")
        out[..., c] = np.where(mask > 0, mosaic, num / np.maximum(den, 1e-12))
    return out


def demosaic_nearest(mosaic: np.ndarray, pattern: str) -> np.ndarray:
    """Replicate each 2x2 cell's samples over the cell (reference only)."""
    H, W = mosaic.shape
    ch = cfa_channels(mosaic.shape, pattern)
    out = np.zeros((H, W, 3))
    for y0 in range(0, H - 1, 2):
        for x0 in range(0, W - 1, 2):
            cell = mosaic[y0:y0 + 2, x0:x0 + 2]
            cc = ch[y0:y0 + 2, x0:x0 + 2]
            for c in range(3):
                out[y0:y0 + 2, x0:x0 + 2, c] = cell[cc == c].mean()
    return out


def camera_to_xyz(rgb: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ np.asarray(matrix, dtype=np.float64).T


def compute_chromaticity(xyz: np.ndarray, region: tuple[int, int, int, int]) -> tuple[float, float]:
    """(x, y) of the mean XYZ over a (top, left, bottom, right) rectangle."""
    t, l, b, r = region
    patch = xyz[t:b, l:r].reshape(-1, 3)
    if patch.size == 0:
        raise CaptureError("empty card region")
    X, Y, Z = patch.mean(axis=0)
    s = X + Y + Z
    if s == 0:
        raise CaptureError("region has zero mean XYZ")
    return float(X / s), float(Y / s)


def process_capture(cap: RawCapture, demosaic=demosaic_bilinear) -> tuple[float, float]:
    """Chromaticity of the annotated card region of one capture."""
    lin = normalize_raw(cap)
    gains = white_balance_gains(cap.cam_to_xyz)
    balanced = white_balance_E(lin, cap.cam_to_xyz, cap.pattern)
    rgb = demosaic(balanced, cap.pattern)
    # the matrix acts on un-balanced camera RGB
    xyz = camera_to_xyz(rgb, cap.cam_to_xyz @ np.diag(1.0 / gains))
    return compute_chromaticity(xyz, cap.region_in_active)


def synthesize_capture(
    illuminant_xy: tuple[float, float],
    cam_to_xyz: np.ndarray,
    shape: tuple[int, int] = (64, 64),
    pattern: str = "RGGB",
    black_level: int = 512,
    white_level: int = 16383,
    exposure: float = 0.4,
    noise: float = 0.0,
    seed: int = 0,
    margin: int = 2,
    category: str = "unknown",
) -> RawCapture:
    """Forward-simulate a gray card lit by an illuminant of given chromaticity.

    The card fills the frame inside an inactive ``margin``; its XYZ is
    proportional to the illuminant's, with luminance ``exposure`` relative
    to the white level.
    """
    H, W = shape
    xyz = np.array([illuminant_xy[0], illuminant_xy[1], 1 - sum(illuminant_xy)]) / illuminant_xy[1]
    cam = np.linalg.solve(cam_to_xyz, xyz * exposure)
    ah, aw = H - 2 * margin, W - 2 * margin
    ch = cfa_channels((ah, aw), pattern)
    active = cam[ch]
    rng = np.random.default_rng(seed)
    if noise > 0:
        active = active + noise * rng.standard_normal(active.shape)
    counts = np.full((H, W), black_level, dtype=np.float64)
    counts[margin:margin + ah, margin:margin + aw] = black_level + active * (white_level - black_level)
    mosaic = np.clip(np.rint(counts), 0, 65535).astype(np.uint16)
    region = (margin + 4, margin + 4, margin + ah - 4, margin + aw - 4)
    return RawCapture(mosaic, pattern, black_level, white_level, cam_to_xyz,
                      (margin, margin, margin + ah, margin + aw), region, category)


def build_illuminant_db(capture_dir: str | Path) -> IlluminantDB:
    """Process every capture sidecar in a directory into an illuminant DB."""
    samples: dict[str, list] = {}
    for meta in sorted(Path(capture_dir).glob("*.json")):
        cap = load_capture(meta)
        samples.setdefault(cap.category, []).append(list(process_capture(cap)))
    if not samples:
        raise CaptureError(f"no captures found in {capture_dir}")
    return IlluminantDB(samples)
