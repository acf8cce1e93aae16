"""Scene input/output: PFM/PNG rasters, intrinsics, and map upsampling.

A scene is described by a small JSON file that points at the daytime image
and the dense maps produced by external estimators::

    {
      "image": "day.png",
      "depth": "depth.pfm", "normals": "normals.pfm", "albedo": "albedo.pfm",
      "roughness": "roughness.pfm",            # optional, validated only
      "instance_mask": "instance.png",          # 16-bit ids
      "light_category": "light_category.png",   # 16-bit LightCategory ids
      "light_instance": "light_instance.png",   # 16-bit ids, optional
      "intrinsics": {"fx": 1780, "fy": 1780, "cx": 959.5, "cy": 539.5},
      "instances": {"3": {"class": "car", "moving": false}}
    }

``intrinsics`` may also be the name of a JSON sidecar holding the same keys.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numba
import numpy as np
from PIL import Image


class SceneError(ValueError):
    """Raised when scene inputs are missing or inconsistent."""


class LightCategory(IntEnum):
    """Light-source label ids stored in the light-category mask.

    The first block holds the prediction labels. The second block holds
    annotation-level labels that refine them (moving/parked vehicle lights,
    clocks) and may appear in hand-made masks.
    """

    NONE = 0
    WINDOW_BUILDING = 1
    WINDOW_PARKED = 2
    WINDOW_TRANSPORT = 3
    TRAFFIC_LIGHT = 4
    STREET_LIGHT_HT = 5
    STREET_LIGHT_LT = 6
    FRONT_LIGHT = 7
    REAR_LIGHT = 8
    ADVERTISEMENT = 9
    INFERRED = 10
    MOVING_FRONT = 11
    PARKED_FRONT = 12
    MOVING_REAR = 13
    PARKED_REAR = 14
    CLOCK = 15

    @property
    def label(self) -> str:
        return self.name.lower().replace("_ht", "_HT").replace("_lt", "_LT")

    @classmethod
    def from_label(cls, label: str) -> "LightCategory":
        return cls[label.upper()]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
        except KeyError as e:
            raise SceneError(f"intrinsics missing key {e}") from None

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        """Intrinsics for an image resized by (sx, sy), pixel-center convention."""
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5
        )


# Camera used for the street-scene experiments (1920x1080 frames).
PAPER_INTRINSICS = Intrinsics(1780.0, 1780.0, 959.5, 539.5)


@dataclass
class SceneBundle:
    """Validated pipeline input, every raster at daytime-image resolution."""

    daytime_image: np.ndarray  # (H, W, 3) uint8 sRGB
    depth: np.ndarray  # (H, W) meters
    normals: np.ndarray  # (H, W, 3) unit, camera frame
    albedo: np.ndarray  # (H, W, 3) linear, [0, 1]
    instance_mask: np.ndarray  # (H, W) int32
    light_category: np.ndarray  # (H, W) int32 LightCategory ids
    light_instance: np.ndarray  # (H, W) int32
    intrinsics: Intrinsics
    roughness: np.ndarray | None = None
    instance_classes: dict[int, str] = field(default_factory=dict)
    moving_instances: frozenset[int] = frozenset()
    scene_id: str = "scene"

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def sky_mask(self) -> np.ndarray:
        ids = [i for i, c in self.instance_classes.items() if c == "sky"]
        return np.isin(self.instance_mask, ids)


# ---------------------------------------------------------------------------
# File formats


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file; returns (H, W) or (H, W, 3) float64, top row first."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise SceneError(f"{path}: not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise SceneError(f"{path}: malformed PFM header")
        width, height = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    count = width * height * channels
    if data.size < count:
        raise SceneError(f"{path}: truncated PFM data")
    data = data[:count].reshape(height, width, channels) if channels == 3 else data[:count].reshape(height, width)
    # PFM stores rows bottom to top.
    return np.flipud(data).astype(np.float64)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a little-endian PFM (float32)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def write_mask(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 65535:
        raise ValueError("mask ids must fit in 16 bits")
    Image.fromarray(ids.astype(np.uint16)).save(path)


# ---------------------------------------------------------------------------
# Upsampling


def _source_coords(n_dst: int, n_src: int) -> np.ndarray:
    if n_dst == 1:
        return np.zeros(1)
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def bilinear_upsample(raster: np.ndarray, target: tuple[int, int], normalize: bool | None = None) -> np.ndarray:
    """Separable bilinear resampling with aligned corners and edge clamping.

    Vector rasters (H, W, 3) are re-normalized to unit length afterwards
    unless ``normalize=False``.
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.size == 0:
        raise SceneError("cannot upsample an empty raster")
    h, w = raster.shape[:2]
    H, W = target
    if H < h or W < w:
        raise SceneError(f"target {target} smaller than source {(h, w)}")

    ys = _source_coords(H, h)
    xs = _source_coords(W, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if raster.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]

    # a + w (b - a) keeps constant rasters exactly constant
    r00, r01 = raster[y0][:, x0], raster[y0][:, x1]
    r10, r11 = raster[y1][:, x0], raster[y1][:, x1]
    top = r00 + wx * (r01 - r00)
    bottom = r10 + wx * (r11 - r10)
    out = top + wy * (bottom - top)

    if normalize is None:
        normalize = raster.ndim == 3 and raster.shape[2] == 3
    if normalize:
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        out = np.where(norm > 0, out / np.where(norm > 0, norm, 1.0), out)
    return out


def nearest_upsample(raster: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = raster.shape[:2]
    ys = np.clip(np.rint(_source_coords(target[0], h)).astype(int), 0, h - 1)
    xs = np.clip(np.rint(_source_coords(target[1], w)).astype(int), 0, w - 1)
    return raster[ys][:, xs]


def guide_features(guide: np.ndarray, channel: str = "luma") -> np.ndarray:
    """Range-kernel features of a guide image, normalized to [0, 1]."""
    g = np.asarray(guide, dtype=np.float64)
    if np.issubdtype(np.asarray(guide).dtype, np.integer):
        g = g / 255.0
    if g.ndim == 2:
        return g[:, :, None]
    if channel == "luma":
        return (g[..., :3] @ np.array([0.2126, 0.7152, 0.0722]))[:, :, None]
    if channel == "rgb":
        return g[..., :3].copy()
    raise ValueError(f"unknown guide channel {channel!r}")


@numba.njit(cache=True)
def _jbu_kernel(low, feat, sy, sx, sigma_s, sigma_r, reach_y, reach_x):
    h, w, c = low.shape
    H, W, nf = feat.shape
    out = np.empty((H, W, c))
    inv_s = 1.0 / (2.0 * sigma_s * sigma_s)
    use_range = sigma_r > 0.0 and np.isfinite(sigma_r)
    inv_r = 1.0 / (2.0 * sigma_r * sigma_r) if use_range else 0.0
    # high-res position of each low-res sample
    hy = 1.0 / sy if sy > 0 else 0.0
    hx = 1.0 / sx if sx > 0 else 0.0
    for y in range(H):
        py = y * sy
        i0 = max(0, int(math.ceil(py - reach_y)))
        i1 = min(h - 1, int(math.floor(py + reach_y)))
        for x in range(W):
            px = x * sx
            j0 = max(0, int(math.ceil(px - reach_x)))
            j1 = min(w - 1, int(math.floor(px + reach_x)))
            acc = np.zeros(c)
            wsum = 0.0
            for i in range(i0, i1 + 1):
                qy = i * hy
                gy = min(H - 1, max(0, int(math.floor(qy + 0.5))))
                for j in range(j0, j1 + 1):
                    qx = j * hx
                    gx = min(W - 1, max(0, int(math.floor(qx + 0.5))))
                    d2 = (qy - y) * (qy - y) + (qx - x) * (qx - x)
                    wgt = math.exp(-d2 * inv_s)
                    if use_range:
                        r2 = 0.0
                        for k in range(nf):
                            diff = feat[y, x, k] - feat[gy, gx, k]
                            r2 += diff * diff
                        wgt *= math.exp(-r2 * inv_r)
                    wsum += wgt
                    for k in range(c):
                        acc[k] += wgt * low[i, j, k]
            if wsum > 0.0:
                for k in range(c):
                    out[y, x, k] = acc[k] / wsum
            else:
                ni = min(h - 1, max(0, int(math.floor(py + 0.5))))
                nj = min(w - 1, max(0, int(math.floor(px + 0.5))))
                for k in range(c):
                    out[y, x, k] = low[ni, nj, k]
    return out


def joint_bilateral_upsample(
    low: np.ndarray,
    guide: np.ndarray,
    sigma_spatial: float | None = None,
    sigma_range: float = 0.1,
    channel: str = "luma",
    reach: float = 2.0,
) -> np.ndarray:
    """Upsample ``low`` to the guide's resolution with guide-aware weights.

    Each output pixel is the normalized weighted mean of the low-resolution
    samples within ``reach * sigma_spatial`` high-res pixels along each axis.
    Weights are a spatial Gaussian on high-res distance times a range
    Gaussian on the guide difference between the output pixel and the
    sample's high-res location. ``sigma_spatial`` defaults to the upsampling
    factor. ``sigma_range=inf`` disables the range term.
    """
    low = np.asarray(low, dtype=np.float64)
    if low.size == 0:
        raise SceneError("cannot upsample an empty raster")
    squeeze = low.ndim == 2
    if squeeze:
        low = low[:, :, None]
    H, W = guide.shape[:2]
    h, w = low.shape[:2]
    if H < h or W < w:
        raise SceneError(f"guide {(H, W)} smaller than source {(h, w)}")
    sy = (h - 1) / (H - 1) if H > 1 else 0.0
    sx = (w - 1) / (W - 1) if W > 1 else 0.0
    if sigma_spatial is None:
        sigma_spatial = max(H / h, W / w)
    feat = guide_features(guide, channel)
    # reach in low-res units per axis; the slack keeps samples that sit
    # exactly on the boundary regardless of rounding
    reach_y = reach * sigma_spatial * sy + 1e-9
    reach_x = reach * sigma_spatial * sx + 1e-9
    out = _jbu_kernel(
        np.ascontiguousarray(low), np.ascontiguousarray(feat), sy, sx,
        float(sigma_spatial), float(sigma_range), reach_y, reach_x,
    )
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Bundle loading


def _resolve(base: Path, p) -> Path:
    path = Path(p)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise SceneError(f"missing file: {path}")
    return path


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise SceneError(f"non-finite {name}")


def _fit_map(name, arr, target, how, guide=None, sigma_range=0.1, channel="luma"):
    h, w = arr.shape[:2]
    H, W = target
    if (h, w) == (H, W):
        return arr
    if h > H or w > W:
        raise SceneError(f"dimension mismatch: {name} is {(h, w)}, image is {(H, W)}")
    if how == "bilinear":
        return bilinear_upsample(arr, target)
    if how == "joint":
        return joint_bilateral_upsample(arr, guide, sigma_range=sigma_range, channel=channel)
    return nearest_upsample(arr, target)


def load_scene_bundle(
    paths: dict | str | Path,
    intrinsics: Intrinsics | dict | tuple | None = None,
    sigma_range: float = 0.1,
    guide_channel: str = "luma",
) -> SceneBundle:
    """Load and validate a scene, resampling every map to the image size.

    ``paths`` is either a scene JSON path or an equivalent dict (relative
    paths are resolved against the current directory in that case).
    Geometry maps are bilinearly upsampled; albedo uses joint bilateral
    upsampling guided by the daytime image; masks use nearest neighbour.
    """
    if isinstance(paths, (str, Path)):
        scene_path = Path(paths)
        if not scene_path.exists():
            raise SceneError(f"missing file: {scene_path}")
        spec = json.loads(scene_path.read_text())
        base = scene_path.parent
        scene_id = spec.get("id", scene_path.stem)
    else:
        spec = dict(paths)
        base = Path(spec.get("base", "."))
        scene_id = spec.get("id", "scene")

    for key in ("image", "depth", "normals", "albedo", "instance_mask", "light_category"):
        if key not in spec:
            raise SceneError(f"scene description lacks '{key}'")

    image = read_image(_resolve(base, spec["image"]))
    H, W = image.shape[:2]

    depth = read_pfm(_resolve(base, spec["depth"]))
    if depth.ndim == 3:
        depth = depth[..., 0]
    normals = read_pfm(_resolve(base, spec["normals"]))
    albedo = read_pfm(_resolve(base, spec["albedo"]))
    if normals.ndim != 3 or albedo.ndim != 3:
        raise SceneError("normals and albedo must have 3 channels")
    if normals.shape[:2] != depth.shape:
        raise SceneError(f"dimension mismatch: depth {depth.shape} vs normals {normals.shape[:2]}")
    _check_finite("depth", depth)
    _check_finite("normals", normals)
    _check_finite("albedo", albedo)
    if np.any(depth <= 0):
        raise SceneError("non-positive depth")

    roughness = None
    if spec.get("roughness"):
        roughness = read_pfm(_resolve(base, spec["roughness"]))
        if roughness.ndim == 3:
            roughness = roughness[..., 0]
        _check_finite("roughness", roughness)
        roughness = np.clip(_fit_map("roughness", roughness, (H, W), "bilinear"), 0.0, 1.0)

    depth = _fit_map("depth", depth, (H, W), "bilinear")
    normals = _fit_map("normals", normals, (H, W), "bilinear")
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    if np.any(norm < 1e-8):
        raise SceneError("zero-length normals")
    normals = normals / norm
    albedo = np.clip(
        _fit_map("albedo", albedo, (H, W), "joint", image, sigma_range, guide_channel), 0.0, 1.0
    )

    instance = _fit_map("instance_mask", read_mask(_resolve(base, spec["instance_mask"])), (H, W), "nearest")
    light_cat = _fit_map("light_category", read_mask(_resolve(base, spec["light_category"])), (H, W), "nearest")
    if spec.get("light_instance"):
        light_inst = _fit_map(
            "light_instance", read_mask(_resolve(base, spec["light_instance"])), (H, W), "nearest"
        )
    else:
        light_inst = np.zeros((H, W), dtype=np.int32)
    valid = {int(c) for c in LightCategory}
    unknown = set(np.unique(light_cat).tolist()) - valid
    if unknown:
        raise SceneError(f"unknown light categories {sorted(unknown)}")

    if intrinsics is None:
        intr = spec.get("intrinsics")
        if intr is None:
            raise SceneError("no intrinsics given")
        if isinstance(intr, str):
            intr = json.loads(_resolve(base, intr).read_text())
        intrinsics = Intrinsics.from_dict(intr)
    elif isinstance(intrinsics, dict):
        intrinsics = Intrinsics.from_dict(intrinsics)
    elif not isinstance(intrinsics, Intrinsics):
        intrinsics = Intrinsics(*map(float, intrinsics))

    classes, moving = {}, set()
    for key, info in spec.get("instances", {}).items():
        if isinstance(info, str):
            info = {"class": info}
        classes[int(key)] = info.get("class", "unknown")
        if info.get("moving"):
            moving.add(int(key))

    return SceneBundle(
        daytime_image=image,
        depth=depth,
        normals=normals,
        albedo=albedo,
        instance_mask=instance.astype(np.int32),
        light_category=light_cat.astype(np.int32),
        light_instance=light_inst.astype(np.int32),
        intrinsics=intrinsics,
        roughness=roughness,
        instance_classes=classes,
        moving_instances=frozenset(moving),
        scene_id=scene_id,
    )
