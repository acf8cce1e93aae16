"""A small analytic street scene for tests, demos and smoke runs.

The camera sits 1.5 m above a flat road looking down +z (y points down).
In view: a building facade with two floors of windows, a parked car
showing its rear lights, a street-light pole and the sky. Depth, normals and
albedo are written at half resolution so loading exercises the upsamplers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .scene_io import Intrinsics, LightCategory, write_image, write_mask, write_pfm

CAMERA_HEIGHT = 1.5
SKY_DEPTH = 60.0


@dataclass(frozen=True)
class Rect:
    """Fronto-parallel rectangle at depth z, x in [x0, x1], y in [y0, y1]."""

    z: float
    x0: float
    x1: float
    y0: float
    y1: float
    instance: int
    albedo: tuple[float, float, float]
    light: int = 0


ROAD, BUILDING, CAR, POLE, SKY = 1, 2, 3, 4, 5
INSTANCES = {
    ROAD: {"class": "road"},
    BUILDING: {"class": "building"},
    CAR: {"class": "car", "moving": False},
    POLE: {"class": "pole"},
    SKY: {"class": "sky"},
}


def _layout() -> list[Rect]:
    """Rectangles ordered back to front; later entries win at equal depth."""
    W = LightCategory.WINDOW_BUILDING
    rects = [Rect(18.0, -30.0, 1.0, -12.0, CAMERA_HEIGHT, BUILDING, (0.45, 0.40, 0.35))]
    for y0, y1 in ((-6.5, -4.5), (-2.8, -0.8)):
        for x0 in (-12.0, -8.5, -5.0, -1.5):
            rects.append(Rect(18.0, x0, x0 + 1.8, y0, y1, BUILDING, (0.20, 0.25, 0.30), W))
    rects += [
        Rect(10.0, -1.3, -0.9, -3.4, CAMERA_HEIGHT, POLE, (0.30, 0.30, 0.30)),
        Rect(10.0, -1.4, 0.6, -4.6, -3.4, POLE, (0.70, 0.70, 0.65), LightCategory.STREET_LIGHT_HT),
        Rect(7.0, 0.8, 2.6, 0.2, CAMERA_HEIGHT, CAR, (0.50, 0.08, 0.08)),
        Rect(7.0, 0.85, 1.3, 0.35, 0.75, CAR, (0.60, 0.10, 0.10), LightCategory.REAR_LIGHT),
        Rect(7.0, 2.1, 2.55, 0.35, 0.75, CAR, (0.60, 0.10, 0.10), LightCategory.REAR_LIGHT),
    ]
    return rects


def _trace(u: np.ndarray, v: np.ndarray, intr: Intrinsics) -> dict[str, np.ndarray]:
    """Analytic first hit for (possibly fractional) pixel coordinates."""
    rx = (u - intr.cx) / intr.fx
    ry = (v - intr.cy) / intr.fy
    depth = np.full(u.shape, SKY_DEPTH)
    inst = np.full(u.shape, SKY, dtype=np.int32)
    light = np.zeros(u.shape, dtype=np.int32)
    albedo = np.empty(u.shape + (3,))
    albedo[:] = (0.55, 0.65, 0.85)
    normal = np.empty(u.shape + (3,))
    normal[:] = (0.0, 0.0, -1.0)

    with np.errstate(divide="ignore"):
        z_ground = np.where(ry > 0, CAMERA_HEIGHT / ry, np.inf)
    hit = z_ground < depth
    depth[hit] = z_ground[hit]
    inst[hit] = ROAD
    albedo[hit] = (0.22, 0.22, 0.24)
    normal[hit] = (0.0, -1.0, 0.0)

    for r in _layout():
        x, y = rx * r.z, ry * r.z
        inside = (x >= r.x0) & (x < r.x1) & (y >= r.y0) & (y < r.y1) & (r.z <= depth)
        depth[inside] = r.z
        inst[inside] = r.instance
        albedo[inside] = r.albedo
        normal[inside] = (0.0, 0.0, -1.0)
        light[inside] = int(r.light)
    return {"depth": depth, "instance": inst, "light": light, "albedo": albedo, "normal": normal}


def synthetic_intrinsics(size: int = 64) -> Intrinsics:
    f = 56.0 * size / 64.0
    return Intrinsics(f, f, (size - 1) / 2.0, (size - 1) / 2.0)


def render_synthetic(size: int = 64, low: int | None = None, depth_noise: float = 0.01, seed: int = 0) -> dict:
    """All scene rasters in memory.

    Full-resolution labels and image; depth, normals and albedo sampled at the
    ``low`` x ``low`` positions that an aligned-corner bilinear upsampler maps
    onto the full grid, with multiplicative depth noise.
    """
    low = low or size // 2
    intr = synthetic_intrinsics(size)
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    full = _trace(u, v, intr)
    s = np.arange(low) * (size - 1) / (low - 1)
    vl, ul = np.meshgrid(s, s, indexing="ij")
    lowres = _trace(ul, vl, intr)
    rng = np.random.default_rng(seed)
    depth = lowres["depth"] * (1.0 + depth_noise * rng.standard_normal((low, low)))

    shade = np.where(full["instance"] == ROAD, 0.9, 0.7)[..., None]
    shade = np.where(full["instance"][..., None] == SKY, 1.0, shade)
    day = np.clip(full["albedo"] * shade * 1.6, 0, 1) ** (1 / 2.2)
    return {
        "intrinsics": intr,
        "image": np.floor(day * 255 + 0.5).astype(np.uint8),
        "depth": depth,
        "normals": lowres["normal"],
        "albedo": lowres["albedo"],
        "instance": full["instance"],
        "light_category": full["light"],
        "true_depth": full["depth"],
    }


def write_synthetic_scene(out_dir: str | Path, size: int = 64, seed: int = 0, scene_id: str = "synthetic64") -> Path:
    """Write the scene files plus a scene JSON; returns the JSON path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = render_synthetic(size, seed=seed)
    write_image(out / "day.png", s["image"])
    write_pfm(out / "depth.pfm", s["depth"])
    write_pfm(out / "normals.pfm", s["normals"])
    write_pfm(out / "albedo.pfm", s["albedo"])
    write_mask(out / "instance.png", s["instance"])
    write_mask(out / "light_category.png", s["light_category"])
    scene = {
        "id": scene_id,
        "image": "day.png",
        "depth": "depth.pfm",
        "normals": "normals.pfm",
        "albedo": "albedo.pfm",
        "instance_mask": "instance.png",
        "light_category": "light_category.png",
        "intrinsics": s["intrinsics"].to_dict(),
        "instances": {str(k): v for k, v in INSTANCES.items()},
    }
    path = out / "scene.json"
    path.write_text(json.dumps(scene, indent=1))
    return path


def bundled_scene_path() -> Path:
    """Scene JSON of the copy shipped inside the package."""
    return Path(str(resources.files("nightrelight") / "data" / "scenes" / "synthetic64" / "scene.json"))
