"""Diffuse Monte Carlo path tracer transporting XYZ radiance.

Paths start at a pinhole camera at the origin looking down +z. At every
vertex the tracer samples one emitter point (next-event estimation, emitter
picked in proportion to area times luminance), then continues with a
cosine-weighted bounce. Russian roulette starts after the third bounce.
Emission reached by a bounce ray is only counted for camera rays, so no
light path is counted twice. ``light_sampling="bsdf"`` disables NEE and
counts emission wherever a path hits it, which serves as a brute-force
reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import os

import numba
import numpy as np

from ..color import albedo_to_xyz_reflectance
from ..mesh import TriangleMesh
from ..scene_io import Intrinsics
from .bvh import build_bvh, intersect
from .rng import sample_key, uniform

INV_PI = 1.0 / math.pi

# Numba probes TBB first and warns when the system copy is too old; results
# do not depend on the threading layer, so prefer the others unless the user
# picked one.
if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


class RenderError(RuntimeError):
    pass


def diffuse_brdf(albedo):
    """Lambertian BRDF value albedo / pi."""
    return np.asarray(albedo, dtype=np.float64) * INV_PI


@numba.njit(inline="always")
def _directionality(vx, vy, vz, nx, ny, nz):
    c = abs(vx * nx + vy * ny + vz * nz)
    if c > 1.0:
        c = 1.0
    return math.cos(math.pi * (c - 1.0) * 0.5)


def directionality_weight(v, n) -> float:
    """Emitter falloff cos(pi * (|v . n| - 1) / 2): 1 along the normal, 0 at grazing."""
    c = min(abs(float(np.dot(v, n))), 1.0)
    return math.cos(math.pi * (c - 1.0) / 2.0)


def emitted_radiance(mesh: TriangleMesh, face: int, omega_o) -> np.ndarray:
    """XYZ radiance leaving ``face`` toward ``omega_o``."""
    if not mesh.emissive[face]:
        return np.zeros(3)
    return mesh.emission[face] * directionality_weight(omega_o, mesh.light_normal[face])


@dataclass
class LinearImage:
    data: np.ndarray  # (H, W, 3) XYZ
    spp: int
    seed: int
    bad_samples: int = 0


@dataclass
class PackedScene:
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    normal: np.ndarray
    reflectance: np.ndarray  # XYZ
    emission: np.ndarray
    emissive: np.ndarray
    light_normal: np.ndarray
    emitters: np.ndarray
    emitter_cdf: np.ndarray
    emitter_pmf: np.ndarray
    area: np.ndarray
    bvh: tuple
    eps: float


def pack_scene(mesh: TriangleMesh, light_scale: float = 1.0) -> PackedScene:
    tri = mesh.vertices[mesh.faces] if mesh.n_faces else np.zeros((0, 3, 3))
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    n = np.cross(e1, e2)
    area2 = np.linalg.norm(n, axis=1)
    normal = n / np.where(area2 > 0, area2, 1.0)[:, None]
    area = 0.5 * area2
    emission = np.ascontiguousarray(mesh.emission * light_scale, dtype=np.float64)
    emissive = mesh.emissive & (emission.max(axis=1) > 0) & (area > 0)
    ln = mesh.light_normal.copy()
    missing = np.linalg.norm(ln, axis=1) < 0.5
    ln[missing] = normal[missing]
    emitters = np.flatnonzero(emissive)
    power = area[emitters] * np.maximum(emission[emitters, 1], 1e-12 * emission[emitters].max(initial=0) + 1e-300)
    if len(emitters):
        pmf = power / power.sum()
        cdf = np.cumsum(pmf)
        cdf[-1] = 1.0
    else:
        pmf = np.zeros(0)
        cdf = np.zeros(0)
    pmf_full = np.zeros(len(area))
    pmf_full[emitters] = pmf
    bvh = build_bvh(tri)
    extent = float(np.abs(tri).max()) if len(tri) else 1.0
    return PackedScene(
        v0, e1, e2, normal,
        np.ascontiguousarray(albedo_to_xyz_reflectance(mesh.albedo)),
        emission, emissive, np.ascontiguousarray(ln), emitters.astype(np.int64), cdf, pmf_full, area,
        (bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.first, bvh.count, bvh.prims),
        1e-7 * max(extent, 1.0),
    )


@numba.njit(cache=True)
def _pick(cdf, u):
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@numba.njit(cache=True)
def _trace_sample(key, px, py, fx, fy, cx, cy, max_bounces, nee, rr_depth,
                  v0, e1, e2, normal, refl, emission, emissive, lnorm,
                  emitters, cdf, pmf, area, nmin, nmax, left, right, first, count, prims, eps):
    dx = (px - cx) / fx
    dy = (py - cy) / fy
    dz = 1.0
    inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
    dx *= inv
    dy *= inv
    dz *= inv
    ox = 0.0
    oy = 0.0
    oz = 0.0
    t0 = 1.0
    t1 = 1.0
    t2 = 1.0
    L0 = 0.0
    L1 = 0.0
    L2 = 0.0
    dim = 2
    n_emit = emitters.shape[0]
    for depth in range(max_bounces + 1):
        t, f = intersect(ox, oy, oz, dx, dy, dz, np.inf, False,
                         nmin, nmax, left, right, first, count, prims, v0, e1, e2)
        if f < 0:
            break
        hx = ox + t * dx
        hy = oy + t * dy
        hz = oz + t * dz
        nx = normal[f, 0]
        ny = normal[f, 1]
        nz = normal[f, 2]
        if nx * dx + ny * dy + nz * dz > 0.0:
            nx = -nx
            ny = -ny
            nz = -nz
        if emissive[f] and (depth == 0 or not nee):
            g = _directionality(-dx, -dy, -dz, lnorm[f, 0], lnorm[f, 1], lnorm[f, 2])
            L0 += t0 * emission[f, 0] * g
            L1 += t1 * emission[f, 1] * g
            L2 += t2 * emission[f, 2] * g
        if depth == max_bounces:
            break
        scale = eps * (1.0 + abs(hx) + abs(hy) + abs(hz))
        sx = hx + nx * scale
        sy = hy + ny * scale
        sz = hz + nz * scale
        r0 = refl[f, 0]
        r1 = refl[f, 1]
        r2 = refl[f, 2]

        if nee and n_emit > 0:
            e = emitters[_pick(cdf, uniform(key, dim))]
            a = uniform(key, dim + 1)
            b = uniform(key, dim + 2)
            sa = math.sqrt(a)
            w1 = sa * (1.0 - b)
            w2 = sa * b
            qx = v0[e, 0] + w1 * e1[e, 0] + w2 * e2[e, 0]
            qy = v0[e, 1] + w1 * e1[e, 1] + w2 * e2[e, 1]
            qz = v0[e, 2] + w1 * e1[e, 2] + w2 * e2[e, 2]
            wx = qx - sx
            wy = qy - sy
            wz = qz - sz
            d2 = wx * wx + wy * wy + wz * wz
            if e != f and d2 > 0.0:
                dist = math.sqrt(d2)
                wx /= dist
                wy /= dist
                wz /= dist
                cos_r = nx * wx + ny * wy + nz * wz
                cos_l = abs(normal[e, 0] * wx + normal[e, 1] * wy + normal[e, 2] * wz)
                if cos_r > 0.0 and cos_l > 0.0:
                    g = _directionality(wx, wy, wz, lnorm[e, 0], lnorm[e, 1], lnorm[e, 2])
                    if g > 0.0:
                        tb, fb = intersect(sx, sy, sz, wx, wy, wz, dist * (1.0 - 1e-6), True,
                                           nmin, nmax, left, right, first, count, prims, v0, e1, e2)
                        if fb < 0:
                            w = g * cos_r * cos_l * area[e] / (d2 * pmf[e]) * INV_PI
                            L0 += t0 * r0 * emission[e, 0] * w
                            L1 += t1 * r1 * emission[e, 1] * w
                            L2 += t2 * r2 * emission[e, 2] * w
        dim += 3
        if nee and depth + 1 == max_bounces:
            break

        # cosine-weighted bounce about the oriented normal
        u1 = uniform(key, dim)
        u2 = uniform(key, dim + 1)
        dim += 2
        r = math.sqrt(u1)
        phi = 2.0 * math.pi * u2
        lx = r * math.cos(phi)
        ly = r * math.sin(phi)
        lz = math.sqrt(max(0.0, 1.0 - u1))
        if abs(nx) > 0.9:
            ax, ay, az = 0.0, 1.0, 0.0
        else:
            ax, ay, az = 1.0, 0.0, 0.0
        # tangent = normalize(a x n), bitangent = n x tangent
        tx = ay * nz - az * ny
        ty = az * nx - ax * nz
        tz = ax * ny - ay * nx
        tl = 1.0 / math.sqrt(tx * tx + ty * ty + tz * tz)
        tx *= tl
        ty *= tl
        tz *= tl
        bx = ny * tz - nz * ty
        by = nz * tx - nx * tz
        bz = nx * ty - ny * tx
        dx = lx * tx + ly * bx + lz * nx
        dy = lx * ty + ly * by + lz * ny
        dz = lx * tz + ly * bz + lz * nz
        ox = sx
        oy = sy
        oz = sz
        t0 *= r0
        t1 *= r1
        t2 *= r2
        if depth + 1 >= rr_depth:
            q = max(t0, max(t1, t2))
            if q <= 0.0:
                break
            if q < 1.0:
                if uniform(key, dim) >= q:
                    break
                t0 /= q
                t1 /= q
                t2 /= q
            dim += 1
    return L0, L1, L2


@numba.njit(parallel=True, cache=True)
def _render(H, W, fx, fy, cx, cy, spp, max_bounces, seed, jitter, nee, rr_depth,
            v0, e1, e2, normal, refl, emission, emissive, lnorm, emitters, cdf, pmf, area,
            nmin, nmax, left, right, first, count, prims, eps):
    out = np.zeros((H, W, 3))
    bad = np.zeros(H * W, dtype=np.int64)
    for pix in numba.prange(H * W):
        y = pix // W
        x = pix - y * W
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for s in range(spp):
            key = sample_key(seed, pix, s)
            if jitter:
                px = x - 0.5 + uniform(key, 0)
                py = y - 0.5 + uniform(key, 1)
            else:
                px = float(x)
                py = float(y)
            L0, L1, L2 = _trace_sample(key, px, py, fx, fy, cx, cy, max_bounces, nee, rr_depth,
                                       v0, e1, e2, normal, refl, emission, emissive, lnorm,
                                       emitters, cdf, pmf, area, nmin, nmax, left, right, first,
                                       count, prims, eps)
            if math.isfinite(L0) and math.isfinite(L1) and math.isfinite(L2) and L0 >= 0.0 and L1 >= 0.0 and L2 >= 0.0:
                a0 += L0
                a1 += L1
                a2 += L2
            else:
                bad[pix] += 1
        out[y, x, 0] = a0 / spp
        out[y, x, 1] = a1 / spp
        out[y, x, 2] = a2 / spp
    return out, bad.sum()


def render(
    mesh: TriangleMesh | PackedScene,
    intrinsics: Intrinsics,
    shape: tuple[int, int],
    spp: int = 64,
    max_bounces: int = 4,
    seed: int = 0,
    light_sampling: str = "nee",
    jitter: bool = True,
    rr_depth: int = 3,
    max_bad_fraction: float = 1e-3,
) -> LinearImage:
    """Render the mesh as seen from the origin into an (H, W, 3) XYZ image."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if light_sampling not in ("nee", "bsdf"):
        raise ValueError(f"unknown light sampling {light_sampling!r}")
    scene = mesh if isinstance(mesh, PackedScene) else pack_scene(mesh)
    H, W = shape
    data, bad = _render(
        H, W, float(intrinsics.fx), float(intrinsics.fy), float(intrinsics.cx), float(intrinsics.cy),
        int(spp), int(max_bounces), np.uint64(seed), bool(jitter), light_sampling == "nee", int(rr_depth),
        scene.v0, scene.e1, scene.e2, scene.normal, scene.reflectance, scene.emission, scene.emissive,
        scene.light_normal, scene.emitters, scene.emitter_cdf, scene.emitter_pmf, scene.area,
        *scene.bvh, scene.eps,
    )
    total = H * W * spp
    if bad > max_bad_fraction * total:
        raise RenderError(f"{bad} of {total} radiance samples were non-finite")
    return LinearImage(data, spp, int(seed), int(bad))
