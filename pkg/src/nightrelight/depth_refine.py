"""Depth refinement: instance-guided smoothing, uncertain regions, and
normal-guided optimization of the depth map."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scene_io import Intrinsics

log = logging.getLogger(__name__)


@numba.njit(cache=True)
def _cross_bilateral(depth, labels, sigma_s, radius):
    H, W = depth.shape
    out = np.empty_like(depth)
    inv = 1.0 / (2.0 * sigma_s * sigma_s)
    lut = np.empty(radius + 1)
    for k in range(radius + 1):
        lut[k] = k * k
    for y in range(H):
        for x in range(W):
            lab = labels[y, x]
            num = 0.0
            den = 0.0
            for dy in range(-radius, radius + 1):
                yy = y + dy
                if yy < 0 or yy >= H:
                    continue
                for dx in range(-radius, radius + 1):
                    xx = x + dx
                    if xx < 0 or xx >= W or labels[yy, xx] != lab:
                        continue
                    wgt = math.exp(-(lut[abs(dy)] + lut[abs(dx)]) * inv)
                    num += wgt * depth[yy, xx]
                    den += wgt
            out[y, x] = num / den
    return out


def cross_bilateral_filter(
    depth: np.ndarray, instance_mask: np.ndarray, sigma_s: float = 5.0, radius: int | None = None
) -> np.ndarray:
    """Smooth depth within instances only.

    Each pixel becomes the Gaussian-weighted mean of the depths in its
    (2*radius+1)^2 neighbourhood that carry the same instance id. Neighbours
    outside the frame are skipped. ``radius`` defaults to ceil(3*sigma_s).
    """
    if sigma_s <= 0:
        raise ValueError("sigma_s must be positive")
    if radius is None:
        radius = int(math.ceil(3 * sigma_s))
    if radius < 1:
        raise ValueError("radius must be >= 1")
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    labels = np.ascontiguousarray(instance_mask, dtype=np.int64)
    if depth.shape != labels.shape:
        raise ValueError(f"shape mismatch {depth.shape} vs {labels.shape}")
    return _cross_bilateral(depth, labels, float(sigma_s), int(radius))


@dataclass
class UncertainMask:
    uncertain: np.ndarray  # bool (H, W)
    k: int
    t: float
    r_max: float

    @property
    def certain(self) -> np.ndarray:
        return ~self.uncertain

    def as_float(self) -> np.ndarray:
        """Complement as 0/1 weights, the form the losses consume."""
        return (~self.uncertain).astype(np.float64)


def _window_reduce(a: np.ndarray, k: int, fn) -> np.ndarray:
    rows = fn(sliding_window_view(a, k, axis=1), axis=-1)
    return fn(sliding_window_view(rows, k, axis=0), axis=-1)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def detect_uncertain_regions(
    depth: np.ndarray,
    instance_mask: np.ndarray,
    k: int = 10,
    t: float = 0.01,
    r_max: float | None = None,
) -> UncertainMask:
    """Mark pixels of k x k windows that straddle instances with varied depth.

    A window (stride 1, fully inside the frame) flags all of its pixels when
    it overlaps at least two instance ids and the population variance of its
    depths exceeds ``t``. Pixels deeper than ``r_max`` are then cleared;
    ``r_max`` defaults to the depth mid-range of the scene.
    """
    if k < 2:
        raise ValueError("window size k must be >= 2")
    depth = np.asarray(depth, dtype=np.float64)
    labels = np.asarray(instance_mask)
    H, W = depth.shape
    if r_max is None:
        r_max = 0.5 * (float(depth.min()) + float(depth.max()))
    uncertain = np.zeros((H, W), dtype=bool)
    if H >= k and W >= k:
        multi = _window_reduce(labels, k, np.max) != _window_reduce(labels, k, np.min)
        centred = depth - depth.mean()
        n = k * k
        mean = _box_sum(centred, k) / n
        var = _box_sum(centred * centred, k) / n - mean * mean
        flags = (multi & (var > t)).astype(np.float64)
        # pixel is covered by a flagged window with top-left in [y-k+1, y] x [x-k+1, x]
        padded = np.zeros((H + k - 1, W + k - 1))
        padded[k - 1 : k - 1 + flags.shape[0], k - 1 : k - 1 + flags.shape[1]] = flags
        uncertain = _box_sum(padded, k) > 0.5
    uncertain &= depth <= r_max
    return UncertainMask(uncertain, k, t, float(r_max))


# ---------------------------------------------------------------------------
# Normal consistency


def pixel_rays(shape: tuple[int, int], intr: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions scaled to unit z, shape (H, W, 3)."""
    H, W = shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


@dataclass
class _Tangents:
    rays: np.ndarray
    tu: np.ndarray  # (H-2, W-2, 3)
    tv: np.ndarray
    nrm: np.ndarray  # tu x tv
    valid: np.ndarray  # (H-2, W-2) bool
    zx: np.ndarray
    zy: np.ndarray


def _tangents(z: np.ndarray, intr: Intrinsics, rays: np.ndarray | None = None) -> _Tangents:
    if rays is None:
        rays = pixel_rays(z.shape, intr)
    P = z[..., None] * rays
    tu = 0.5 * (P[1:-1, 2:] - P[1:-1, :-2])
    tv = 0.5 * (P[2:, 1:-1] - P[:-2, 1:-1])
    nrm = np.cross(tu, tv)
    nz = nrm[..., 2]
    valid = np.abs(nz) > 1e-12 * np.linalg.norm(nrm, axis=-1)
    safe = np.where(valid, nz, 1.0)
    zx = np.where(valid, -nrm[..., 0] / safe, 0.0)
    zy = np.where(valid, -nrm[..., 1] / safe, 0.0)
    return _Tangents(rays, tu, tv, nrm, valid, zx, zy)


def tangent_gradient(z: np.ndarray, intr: Intrinsics, p: tuple[int, int]) -> np.ndarray:
    """Rows dF/dx = (1, 0, dz/dx) and dF/dy = (0, 1, dz/dy) at pixel ``p``.

    ``p`` is (row, col). The slopes come from the cross product of the
    central-difference chords of the backprojected surface, which is exact
    for planar depth.
    """
    row, col = p
    H, W = z.shape
    if not (1 <= row < H - 1 and 1 <= col < W - 1):
        raise ValueError(f"pixel {p} lies on the image border")
    patch = np.asarray(z, dtype=np.float64)[row - 1 : row + 2, col - 1 : col + 2]
    sub = Intrinsics(intr.fx, intr.fy, intr.cx - (col - 1), intr.cy - (row - 1))
    tg = _tangents(patch, sub)
    if not tg.valid[0, 0]:
        raise ValueError(f"surface is edge-on to the camera at {p}")
    return np.array([[1.0, 0.0, tg.zx[0, 0]], [0.0, 1.0, tg.zy[0, 0]]])


def normals_from_depth(z: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Unit normals (-dz/dx, -dz/dy, 1)/norm on the interior, zeros on the border."""
    tg = _tangents(np.asarray(z, dtype=np.float64), intr)
    s = np.stack([-tg.zx, -tg.zy, np.ones_like(tg.zx)], axis=-1)
    s /= np.linalg.norm(s, axis=-1, keepdims=True)
    out = np.zeros(z.shape + (3,))
    out[1:-1, 1:-1] = s
    return out


def _l1_terms(z, normals, certain, intr, rays=None):
    tg = _tangents(z, intr, rays)
    n = normals[1:-1, 1:-1]
    r1 = n[..., 0] + tg.zx * n[..., 2]
    r2 = n[..., 1] + tg.zy * n[..., 2]
    w = certain[1:-1, 1:-1] * tg.valid
    return tg, n, r1, r2, w


def loss_L1(z: np.ndarray, normals: np.ndarray, certain: np.ndarray, intr: Intrinsics) -> float:
    """Mean squared projection of predicted normals onto the depth tangents.

    ``certain`` is the complement of the uncertain mask (1 keeps a pixel).
    Border pixels contribute nothing; the mean runs over all pixels.
    """
    z = np.asarray(z, dtype=np.float64)
    _, _, r1, r2, w = _l1_terms(z, normals, np.asarray(certain, dtype=np.float64), intr)
    return float(np.sum((r1 * r1 + r2 * r2) * w) / z.size)


def loss_L2(z: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(target, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    return float(np.mean(d * d))


def loss_and_grad(
    z: np.ndarray,
    target: np.ndarray,
    normals: np.ndarray,
    certain: np.ndarray,
    intr: Intrinsics,
    lambda1: float = 50.0,
    lambda2: float = 1.0,
    rays: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Combined loss lambda1*L1 + lambda2*L2 and its analytic gradient in z."""
    m = z.size
    tg, n, r1, r2, w = _l1_terms(z, normals, certain, intr, rays)
    l1 = np.sum((r1 * r1 + r2 * r2) * w) / m
    diff = z - target
    l2 = np.sum(diff * diff) / m

    # d(loss_p)/dN through zx = -Nx/Nz, zy = -Ny/Nz
    nx, ny, nz = tg.nrm[..., 0], tg.nrm[..., 1], np.where(tg.valid, tg.nrm[..., 2], 1.0)
    c1 = 2.0 * r1 * n[..., 2] * w
    c2 = 2.0 * r2 * n[..., 2] * w
    a = np.stack([-c1 / nz, -c2 / nz, (c1 * nx + c2 * ny) / (nz * nz)], axis=-1)
    g_tu = np.cross(tg.tv, a)
    g_tv = np.cross(a, tg.tu)
    rays = tg.rays

    g = np.zeros_like(z)
    g[1:-1, 2:] += 0.5 * np.sum(g_tu * rays[1:-1, 2:], axis=-1)
    g[1:-1, :-2] -= 0.5 * np.sum(g_tu * rays[1:-1, :-2], axis=-1)
    g[2:, 1:-1] += 0.5 * np.sum(g_tv * rays[2:, 1:-1], axis=-1)
    g[:-2, 1:-1] -= 0.5 * np.sum(g_tv * rays[:-2, 1:-1], axis=-1)
    grad = lambda1 * g / m + lambda2 * 2.0 * diff / m
    return float(lambda1 * l1 + lambda2 * l2), grad


@dataclass
class DepthOptState:
    z: np.ndarray
    lambda1: float = 50.0
    lambda2: float = 1.0
    learning_rate: float = 2e-4
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    history: list[float] = field(default_factory=list)

    def adam_update(self, grad: np.ndarray, min_depth: float = 1e-3) -> None:
        if self.m is None:
            self.m = np.zeros_like(self.z)
            self.v = np.zeros_like(self.z)
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        self.z = np.maximum(self.z - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps), min_depth)


def optimize_depth(
    filtered: np.ndarray,
    normals: np.ndarray,
    certain: np.ndarray,
    intr: Intrinsics,
    lambda1: float = 50.0,
    lambda2: float = 1.0,
    lr: float = 2e-4,
    iters: int = 1000,
    min_depth: float = 1e-3,
    return_state: bool = False,
):
    """Refine depth so its tangents agree with the predicted normals.

    Runs Adam on lambda1*L1 + lambda2*L2 starting from ``filtered`` and
    returns the iterate with the lowest loss, so the result never scores
    worse than the initialization.
    """
    filtered = np.asarray(filtered, dtype=np.float64)
    if np.any(filtered <= 0):
        raise ValueError("initial depth must be positive")
    certain = np.asarray(certain, dtype=np.float64)
    rays = pixel_rays(filtered.shape, intr)
    state = DepthOptState(filtered.copy(), lambda1, lambda2, lr, iters)
    best_loss, best_z = math.inf, state.z
    for it in range(iters + 1):
        loss, grad = loss_and_grad(state.z, filtered, normals, certain, intr, lambda1, lambda2, rays)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite loss {loss} at iteration {it}")
        state.history.append(loss)
        if loss < best_loss:
            best_loss, best_z = loss, state.z
        if it == iters:
            break
        state.adam_update(grad, min_depth)
    log.debug("depth optimization: loss %.6g -> %.6g", state.history[0], best_loss)
    if return_state:
        state.z = best_z
        return best_z, state
    return best_z
