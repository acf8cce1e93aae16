"""Bounding volume hierarchy over triangles, built with a binned SAH."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

N_BINS = 16
MAX_LEAF = 4


@numba.njit(cache=True)
def _area(lo, hi):
    dx = max(hi[0] - lo[0], 0.0)
    dy = max(hi[1] - lo[1], 0.0)
    dz = max(hi[2] - lo[2], 0.0)
    return 2.0 * (dx * dy + dy * dz + dz * dx)


@numba.njit(cache=True)
def _build(bmin, bmax, cent, max_leaf, n_bins):
    n = cent.shape[0]
    prims = np.arange(n)
    cap = max(1, 2 * n)
    nmin = np.zeros((cap, 3))
    nmax = np.zeros((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    first = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    if n == 0:
        return nmin[:1], nmax[:1], left[:1], right[:1], first[:1], count[:1], prims

    stack = np.empty((cap, 3), dtype=np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    bin_lo = np.empty((n_bins, 3))
    bin_hi = np.empty((n_bins, 3))
    bin_n = np.zeros(n_bins, dtype=np.int64)
    right_area = np.empty(n_bins)
    right_n = np.empty(n_bins, dtype=np.int64)
    lo = np.empty(3)
    hi = np.empty(3)
    clo = np.empty(3)
    chi = np.empty(3)

    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        for k in range(3):
            lo[k] = np.inf
            hi[k] = -np.inf
            clo[k] = np.inf
            chi[k] = -np.inf
        for i in range(s, e):
            p = prims[i]
            for k in range(3):
                lo[k] = min(lo[k], bmin[p, k])
                hi[k] = max(hi[k], bmax[p, k])
                clo[k] = min(clo[k], cent[p, k])
                chi[k] = max(chi[k], cent[p, k])
        for k in range(3):
            nmin[node, k] = lo[k]
            nmax[node, k] = hi[k]
        cnt = e - s
        if cnt <= max_leaf:
            first[node] = s
            count[node] = cnt
            continue

        best_cost = np.inf
        best_axis = -1
        best_split = -1
        for axis in range(3):
            extent = chi[axis] - clo[axis]
            if extent <= 1e-12:
                continue
            for b in range(n_bins):
                bin_n[b] = 0
                for k in range(3):
                    bin_lo[b, k] = np.inf
                    bin_hi[b, k] = -np.inf
            scale = n_bins / extent
            for i in range(s, e):
                p = prims[i]
                b = min(n_bins - 1, int((cent[p, axis] - clo[axis]) * scale))
                bin_n[b] += 1
                for k in range(3):
                    bin_lo[b, k] = min(bin_lo[b, k], bmin[p, k])
                    bin_hi[b, k] = max(bin_hi[b, k], bmax[p, k])
            # suffix sweep
            acc_lo = np.full(3, np.inf)
            acc_hi = np.full(3, -np.inf)
            acc_n = 0
            for b in range(n_bins - 1, 0, -1):
                acc_n += bin_n[b]
                for k in range(3):
                    acc_lo[k] = min(acc_lo[k], bin_lo[b, k])
                    acc_hi[k] = max(acc_hi[k], bin_hi[b, k])
                right_area[b] = _area(acc_lo, acc_hi) if acc_n > 0 else 0.0
                right_n[b] = acc_n
            acc_lo[:] = np.inf
            acc_hi[:] = -np.inf
            acc_n = 0
            for b in range(0, n_bins - 1):
                acc_n += bin_n[b]
                for k in range(3):
                    acc_lo[k] = min(acc_lo[k], bin_lo[b, k])
                    acc_hi[k] = max(acc_hi[k], bin_hi[b, k])
                if acc_n == 0 or right_n[b + 1] == 0:
                    continue
                cost = _area(acc_lo, acc_hi) * acc_n + right_area[b + 1] * right_n[b + 1]
                if cost < best_cost:
                    best_cost = cost
                    best_axis = axis
                    best_split = b + 1

        mid = -1
        if best_axis >= 0:
            scale = n_bins / (chi[best_axis] - clo[best_axis])
            i = s
            j = e - 1
            while i <= j:
                p = prims[i]
                b = min(n_bins - 1, int((cent[p, best_axis] - clo[best_axis]) * scale))
                if b < best_split:
                    i += 1
                else:
                    prims[i] = prims[j]
                    prims[j] = p
                    j -= 1
            mid = i
        if mid <= s or mid >= e:
            # all centroids coincide: split by count
            mid = (s + e) // 2

        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        stack[sp, 0] = l_node
        stack[sp, 1] = s
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = r_node
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1

    return (nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes],
            first[:n_nodes], count[:n_nodes], prims)


@dataclass
class BVH:
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    prims: np.ndarray  # leaf slots -> triangle index

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def depth(self) -> int:
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.count[node] == 0 and self.left[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best


def build_bvh(tri: np.ndarray, max_leaf: int = MAX_LEAF, n_bins: int = N_BINS) -> BVH:
    """Build over triangles given as (F, 3, 3) vertex positions."""
    tri = np.ascontiguousarray(tri, dtype=np.float64).reshape(-1, 3, 3)
    bmin = tri.min(axis=1)
    bmax = tri.max(axis=1)
    cent = tri.mean(axis=1)
    return BVH(*_build(bmin, bmax, cent, max_leaf, n_bins))


@numba.njit(inline="always")
def ray_box(ox, oy, oz, ix, iy, iz, lo, hi, tmax):
    t0 = (lo[0] - ox) * ix
    t1 = (hi[0] - ox) * ix
    tn = min(t0, t1)
    tf = max(t0, t1)
    t0 = (lo[1] - oy) * iy
    t1 = (hi[1] - oy) * iy
    tn = max(tn, min(t0, t1))
    tf = min(tf, max(t0, t1))
    t0 = (lo[2] - oz) * iz
    t1 = (hi[2] - oz) * iz
    tn = max(tn, min(t0, t1))
    tf = min(tf, max(t0, t1))
    if tf >= max(tn, 0.0) and tn < tmax:
        return max(tn, 0.0)
    return np.inf


@numba.njit(inline="always")
def ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2):
    """Moller-Trumbore; returns (t, b1, b2) or t = inf."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-300:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    b1 = (tx * px + ty * py + tz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= 0.0:
        return np.inf, 0.0, 0.0
    return t, b1, b2


@numba.njit(cache=True)
def intersect(ox, oy, oz, dx, dy, dz, tmax, any_hit,
              nmin, nmax, left, right, first, count, prims, v0, e1, e2):
    """Closest (or any, if ``any_hit``) hit before ``tmax``; returns (t, face)."""
    ix = 1.0 / dx if dx != 0.0 else 1e300
    iy = 1.0 / dy if dy != 0.0 else 1e300
    iz = 1.0 / dz if dz != 0.0 else 1e300
    best_t = tmax
    best_f = -1
    if prims.shape[0] == 0:
        return best_t, best_f
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    if ray_box(ox, oy, oz, ix, iy, iz, nmin[0], nmax[0], best_t) == np.inf:
        return best_t, best_f
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        c = count[node]
        if c > 0:
            for k in range(first[node], first[node] + c):
                f = prims[k]
                t, b1, b2 = ray_triangle(ox, oy, oz, dx, dy, dz, v0[f], e1[f], e2[f])
                if t < best_t:
                    best_t = t
                    best_f = f
                    if any_hit:
                        return best_t, best_f
            continue
        l = left[node]
        r = right[node]
        tl = ray_box(ox, oy, oz, ix, iy, iz, nmin[l], nmax[l], best_t)
        tr = ray_box(ox, oy, oz, ix, iy, iz, nmin[r], nmax[r], best_t)
        if tl < tr:
            if tr != np.inf:
                stack[sp] = r
                sp += 1
            stack[sp] = l
            sp += 1
        else:
            if tl != np.inf:
                stack[sp] = l
                sp += 1
            if tr != np.inf:
                stack[sp] = r
                sp += 1
    return best_t, best_f
