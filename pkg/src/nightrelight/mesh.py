"""Triangle mesh construction from a refined depth map."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .scene_io import Intrinsics


class MeshError(ValueError):
    pass


SURFACE, BACKDROP, EGO_LIGHT, SKY = 0, 1, 2, 3


@dataclass
class TriangleMesh:
    """Camera-frame triangle mesh with per-face material and light attributes.

    Faces wind so that ``(v1 - v0) x (v2 - v0)`` points toward the camera on
    the visible surface.
    """

    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) int64
    albedo: np.ndarray = None  # (F, 3) linear RGB
    emission: np.ndarray = None  # (F, 3) XYZ radiance
    emissive: np.ndarray = None  # (F,) bool
    light_normal: np.ndarray = None  # (F, 3)
    category: np.ndarray = None  # (F,) LightCategory id, 0 = none
    light_instance: np.ndarray = None  # (F,)
    leaf: np.ndarray = None  # (F,) light-tree leaf index, -1 = none
    face_pixels: np.ndarray = None  # (F, 3) flat source-pixel index, -1 = none
    kind: np.ndarray = None  # (F,) SURFACE / BACKDROP / EGO_LIGHT / SKY
    meta: dict = field(default_factory=dict)

    _PER_FACE = ("albedo", "emission", "emissive", "light_normal", "category",
                 "light_instance", "leaf", "face_pixels", "kind")

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        F = len(self.faces)
        defaults = {
            "albedo": lambda: np.full((F, 3), 0.5),
            "emission": lambda: np.zeros((F, 3)),
            "emissive": lambda: np.zeros(F, dtype=bool),
            "light_normal": lambda: np.zeros((F, 3)),
            "category": lambda: np.zeros(F, dtype=np.int32),
            "light_instance": lambda: np.zeros(F, dtype=np.int32),
            "leaf": lambda: np.full(F, -1, dtype=np.int32),
            "face_pixels": lambda: np.full((F, 3), -1, dtype=np.int64),
            "kind": lambda: np.zeros(F, dtype=np.int8),
        }
        for name, make in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, make())

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw = {k: (v.copy() if isinstance(v, np.ndarray) else dict(v) if isinstance(v, dict) else v)
              for k, v in kw.items()}
        return TriangleMesh(**kw)

    def select_faces(self, keep: np.ndarray) -> "TriangleMesh":
        out = self.copy()
        out.faces = out.faces[keep]
        for name in self._PER_FACE:
            setattr(out, name, getattr(out, name)[keep])
        return out

    def concat(self, other: "TriangleMesh") -> "TriangleMesh":
        out = self.copy()
        off = len(self.vertices)
        out.vertices = np.vstack([self.vertices, other.vertices])
        out.faces = np.vstack([self.faces, other.faces + off])
        for name in self._PER_FACE:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, np.concatenate([a, b]))
        return out

    def face_normals(self, unit: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if unit:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (E, 2) and the number of faces sharing each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        edges, counts = np.unique(e, axis=0, return_counts=True)
        return edges, counts

    def boundary_edge_count(self) -> int:
        _, counts = self.edge_counts()
        return int(np.sum(counts == 1))

    def is_closed(self) -> bool:
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        edges, _ = self.edge_counts()
        return len(np.unique(self.faces)) - len(edges) + self.n_faces

    def write_ply(self, path: str | Path) -> None:
        """ASCII PLY with per-face albedo, emission and category properties."""
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(self.vertices)}\n")
            f.write("property float x\nproperty float y\nproperty float z\n")
            f.write(f"element face {self.n_faces}\n")
            f.write("property list uchar int vertex_indices\n")
            for c in ("albedo_r", "albedo_g", "albedo_b", "emit_x", "emit_y", "emit_z"):
                f.write(f"property float {c}\n")
            f.write("property uchar emissive\nproperty int category\nproperty uchar kind\n")
            f.write("end_header\n")
            for x, y, z in self.vertices:
                f.write(f"{x:.7g} {y:.7g} {z:.7g}\n")
            for i, (a, b, c) in enumerate(self.faces):
                al, em = self.albedo[i], self.emission[i]
                f.write(
                    f"3 {a} {b} {c} {al[0]:.6g} {al[1]:.6g} {al[2]:.6g} "
                    f"{em[0]:.6g} {em[1]:.6g} {em[2]:.6g} "
                    f"{int(self.emissive[i])} {int(self.category[i])} {int(self.kind[i])}\n"
                )


# ---------------------------------------------------------------------------


def backproject(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Lift every pixel to its camera-frame point: x = d * K^-1 (u, v, 1)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise MeshError("non-positive depth")
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack(
        [depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth], axis=-1
    )


def project(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([intr.fx * p[..., 0] / p[..., 2] + intr.cx, intr.fy * p[..., 1] / p[..., 2] + intr.cy], -1)


def triangulate_grid(grid: np.ndarray) -> TriangleMesh:
    """Two triangles per pixel quad, split along the diagonal of smaller depth jump."""
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[:2]
    if H < 2 or W < 2:
        raise MeshError("grid must be at least 2x2")
    idx = np.arange(H * W).reshape(H, W)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    z = grid[..., 2].ravel()
    split_ad = np.abs(z[a] - z[d]) <= np.abs(z[b] - z[c])
    t1 = np.where(split_ad[:, None], np.stack([a, c, d], 1), np.stack([a, c, b], 1))
    t2 = np.where(split_ad[:, None], np.stack([a, d, b], 1), np.stack([b, c, d], 1))
    faces = np.empty((2 * len(a), 3), dtype=np.int64)
    faces[0::2] = t1
    faces[1::2] = t2
    mesh = TriangleMesh(grid.reshape(-1, 3), faces)
    mesh.face_pixels = faces.copy()
    mesh.meta["grid_shape"] = (H, W)
    return mesh


def remove_spurious_faces(mesh: TriangleMesh, uncertain: np.ndarray | None, tau: float = 0.3) -> TriangleMesh:
    """Drop faces spanning a depth discontinuity or lying wholly in uncertain pixels.

    A face goes when max(z_i / z_j) over its vertices exceeds 1 + tau.
    """
    z = mesh.vertices[mesh.faces, 2]
    ratio = z.max(axis=1) / z.min(axis=1)
    drop = ratio > 1.0 + tau
    if uncertain is not None:
        flat = np.asarray(uncertain, dtype=bool).ravel()
        px = mesh.face_pixels
        has_px = np.all(px >= 0, axis=1)
        all_unc = np.zeros(mesh.n_faces, dtype=bool)
        all_unc[has_px] = np.all(flat[px[has_px]], axis=1)
        drop |= all_unc
    return mesh.select_faces(~drop)


def _split_bowtie_vertices(mesh: TriangleMesh) -> TriangleMesh:
    """Give each edge-connected face fan around a pinched vertex its own copy."""
    faces = mesh.faces
    he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = np.sort(he, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    boundary = he[counts[inv.ravel()] == 1]
    deg = np.bincount(boundary.ravel(), minlength=len(mesh.vertices))
    pinched = np.nonzero(deg > 2)[0]
    if len(pinched) == 0:
        return mesh
    out = mesh.copy()
    verts = [out.vertices]
    n_v = len(out.vertices)
    F = len(faces)
    for v in pinched:
        incident = np.nonzero(np.any(out.faces == v, axis=1))[0]
        # union-find over incident faces sharing an edge through v
        parent = {f: f for f in incident}

        def find(f):
            while parent[f] != f:
                parent[f] = parent[parent[f]]
                f = parent[f]
            return f

        owner = {}
        for f in incident:
            for u in out.faces[f]:
                if u == v:
                    continue
                if u in owner:
                    ra, rb = find(owner[u]), find(f)
                    if ra != rb:
                        parent[rb] = ra
                else:
                    owner[u] = f
        groups = {}
        for f in incident:
            groups.setdefault(find(f), []).append(f)
        for members in list(groups.values())[1:]:
            verts.append(out.vertices[v][None])
            for f in members:
                out.faces[f][out.faces[f] == v] = n_v
            n_v += 1
    out.vertices = np.vstack(verts)
    assert len(out.faces) == F
    return out


def restore_watertight(
    mesh: TriangleMesh, far_depth: float | None = None, backdrop_albedo: float = 0.05
) -> TriangleMesh:
    """Close every open component by extruding it back to a far backdrop.

    Each open component gets a copy of itself pushed along the camera rays
    to the plane z = far_depth (reversed winding) plus wall quads along its
    boundary loops, so the result is a closed 2-manifold. Closed components
    are left alone. ``far_depth`` defaults to 1.5x the deepest vertex.
    """
    edges, counts = mesh.edge_counts()
    if np.any(counts > 2):
        bad = edges[counts > 2][0]
        raise MeshError(f"non-manifold edge {tuple(bad)} shared by more than two faces")
    if np.all(counts == 2):
        return mesh
    if np.any(mesh.vertices[np.unique(mesh.faces), 2] <= 0):
        raise MeshError("vertices must lie in front of the camera")
    if far_depth is None:
        far_depth = 1.5 * float(mesh.vertices[:, 2].max())

    mesh = _split_bowtie_vertices(mesh)
    faces = mesh.faces
    F = len(faces)
    he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    he_face = np.tile(np.arange(F), 3)
    key = np.sort(he, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    is_boundary = counts[inv] == 1

    # face components through shared edges
    order = np.argsort(inv, kind="stable")
    inv_sorted = inv[order]
    pair_start = np.nonzero(np.r_[True, inv_sorted[1:] != inv_sorted[:-1]])[0]
    pair_len = np.diff(np.r_[pair_start, len(inv_sorted)])
    two = pair_start[pair_len == 2]
    fa, fb = he_face[order[two]], he_face[order[two + 1]]
    adj = coo_matrix((np.ones(len(fa)), (fa, fb)), shape=(F, F))
    _, comp = connected_components(adj, directed=False)
    open_comp = np.unique(comp[he_face[is_boundary]])
    ext = np.isin(comp, open_comp)

    ext_faces = faces[ext]
    used = np.unique(ext_faces)
    far_index = np.full(len(mesh.vertices), -1, dtype=np.int64)
    far_index[used] = len(mesh.vertices) + np.arange(len(used))
    pv = mesh.vertices[used]
    far_verts = pv * (far_depth / pv[:, 2])[:, None]

    back = far_index[ext_faces][:, [0, 2, 1]]
    bnd = he[is_boundary]
    a, b = bnd[:, 0], bnd[:, 1]
    walls = np.concatenate([
        np.stack([b, a, far_index[a]], 1),
        np.stack([b, far_index[a], far_index[b]], 1),
    ])
    new_faces = np.vstack([back, walls])
    add = TriangleMesh(np.zeros((0, 3)), new_faces)
    add.albedo[:] = backdrop_albedo
    add.kind[:] = BACKDROP
    out = mesh.concat(add)
    out.vertices = np.vstack([mesh.vertices, far_verts])
    out.faces = np.vstack([mesh.faces, new_faces])
    out.meta["far_depth"] = far_depth
    return out


def _majority(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise mode of an (F, 3) array and its count."""
    a, b, c = values[:, 0], values[:, 1], values[:, 2]
    ab, ac, bc = a == b, a == c, b == c
    mode = np.where(ab | ac, a, np.where(bc, b, a))
    count = np.where(ab & ac, 3, np.where(ab | ac | bc, 2, 1))
    return mode, count


def attach_materials(
    mesh: TriangleMesh,
    albedo: np.ndarray,
    light_category: np.ndarray,
    light_instance: np.ndarray | None = None,
    leaf_map: np.ndarray | None = None,
    sky_mask: np.ndarray | None = None,
) -> TriangleMesh:
    """Copy per-pixel materials and light labels onto the faces built from them.

    Albedo is averaged over a face's source pixels. Light category, light
    instance and leaf index are taken by majority vote: a face is tagged when
    more than half of its source pixels share one labelled (category,
    instance) pair. Tagged faces record their unit geometric normal as the
    emitter normal.
    """
    out = mesh.copy()
    px = out.face_pixels
    has = np.all(px >= 0, axis=1)
    p = px[has]
    flat_albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    out.albedo[has] = flat_albedo[p].mean(axis=1)

    cat = np.asarray(light_category).ravel()
    inst = np.zeros_like(cat) if light_instance is None else np.asarray(light_instance).ravel()
    pair = cat[p].astype(np.int64) * 65536 + inst[p]
    mode, count = _majority(pair)
    mode_cat = mode // 65536
    tagged = (count >= 2) & (mode_cat != 0)
    idx = np.nonzero(has)[0]
    out.category[idx] = np.where(tagged, mode_cat, 0)
    out.light_instance[idx] = np.where(tagged, mode % 65536, 0)
    if leaf_map is not None:
        lv, lc = _majority(np.asarray(leaf_map).ravel()[p])
        out.leaf[idx] = np.where(tagged & (lc >= 2), lv, -1)
    normals = out.face_normals()
    t_idx = idx[tagged]
    out.light_normal[t_idx] = normals[t_idx]
    if sky_mask is not None:
        sky = np.asarray(sky_mask, dtype=bool).ravel()[p].sum(axis=1) >= 2
        out.kind[idx[sky & ~tagged]] = SKY
    return out


def build_scene_mesh(
    depth: np.ndarray,
    intr: Intrinsics,
    uncertain: np.ndarray | None = None,
    tau: float = 0.3,
    far_factor: float = 1.5,
    backdrop_albedo: float = 0.05,
    postprocess: bool = True,
) -> TriangleMesh:
    """Backproject, triangulate and (optionally) clean and close the mesh."""
    mesh = triangulate_grid(backproject(depth, intr))
    if postprocess:
        mesh = remove_spurious_faces(mesh, uncertain, tau)
        mesh = restore_watertight(mesh, far_factor * float(np.max(depth)), backdrop_albedo)
    return mesh
