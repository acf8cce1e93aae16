"""Semantic light-source tree and stochastic light attributes.

Every light-source component in the light mask becomes a leaf. Leaves hang
under a group derived from the enclosing object instance (a vehicle, a floor
of a building, a traffic-light pole) or directly under the root. Attributes
are drawn from per-category distributions using Philox streams keyed by the
global seed and the name of the sampling unit, so results do not depend on
traversal order.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .mesh import EGO_LIGHT, TriangleMesh
from .scene_io import LightCategory as LC

VEHICLES = ("car", "bus", "tram", "truck", "motorcycle", "bicycle")
ROOT = "root"
WHITE_XY = (1.0 / 3.0, 1.0 / 3.0)

# label used for the chromaticity / strength tables
_CHROMA_LABEL = {
    LC.WINDOW_BUILDING: "window_building",
    LC.WINDOW_PARKED: "window_parked",
    LC.WINDOW_TRANSPORT: "window_transport",
    LC.STREET_LIGHT_HT: "street_light_HT",
    LC.STREET_LIGHT_LT: "street_light_LT",
    LC.FRONT_LIGHT: "front_light",
    LC.MOVING_FRONT: "front_light",
    LC.PARKED_FRONT: "front_light",
    LC.REAR_LIGHT: "rear_light",
    LC.MOVING_REAR: "rear_light",
    LC.PARKED_REAR: "rear_light",
    LC.ADVERTISEMENT: "advertisement",
    LC.INFERRED: "inferred",
    LC.CLOCK: "clock",
}


class LightConfigError(KeyError):
    pass


def _data(name: str) -> dict:
    return json.loads(resources.files("nightrelight.data").joinpath(name).read_text())


# ---------------------------------------------------------------------------
# Tables


class IlluminantDB(dict):
    """Category name -> list of (x, y) chromaticity samples."""

    def __init__(self, samples: dict):
        super().__init__({k: [tuple(map(float, s)) for s in v] for k, v in samples.items()})
        for cat, items in self.items():
            if not items:
                raise ValueError(f"illuminant category {cat!r} has no samples")
            for x, y in items:
                if not (x > 0 and y > 0 and x + y < 1):
                    raise ValueError(f"invalid chromaticity ({x}, {y}) for {cat!r}")

    @classmethod
    def default(cls) -> "IlluminantDB":
        return cls(_data("illuminants.json"))

    @classmethod
    def load(cls, path: str | Path) -> "IlluminantDB":
        return cls(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({k: [list(s) for s in v] for k, v in self.items()}, indent=1))

    def samples(self, label: str) -> list[tuple[float, float]]:
        if label in self:
            return self[label]
        if label == "clock" and "inferred" in self:
            return self["inferred"]
        raise LightConfigError(f"category {label!r} absent from illuminant database")


class BoundsTable(dict):
    """(group type, light label) -> activation interval (a, b)."""

    def __init__(self, rows):
        super().__init__()
        for row in rows:
            a, b = map(float, row["bounds"])
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"invalid bounds {row}")
            self[(row["group"], row["light"])] = (a, b)

    @classmethod
    def default(cls) -> "BoundsTable":
        return cls(_data("bounds.json")["rows"])

    @classmethod
    def load(cls, path: str | Path) -> "BoundsTable":
        return cls(json.loads(Path(path).read_text())["rows"])

    def lookup(self, group_type: str, label: str) -> tuple[float, float]:
        """Interval for a light in a group, falling back to the N/A row and then
        to any row with the same light label."""
        for key in ((group_type, label), ("N/A", label)):
            if key in self:
                return self[key]
        for (_, light), bounds in self.items():
            if light == label:
                return bounds
        raise LightConfigError(f"no activation bounds for {label!r} in group {group_type!r}")


@dataclass
class LightConfig:
    strength: dict[str, tuple[float, float]]
    uniform_strength: float = 20.0
    ego_enabled: bool = True
    ego_offset: tuple[float, float, float] = (0.7, 0.6, -0.5)
    ego_size: tuple[float, float] = (0.25, 0.12)
    ego_strength: float = 60.0
    floor_gap: float | None = None  # px between window rows that starts a new floor

    @classmethod
    def default(cls) -> "LightConfig":
        d = _data("lights.json")
        return cls({k: tuple(v) for k, v in d["strength"].items()}, d["uniform_strength"])

    def interval(self, label: str) -> tuple[float, float]:
        if label not in self.strength and label == "clock":
            label = "inferred"
        if label not in self.strength:
            raise LightConfigError(f"no strength interval configured for {label!r}")
        lo, hi = self.strength[label]
        if not 0 < lo <= hi:
            raise ValueError(f"invalid strength interval {(lo, hi)} for {label!r}")
        return lo, hi


# ---------------------------------------------------------------------------
# Tree


@dataclass
class LightLeaf:
    index: int
    key: str
    category: int
    light_instance: int
    parent_instance: int
    group: str
    pixels: np.ndarray  # flat pixel indices
    moving: bool = False
    faces: np.ndarray | None = None
    # sampled attributes
    traffic_state: str | None = None
    y: float | None = None
    active: bool | None = None
    chromaticity: tuple[float, float] | None = None
    strength: float | None = None
    emission: tuple[float, float, float] | None = None

    @property
    def chroma_label(self) -> str:
        if self.category == LC.TRAFFIC_LIGHT:
            return f"traffic_light_{self.traffic_state or 'G'}"
        return _CHROMA_LABEL[LC(self.category)]

    @property
    def bounds_label(self) -> str:
        cat = LC(self.category)
        if cat == LC.FRONT_LIGHT:
            return "moving_front" if self.moving else "parked_front"
        if cat == LC.REAR_LIGHT:
            return "moving_rear" if self.moving else "parked_rear"
        if cat in (LC.MOVING_FRONT, LC.PARKED_FRONT, LC.MOVING_REAR, LC.PARKED_REAR):
            return cat.name.lower()
        return self.chroma_label

    @property
    def centroid_row(self) -> float:
        return float(np.mean(self.pixels // self._width)) if len(self.pixels) else 0.0

    _width: int = 1


@dataclass
class LightGroup:
    id: str
    group_type: str  # bounds-table group column: "N/A", "car", "building floor", ...
    instance: int = 0
    parent: str | None = ROOT
    children: list[int] = field(default_factory=list)


@dataclass
class LightTree:
    groups: dict[str, LightGroup]
    leaves: list[LightLeaf]
    leaf_map: np.ndarray  # (H, W) leaf index, -1 = none

    def group_of(self, leaf: LightLeaf) -> LightGroup:
        return self.groups[leaf.group]

    def is_acyclic(self) -> bool:
        for g in self.groups.values():
            seen, cur = set(), g.id
            while cur is not None:
                if cur in seen:
                    return False
                seen.add(cur)
                cur = self.groups[cur].parent
        return True


def _floor_bands(rows: list[float], gap: float) -> list[int]:
    order = np.argsort(rows, kind="stable")
    labels = [0] * len(rows)
    band, last = 0, None
    for i in order:
        if last is not None and rows[i] - last > gap:
            band += 1
        labels[i] = band
        last = rows[i]
    return labels


def build_light_tree(
    light_category: np.ndarray,
    light_instance: np.ndarray | None,
    instance_mask: np.ndarray,
    instance_classes: dict[int, str] | None = None,
    moving_instances=frozenset(),
    mesh: TriangleMesh | None = None,
    floor_gap: float | None = None,
) -> LightTree:
    """Group light-source components under the objects that carry them.

    Leaves are 4-connected components of equal (category, light instance).
    A leaf's parent instance is the majority instance id under it. Vehicle
    instances form one group each; windows on a building are split into
    floor groups by clustering their centroid rows (a new floor starts when
    the gap exceeds ``floor_gap`` px, by default 1.5x the median window
    height); traffic lights on a common instance share a group; all other
    leaves hang under the root.
    """
    cat = np.asarray(light_category)
    H, W = cat.shape
    inst_l = np.zeros_like(cat) if light_instance is None else np.asarray(light_instance)
    inst = np.asarray(instance_mask)
    classes = instance_classes or {}
    groups = {ROOT: LightGroup(ROOT, "N/A", parent=None)}
    leaves: list[LightLeaf] = []
    leaf_map = np.full((H, W), -1, dtype=np.int32)

    pairs = np.unique(np.stack([cat.ravel(), inst_l.ravel()], 1), axis=0)
    for c, li in pairs:
        if c == 0:
            continue
        comp, n = ndimage.label((cat == c) & (inst_l == li))
        for k in range(1, n + 1):
            pix = np.flatnonzero(comp == k)
            parent = int(np.bincount(inst.ravel()[pix]).argmax())
            leaf = LightLeaf(
                index=len(leaves), key=f"{int(c)}:{int(li)}:{k}", category=int(c),
                light_instance=int(li), parent_instance=parent, group=ROOT, pixels=pix,
                moving=parent in moving_instances,
            )
            leaf._width = W
            leaf_map.ravel()[pix] = leaf.index
            leaves.append(leaf)

    windows: dict[int, list[LightLeaf]] = {}
    for leaf in leaves:
        klass = classes.get(leaf.parent_instance, "unknown")
        if leaf.parent_instance and klass in VEHICLES:
            gid = f"{klass}:{leaf.parent_instance}"
            groups.setdefault(gid, LightGroup(gid, klass, leaf.parent_instance))
            leaf.group = gid
        elif leaf.parent_instance and klass == "building" and leaf.category == LC.WINDOW_BUILDING:
            windows.setdefault(leaf.parent_instance, []).append(leaf)
        elif leaf.parent_instance and leaf.category == LC.TRAFFIC_LIGHT:
            gid = f"traffic_light:{leaf.parent_instance}"
            groups.setdefault(gid, LightGroup(gid, "N/A", leaf.parent_instance))
            leaf.group = gid

    for b_inst, members in sorted(windows.items()):
        rows = [m.centroid_row for m in members]
        heights = [np.ptp(m.pixels // W) + 1 for m in members]
        gap = floor_gap if floor_gap is not None else 1.5 * float(np.median(heights))
        for m, band in zip(members, _floor_bands(rows, gap)):
            gid = f"building:{b_inst}/floor:{band}"
            groups.setdefault(gid, LightGroup(gid, "building floor", b_inst))
            m.group = gid

    for leaf in leaves:
        groups[leaf.group].children.append(leaf.index)
    tree = LightTree(groups, leaves, leaf_map)
    if mesh is not None:
        bind_mesh(tree, mesh)
    return tree


def bind_mesh(tree: LightTree, mesh: TriangleMesh) -> None:
    """Record on each leaf the mesh faces whose source pixels it covers."""
    px = mesh.face_pixels
    has = np.all(px >= 0, axis=1)
    votes = tree.leaf_map.ravel()[np.where(has[:, None], px, 0)]
    votes[~has] = -1
    a, b, c = votes.T
    mode = np.where((a == b) | (a == c), a, np.where(b == c, b, -1))
    for leaf in tree.leaves:
        leaf.faces = np.flatnonzero(mode == leaf.index)


# ---------------------------------------------------------------------------
# Sampling


def _stream(seed: int, unit: str) -> np.random.Generator:
    h = int.from_bytes(hashlib.blake2b(unit.encode(), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), h]))


def sample_activation(bounds: tuple[float, float], rng: np.random.Generator) -> tuple[float, bool]:
    """Draw y ~ Uniform(a, b), then X ~ Bernoulli(y). Returns (y, X)."""
    a, b = bounds
    if not 0.0 <= a <= b <= 1.0:
        raise ValueError(f"invalid bounds {bounds}")
    y = a + (b - a) * rng.random()
    return y, bool(rng.random() < y)


def sample_chromaticity(label: str, db: IlluminantDB, rng: np.random.Generator) -> tuple[float, float]:
    items = db.samples(label)
    return items[int(rng.integers(len(items)))]


def sample_strength(label: str, config: LightConfig, rng: np.random.Generator) -> float:
    lo, hi = config.interval(label)
    return lo + (hi - lo) * rng.random()


def chromaticity_to_xyz(xy: tuple[float, float], Y: float) -> tuple[float, float, float]:
    x, y = xy
    return (Y * x / y, Y, Y * (1.0 - x - y) / y)


def _sharing_units(tree: LightTree, leaf: LightLeaf) -> tuple[str, str]:
    """Unit names for (activation, colour/strength) draws."""
    group = tree.group_of(leaf)
    own = f"leaf:{leaf.key}"
    if group.id == ROOT:
        return own, own
    shared = f"{group.id}|{leaf.bounds_label}"
    if group.group_type == "building floor":
        return own, shared
    return shared, shared


def instantiate(
    tree: LightTree,
    db: IlluminantDB,
    bounds: BoundsTable,
    config: LightConfig,
    seed: int,
    randomize: bool = True,
) -> LightTree:
    """Assign activation, chromaticity, strength and XYZ emission to every leaf.

    Leaves sharing a group (and light label) share draws. Traffic-light
    groups pick one of the G/R/O states uniformly. With ``randomize=False``
    every light is on, white, and has ``config.uniform_strength``.
    """
    out = copy.deepcopy(tree)
    for leaf in out.leaves:
        act_unit, col_unit = _sharing_units(out, leaf)
        group = out.group_of(leaf)
        if not randomize:
            leaf.traffic_state = "G" if leaf.category == LC.TRAFFIC_LIGHT else None
            leaf.y, leaf.active = 1.0, True
            leaf.chromaticity, leaf.strength = WHITE_XY, float(config.uniform_strength)
        else:
            if leaf.category == LC.TRAFFIC_LIGHT:
                unit = col_unit if group.id != ROOT else f"leaf:{leaf.key}"
                leaf.traffic_state = "GRO"[int(_stream(seed, unit + "/state").integers(3))]
            leaf.y, leaf.active = sample_activation(
                bounds.lookup(group.group_type, leaf.bounds_label), _stream(seed, act_unit + "/activation")
            )
            leaf.chromaticity = sample_chromaticity(leaf.chroma_label, db, _stream(seed, col_unit + "/chroma"))
            leaf.strength = sample_strength(leaf.chroma_label, config, _stream(seed, col_unit + "/strength"))
        leaf.emission = chromaticity_to_xyz(leaf.chromaticity, leaf.strength)
    return out


def apply_lights(tree: LightTree, mesh: TriangleMesh) -> TriangleMesh:
    """Mark faces of active leaves emissive with their leaf's XYZ emission."""
    out = mesh.copy()
    normals = out.face_normals()
    if any(leaf.faces is None for leaf in tree.leaves):
        bind_mesh(tree, out)
    for leaf in tree.leaves:
        f = leaf.faces
        out.leaf[f] = leaf.index
        out.category[f] = leaf.category
        out.light_normal[f] = normals[f]
        if leaf.active:
            out.emissive[f] = True
            out.emission[f] = leaf.emission
    return out


def add_ego_headlights(config: LightConfig, db: IlluminantDB | None = None) -> TriangleMesh:
    """Two rectangular emitters mirrored in x behind the camera, facing +z."""
    if not config.ego_enabled:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    xy = (db or IlluminantDB.default()).samples("front_light")[0]
    emission = chromaticity_to_xyz(xy, config.ego_strength)
    ox, oy, oz = config.ego_offset
    w, h = config.ego_size
    verts, faces = [], []
    for sx in (-1.0, 1.0):
        cx = sx * ox
        base = len(verts)
        verts += [
            (cx - w / 2, oy - h / 2, oz), (cx + w / 2, oy - h / 2, oz),
            (cx + w / 2, oy + h / 2, oz), (cx - w / 2, oy + h / 2, oz),
        ]
        # x then y edges give a +z geometric normal
        faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
    mesh = TriangleMesh(np.array(verts), np.array(faces))
    mesh.emissive[:] = True
    mesh.emission[:] = emission
    mesh.light_normal[:] = (0.0, 0.0, 1.0)
    mesh.albedo[:] = 0.0
    mesh.kind[:] = EGO_LIGHT
    mesh.category[:] = LC.FRONT_LIGHT
    return mesh


def hoeffding_halfwidth(n: int, confidence: float = 0.99) -> float:
    return math.sqrt(math.log(2.0 / (1.0 - confidence)) / (2.0 * n))
