"""End-to-end day-to-night relighting: configuration, single runs and batches.

A run goes through six stages, each of which records a SHA-256 digest of
its output in the run manifest::

    scene_io -> depth_refine -> mesh_builder -> light_instantiation
             -> path_tracer -> isp_post

Three switches reproduce the ablation rows. Turning off ``geometric`` feeds
the raw depth straight into triangulation with no mesh clean-up. Turning off
``lights_inst`` switches every light on, white, at one uniform strength.
Turning off ``image_post_proc`` skips glare and noise.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from PIL import Image

from . import depth_refine as dr
from .isp import GlareConfig, IspConfig, run_isp
from .lights import (
    WHITE_XY,
    BoundsTable,
    IlluminantDB,
    LightConfig,
    add_ego_headlights,
    apply_lights,
    build_light_tree,
    chromaticity_to_xyz,
    instantiate,
)
from .mesh import SKY, TriangleMesh, attach_materials, build_scene_mesh
from .scene_io import SceneBundle, load_scene_bundle, write_image, write_pfm
from .tracer import render

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("scene_io", "depth_refine", "mesh_builder", "light_instantiation", "path_tracer", "isp_post")

# id -> (geometric, lights_inst, image_post_proc)
ABLATION_ROWS = {
    0: (False, False, False),
    1: (True, False, False),
    2: (False, True, False),
    3: (True, True, False),
    4: (True, True, True),
}
ABLATE_ALIASES = {"geometric": "geometric", "lights": "lights_inst", "lights_inst": "lights_inst",
                  "isp": "image_post_proc", "image_post_proc": "image_post_proc"}


class PipelineError(RuntimeError):
    """A stage failure; ``stage`` names where it happened."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DepthParams:
    sigma_s: float = 5.0
    k: int = 10
    t: float = 0.01
    r_max: float | None = None
    lambda1: float = 50.0
    lambda2: float = 1.0
    lr: float = 2e-4
    iters: int = 1000


@dataclass
class MeshParams:
    tau: float = 0.3
    far_factor: float = 1.5
    backdrop_albedo: float = 0.05


@dataclass
class LightParams:
    bounds: str | None = None
    illuminants: str | None = None
    strengths: str | None = None
    sky_fraction: float = 0.001
    ego_enabled: bool = True
    ego_strength: float = 60.0


@dataclass
class RenderParams:
    spp: int = 256
    max_bounces: int = 4
    rr_depth: int = 3


@dataclass
class Ablation:
    geometric: bool = True
    lights_inst: bool = True
    image_post_proc: bool = True

    @classmethod
    def row(cls, i: int) -> "Ablation":
        return cls(*ABLATION_ROWS[i])


@dataclass
class PipelineConfig:
    seed: int = 0
    depth: DepthParams = field(default_factory=DepthParams)
    mesh: MeshParams = field(default_factory=MeshParams)
    lights: LightParams = field(default_factory=LightParams)
    render: RenderParams = field(default_factory=RenderParams)
    isp: IspConfig = field(default_factory=IspConfig)
    ablation: Ablation = field(default_factory=Ablation)
    base_dir: str = "."  # resolves relative data paths; not hashed

    _SECTIONS = {"depth": DepthParams, "mesh": MeshParams, "lights": LightParams,
                 "render": RenderParams, "ablation": Ablation}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        cfg = cls(base_dir=str(base_dir))
        return cfg.updated(d)

    def updated(self, d: dict) -> "PipelineConfig":
        """Copy with the values of a (possibly partial) nested dict applied."""
        out = copy.deepcopy(self)
        for key, value in d.items():
            if key == "seed":
                out.seed = int(value)
            elif key in self._SECTIONS:
                section = getattr(out, key)
                _apply(section, value, key)
            elif key == "isp":
                value = dict(value)
                glare = value.pop("glare", None)
                _apply(out.isp, value, "isp")
                if glare is not None:
                    g = dataclasses.asdict(out.isp.glare) | glare
                    out.isp.glare = GlareConfig(g["threshold"], tuple(g["sigmas"]), tuple(g["weights"]))
                IspConfig.__post_init__(out.isp)
            elif key == "base_dir":
                out.base_dir = str(value)
            else:
                raise ValueError(f"unknown config section {key!r}")
        return out

    @classmethod
    def from_file(cls, path: str | Path, profile: str | None = None) -> "PipelineConfig":
        """Load a TOML or JSON config; ``[defaults]`` first, then ``profile``."""
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        cfg = cls(base_dir=str(path.parent))
        cfg = cfg.updated(data["defaults"] if "defaults" in data else data)
        if profile is not None:
            if profile not in data:
                raise ValueError(f"profile {profile!r} not in {path}")
            cfg = cfg.updated(data[profile])
        return cfg

    @classmethod
    def packaged_defaults(cls) -> "PipelineConfig":
        with resources.as_file(resources.files("nightrelight") / "data" / "defaults.toml") as p:
            return cls.from_file(p)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_ablation(self, ablation: Ablation | int) -> "PipelineConfig":
        out = copy.deepcopy(self)
        out.ablation = Ablation.row(ablation) if isinstance(ablation, int) else ablation
        return out

    def ablate(self, names) -> "PipelineConfig":
        """Switch off component sets named like ``geometric,lights,isp``."""
        if isinstance(names, str):
            names = [n for n in names.split(",") if n.strip()]
        out = copy.deepcopy(self)
        for n in names:
            key = ABLATE_ALIASES.get(n.strip())
            if key is None:
                raise ValueError(f"unknown component set {n!r}")
            setattr(out.ablation, key, False)
        return out

    def _path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _apply(obj, values: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for k, v in values.items():
        if k not in names:
            raise ValueError(f"unknown key {where}.{k}")
        setattr(obj, k, v)


# ---------------------------------------------------------------------------
# Seeds and digests


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed from a parent seed and labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for p in parts:
        h.update(b"\x00" + str(p).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            h.update(b"none")
            continue
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _mesh_digest(m: TriangleMesh) -> str:
    return digest(m.vertices, m.faces, m.albedo, m.kind, m.category)


# ---------------------------------------------------------------------------
# Single run


@dataclass
class RunResult:
    image: np.ndarray  # (H, W, 3) uint8 sRGB
    manifest: dict
    intermediates: dict = field(default_factory=dict)


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 4)
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


def light_setup(cfg: PipelineConfig) -> tuple[IlluminantDB, BoundsTable, LightConfig]:
    lp = cfg.lights
    db = IlluminantDB.load(cfg._path(lp.illuminants)) if lp.illuminants else IlluminantDB.default()
    bounds = BoundsTable.load(cfg._path(lp.bounds)) if lp.bounds else BoundsTable.default()
    lcfg = LightConfig.default()
    if lp.strengths:
        d = json.loads(cfg._path(lp.strengths).read_text())
        lcfg = LightConfig({k: tuple(v) for k, v in d["strength"].items()},
                           d.get("uniform_strength", lcfg.uniform_strength))
    lcfg.ego_enabled = lp.ego_enabled
    lcfg.ego_strength = lp.ego_strength
    return db, bounds, lcfg


def sky_radiance(cfg: PipelineConfig, lcfg: LightConfig) -> tuple[float, float, float]:
    """Dim white sky: a fraction of a mid-interval street light."""
    lo, hi = lcfg.interval("street_light_HT")
    return chromaticity_to_xyz(WHITE_XY, cfg.lights.sky_fraction * 0.5 * (lo + hi))


def run(
    config: PipelineConfig,
    scene: str | Path | dict | SceneBundle,
    out_dir: str | Path | None = None,
    dump_intermediates: bool = False,
    seed: int | None = None,
) -> RunResult:
    """Relight one scene. Deterministic for a given (config, seed)."""
    cfg = config
    seed = cfg.seed if seed is None else int(seed)
    flags = cfg.ablation
    timings: dict[str, float] = {}
    stages: dict[str, str] = {}
    inter: dict = {}

    with _Stage("scene_io", timings):
        bundle = scene if isinstance(scene, SceneBundle) else load_scene_bundle(scene)
        intr = bundle.intrinsics
        stages["scene_io"] = digest(bundle.daytime_image, bundle.depth, bundle.normals, bundle.albedo,
                                    bundle.instance_mask, bundle.light_category, bundle.light_instance)

    with _Stage("depth_refine", timings):
        dp = cfg.depth
        uncertain = None
        if flags.geometric:
            filtered = dr.cross_bilateral_filter(bundle.depth, bundle.instance_mask, sigma_s=dp.sigma_s)
            umask = dr.detect_uncertain_regions(bundle.depth, bundle.instance_mask, dp.k, dp.t, dp.r_max)
            uncertain = umask.uncertain
            depth = dr.optimize_depth(filtered, bundle.normals, umask.certain, intr,
                                      dp.lambda1, dp.lambda2, dp.lr, dp.iters)
            inter.update(depth_filtered=filtered, uncertain=uncertain)
        else:
            depth = bundle.depth
        inter["depth"] = depth
        stages["depth_refine"] = digest(depth, uncertain)

    with _Stage("mesh_builder", timings):
        mp = cfg.mesh
        mesh = build_scene_mesh(depth, intr, uncertain, mp.tau, mp.far_factor, mp.backdrop_albedo,
                                postprocess=flags.geometric)
        mesh = attach_materials(mesh, bundle.albedo, bundle.light_category, bundle.light_instance,
                                sky_mask=bundle.sky_mask)
        inter["mesh"] = mesh
        stages["mesh_builder"] = _mesh_digest(mesh)

    with _Stage("light_instantiation", timings):
        db, bounds, lcfg = light_setup(cfg)
        tree = build_light_tree(bundle.light_category, bundle.light_instance, bundle.instance_mask,
                                bundle.instance_classes, bundle.moving_instances)
        tree = instantiate(tree, db, bounds, lcfg, derive_seed(seed, "lights"), randomize=flags.lights_inst)
        lit = apply_lights(tree, mesh)
        sky = (lit.kind == SKY) & ~lit.emissive
        lit.emissive[sky] = True
        lit.emission[sky] = sky_radiance(cfg, lcfg)
        lit = lit.concat(add_ego_headlights(lcfg, db))
        inter["lights"] = tree
        stages["light_instantiation"] = hashlib.sha256(
            json.dumps(_lights_summary(tree), sort_keys=True).encode()
        ).hexdigest()

    with _Stage("path_tracer", timings):
        rp = cfg.render
        linear = render(lit, intr, bundle.shape, spp=rp.spp, max_bounces=rp.max_bounces,
                        seed=derive_seed(seed, "render"), rr_depth=rp.rr_depth)
        inter["linear"] = linear.data
        stages["path_tracer"] = digest(linear.data)

    with _Stage("isp_post", timings):
        isp = dataclasses.replace(cfg.isp, seed=derive_seed(seed, "noise"))
        image = run_isp(linear.data, isp, post_effects=flags.image_post_proc)
        stages["isp_post"] = digest(image)

    manifest = {
        "scene_id": bundle.scene_id,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "ablation": dataclasses.asdict(flags),
        "stages": stages,
        "lights": {"leaves": len(tree.leaves), "active": int(sum(l.active for l in tree.leaves))},
        "bad_samples": linear.bad_samples,
        "timings": timings,
    }
    if out_dir is not None:
        _write_outputs(Path(out_dir), image, manifest, inter if dump_intermediates else None, bundle, tree)
    return RunResult(image, manifest, inter)


def _lights_summary(tree) -> list[dict]:
    return [
        {"key": l.key, "group": l.group, "category": l.category, "active": bool(l.active),
         "y": l.y, "xy": list(l.chromaticity), "strength": l.strength, "state": l.traffic_state}
        for l in tree.leaves
    ]


def _write_outputs(out: Path, image, manifest, inter, bundle, tree) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "night.png", image)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if inter is None:
        return
    d = out / "intermediates"
    d.mkdir(exist_ok=True)
    write_pfm(d / "depth_raw.pfm", bundle.depth)
    write_pfm(d / "depth_refined.pfm", inter["depth"])
    if "depth_filtered" in inter:
        write_pfm(d / "depth_filtered.pfm", inter["depth_filtered"])
        Image.fromarray((inter["uncertain"] * 255).astype(np.uint8), mode="L").save(d / "uncertain.png")
    inter["mesh"].write_ply(d / "mesh.ply")
    (d / "lights.json").write_text(json.dumps(_lights_summary(tree), indent=1))
    write_pfm(d / "linear_xyz.pfm", inter["linear"])


# ---------------------------------------------------------------------------
# Batches


def scene_id_of(scene: str | Path) -> str:
    p = Path(scene)
    try:
        return json.loads(p.read_text()).get("id", p.stem)
    except (OSError, ValueError):
        return p.parent.name or p.stem


def _batch_one(cfg_dict: dict, base_dir: str, scene: str, out_dir: str | None, seed: int) -> dict:
    cfg = PipelineConfig.from_dict(cfg_dict, base_dir)
    entry = {"scene": str(scene), "seed": seed}
    try:
        res = run(cfg, scene, out_dir, seed=seed)
        entry.update(status="ok", stages=res.manifest["stages"], timings=res.manifest["timings"])
    except Exception as exc:  # recorded, batch continues
        entry.update(status="error", stage=getattr(exc, "stage", None), error=str(exc))
    return entry


def batch(
    config: PipelineConfig,
    scenes: list[str | Path],
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> dict:
    """Relight several scenes, one process per worker; never aborts on a bad scene.

    Each scene runs with seed ``derive_seed(config.seed, scene_id)``, so its
    output does not depend on the worker count or scheduling order.
    """
    if not scenes:
        raise ValueError("empty scene list")
    ids = [scene_id_of(s) for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids must be unique within a batch")
    jobs = []
    for s, sid in zip(scenes, ids):
        sub = None if out_dir is None else str(Path(out_dir) / sid)
        jobs.append((config.to_dict(), config.base_dir, str(s), sub, derive_seed(config.seed, sid)))
    t0 = time.perf_counter()
    if workers <= 1:
        entries = [_batch_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as ex:
            entries = list(ex.map(_batch_one, *zip(*jobs)))
    for sid, e in zip(ids, entries):
        e["scene_id"] = sid
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "scenes": entries,
        "n_failed": sum(e["status"] != "ok" for e in entries),
        "timings": {"total": round(time.perf_counter() - t0, 4)},
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def strip_timings(manifest: dict) -> dict:
    """Manifest copy without wall-clock fields, for reproducibility checks."""
    m = copy.deepcopy(manifest)
    m.pop("timings", None)
    for e in m.get("scenes", []):
        e.pop("timings", None)
    return m
