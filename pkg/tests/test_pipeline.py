import json
import numpy as np
import pytest

from nightrelight.cli import main
from nightrelight.illuminants import save_capture, synthesize_capture
from nightrelight.pipeline import (
    STAGES,
    Ablation,
    PipelineConfig,
    PipelineError,
    batch,
    derive_seed,
    run,
    strip_timings,
)
from nightrelight.scene_io import read_image, read_pfm
from nightrelight.synthetic import bundled_scene_path, write_synthetic_scene

FAST = {"depth": {"k": 3, "iters": 30}, "render": {"spp": 4}}


@pytest.fixture
def fast():
    return PipelineConfig().updated(FAST)


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch")
    return [write_synthetic_scene(root / f"s{i}", size=32, seed=i, scene_id=f"s{i}") for i in range(2)]


class TestConfig:
    def test_packaged_defaults_match_dataclasses(self):
        assert PipelineConfig.packaged_defaults().to_dict() == PipelineConfig().to_dict()

    def test_toml_profile(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[defaults]\nseed = 3\n[defaults.render]\nspp = 8\n"
                     "[quick]\nrender = { spp = 2 }\nisp = { glare = { weights = [0, 0, 0] } }\n")
        cfg = PipelineConfig.from_file(p)
        assert (cfg.seed, cfg.render.spp, cfg.render.max_bounces) == (3, 8, 4)
        quick = PipelineConfig.from_file(p, "quick")
        assert quick.render.spp == 2 and quick.isp.glare.weights == (0, 0, 0)
        assert quick.isp.glare.sigmas == (1.5, 5.0, 15.0)
        with pytest.raises(ValueError, match="profile"):
            PipelineConfig.from_file(p, "missing")

    def test_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 9, "mesh": {"tau": 0.5}}))
        cfg = PipelineConfig.from_file(p)
        assert cfg.seed == 9 and cfg.mesh.tau == 0.5

    def test_unknown_keys(self):
        with pytest.raises(ValueError, match="depth.kk"):
            PipelineConfig().updated({"depth": {"kk": 1}})
        with pytest.raises(ValueError, match="section"):
            PipelineConfig().updated({"tracer": {}})
        with pytest.raises(ValueError):
            PipelineConfig().updated({"isp": {"gamma": -1}})

    def test_hash_ignores_base_dir(self):
        a = PipelineConfig(base_dir="/x")
        assert a.config_hash() == PipelineConfig().config_hash()
        assert a.config_hash() != a.updated({"seed": 1}).config_hash()

    def test_ablation(self):
        assert Ablation.row(0) == Ablation(False, False, False)
        assert Ablation.row(4) == Ablation()
        cfg = PipelineConfig().ablate("geometric,isp")
        assert cfg.ablation == Ablation(False, True, False)
        with pytest.raises(ValueError):
            PipelineConfig().ablate("tracer")

    def test_derive_seed(self):
        assert derive_seed(0, "render") == derive_seed(0, "render")
        assert len({derive_seed(0, "render"), derive_seed(1, "render"), derive_seed(0, "noise")}) == 3
        assert 0 <= derive_seed(5, "a") < 2**63


class TestRun:
    def test_deterministic(self, fast, synthetic_scene, tmp_path):
        a = run(fast, synthetic_scene, tmp_path / "a", dump_intermediates=True)
        b = run(fast, synthetic_scene, tmp_path / "b")
        np.testing.assert_array_equal(a.image, b.image)
        assert a.manifest["stages"] == b.manifest["stages"]
        assert list(a.manifest["stages"]) == list(STAGES)
        assert (tmp_path / "a" / "night.png").read_bytes() == (tmp_path / "b" / "night.png").read_bytes()
        assert read_image(tmp_path / "a" / "night.png").shape == (64, 64, 3)
        inter = tmp_path / "a" / "intermediates"
        for name in ("depth_raw.pfm", "depth_refined.pfm", "depth_filtered.pfm", "uncertain.png",
                     "mesh.ply", "lights.json", "linear_xyz.pfm"):
            assert (inter / name).exists(), name
        assert read_pfm(inter / "linear_xyz.pfm").shape == (64, 64, 3)
        assert a.manifest["lights"]["leaves"] > 0

    def test_seed_changes_output(self, fast, synthetic_scene):
        a = run(fast, synthetic_scene)
        b = run(fast, synthetic_scene, seed=1)
        assert a.manifest["stages"]["scene_io"] == b.manifest["stages"]["scene_io"]
        assert a.manifest["stages"]["path_tracer"] != b.manifest["stages"]["path_tracer"]

    def test_ablation_hashes_compose(self, fast, synthetic_scene):
        m = {i: run(fast.with_ablation(i), synthetic_scene).manifest["stages"] for i in (0, 1, 3, 4)}
        # the geometric switch alone changes depth onwards
        assert m[0]["scene_io"] == m[1]["scene_io"]
        assert m[0]["depth_refine"] != m[1]["depth_refine"]
        # rows 3 and 4 differ only in post-processing
        assert all(m[3][s] == m[4][s] for s in STAGES[:-1])
        assert m[3]["isp_post"] != m[4]["isp_post"]
        # rows 1 and 3 share geometry but not lights
        assert m[1]["mesh_builder"] == m[3]["mesh_builder"]
        assert m[1]["light_instantiation"] != m[3]["light_instantiation"]

    def test_stage_tagged_error(self, fast, tmp_path):
        with pytest.raises(PipelineError) as err:
            run(fast, tmp_path / "nope.json")
        assert err.value.stage == "scene_io" and str(err.value).startswith("[scene_io]")
        bad = fast.updated({"render": {"spp": 0}})
        with pytest.raises(PipelineError) as err:
            run(bad, write_synthetic_scene(tmp_path / "s", size=16))
        assert err.value.stage == "path_tracer"


class TestBatch:
    def test_matches_run(self, fast, scenes):
        m = batch(fast, scenes[:1])
        single = run(fast, scenes[0], seed=derive_seed(fast.seed, "s0"))
        assert m["scenes"][0]["stages"] == single.manifest["stages"]
        assert m["n_failed"] == 0

    def test_repeatable_across_workers(self, fast, scenes, tmp_path):
        a = batch(fast, scenes, tmp_path / "a", workers=1)
        b = batch(fast, scenes, tmp_path / "b", workers=2)
        assert strip_timings(a) == strip_timings(b)
        for sid in ("s0", "s1"):
            assert (tmp_path / "a" / sid / "night.png").read_bytes() == (tmp_path / "b" / sid / "night.png").read_bytes()
        assert json.loads((tmp_path / "a" / "manifest.json").read_text())["n_failed"] == 0

    def test_failure_recorded(self, fast, scenes, tmp_path):
        broken = tmp_path / "broken.json"
        broken.write_text(json.dumps({"id": "broken", "image": "missing.png"}))
        m = batch(fast, [scenes[0], broken])
        assert m["n_failed"] == 1
        entry = m["scenes"][1]
        assert entry["status"] == "error" and entry["stage"] == "scene_io"
        assert m["scenes"][0]["status"] == "ok"

    def test_duplicate_ids(self, fast, scenes):
        with pytest.raises(ValueError):
            batch(fast, [scenes[0], scenes[0]])


class TestCli:
    def test_run_with_bundled_config(self, tmp_path, capsys):
        scene = bundled_scene_path()
        rc = main(["run", str(scene), "-c", str(scene.parent / "config.toml"), "--profile", "preview",
                   "-o", str(tmp_path / "out"), "--ablate", "isp"])
        assert rc == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["ablation"]["image_post_proc"] is False
        assert set(json.loads(capsys.readouterr().out)) == set(STAGES)

    def test_batch_and_errors(self, tmp_path, synthetic_scene):
        cfg = tmp_path / "fast.json"
        cfg.write_text(json.dumps(FAST))
        assert main(["batch", str(synthetic_scene), "-c", str(cfg), "-o", str(tmp_path / "b")]) == 0
        assert main(["batch", str(tmp_path / "missing.json"), "-c", str(cfg), "-o", str(tmp_path / "c")]) == 1
        assert main(["run", str(tmp_path / "missing.json"), "-o", str(tmp_path / "d")]) == 2

    def test_illuminants_build(self, tmp_path):
        caps = tmp_path / "caps"
        caps.mkdir()
        save_capture(caps / "a.json", synthesize_capture((0.5, 0.41), np.eye(3), category="street_light_HT"))
        out = tmp_path / "db.json"
        assert main(["illuminants", "build", str(caps), "-o", str(out)]) == 0
        db = json.loads(out.read_text())
        assert "street_light_HT" in json.dumps(db)
