"""
Rendering and camera post-processing
====================================

The path tracer renders the lit mesh into a linear XYZ image. A simulated
camera pipeline then brightens it, adds glare around bright lamps, adapts
white from illuminant E to D65, encodes sRGB and adds sensor noise.
"""

from dataclasses import replace
from pathlib import Path

from nightrelight.isp import IspConfig, run_isp
from nightrelight.pipeline import PipelineConfig, run
from nightrelight.scene_io import write_image, write_pfm
from nightrelight.synthetic import bundled_scene_path

out = Path("demo_out")
out.mkdir(exist_ok=True)
scene = bundled_scene_path()
cfg = PipelineConfig.from_file(scene.parent / "config.toml")

res = run(cfg, scene)
linear = res.intermediates["linear"]
write_pfm(out / "linear_xyz.pfm", linear)
print("linear Y: mean", linear[..., 1].mean().round(4), "max", linear[..., 1].max().round(2))

# The same linear image through three camera settings.
for name, isp in {
    "plain": cfg.isp,
    "brighter": replace(cfg.isp, exposure_stops=5.0),
    "noisy": replace(cfg.isp, noise_a=0.05, noise_b=0.002),
}.items():
    img = run_isp(linear, replace(isp, seed=1))
    write_image(out / f"night_{name}.png", img)
    print(f"{name:9s} mean 8-bit value {img.mean():6.2f} -> {out / f'night_{name}.png'}")

# Post effects switched off: exposure, adaptation and encoding only.
write_image(out / "night_clean.png", run_isp(linear, cfg.isp, post_effects=False))
