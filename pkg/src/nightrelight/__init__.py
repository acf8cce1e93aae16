"""Physically based day-to-night relighting of single street images.

Submodules follow the processing order: ``scene_io`` loads and resamples
the estimated maps, ``depth_refine`` cleans the depth, ``mesh`` turns it into
a closed triangle mesh, ``lights`` decides which light sources burn and how,
``tracer`` renders a linear XYZ image and ``isp`` turns that into an 8-bit
photo. ``illuminants`` builds the light-colour database from raw gray-card
captures and ``pipeline`` strings everything together.
"""

from .pipeline import Ablation, PipelineConfig, PipelineError, batch, run
from .scene_io import PAPER_INTRINSICS, Intrinsics, LightCategory, SceneBundle, load_scene_bundle

__version__ = "0.1.0"

__all__ = [
    "Ablation", "PipelineConfig", "PipelineError", "batch", "run",
    "PAPER_INTRINSICS", "Intrinsics", "LightCategory", "SceneBundle", "load_scene_bundle",
]
