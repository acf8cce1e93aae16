from .bvh import BVH, build_bvh
from .render import (
    LinearImage,
    RenderError,
    diffuse_brdf,
    directionality_weight,
    emitted_radiance,
    pack_scene,
    render,
)

__all__ = [
    "BVH", "build_bvh", "LinearImage", "RenderError", "diffuse_brdf",
    "directionality_weight", "emitted_radiance", "pack_scene", "render",
]
