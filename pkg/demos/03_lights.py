"""
Sampling the scene's lights
===========================

Light sources are grouped into a tree: lamps of one car or windows on one
building floor share their state. For every leaf we draw whether it is on,
its chromaticity from the illuminant database and a strength from the
category's interval.
"""

import numpy as np

from nightrelight.lights import (
    BoundsTable,
    IlluminantDB,
    LightConfig,
    build_light_tree,
    instantiate,
)
from nightrelight.scene_io import LightCategory, load_scene_bundle
from nightrelight.synthetic import bundled_scene_path

scene = load_scene_bundle(bundled_scene_path())
tree = build_light_tree(scene.light_category, scene.light_instance, scene.instance_mask,
                        scene.instance_classes, scene.moving_instances)

for gid, group in tree.groups.items():
    print(f"{gid:28s} {group.group_type:15s} {len(group.children)} leaves")

db, bounds, cfg = IlluminantDB.default(), BoundsTable.default(), LightConfig.default()

# Five draws of the same tree: grouped leaves always agree with each other.
for seed in range(5):
    inst = instantiate(tree, db, bounds, cfg, seed=seed)
    row = []
    for leaf in inst.leaves:
        name = LightCategory(leaf.category).name.lower()
        state = "on " if leaf.active else "off"
        row.append(f"{name}:{state} {leaf.strength:5.1f}")
    print(f"seed {seed}: " + " | ".join(row))

# How often does a moving car's headlight come on? Its activation
# probability is drawn from [0.95, 1], so about 97.5% of the time.
rng = np.random.default_rng(0)
a, b = bounds[("car", "moving_front")]
draws = rng.uniform(a, b, 100_000) > rng.random(100_000)
print(f"moving front light on in {draws.mean():.3%} of draws")
