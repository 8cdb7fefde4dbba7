"""Build every network variant, count parameters and inspect stage shapes.

    python3 demos/model_variants.py
"""
import numpy as np

from mgicnn.model import build, count_parameters, default_config, desk_config, dump_feature_maps, forward
from mgicnn.patching import PATCH_SHAPE

for variant in ("MGI", "RI", "LR", "ZI", "ZO"):
    full = count_parameters(build(default_config(variant)))
    small = count_parameters(build(desk_config(variant)))
    print(f"{variant}: {full:>10,} params (default)  {small:>7,} (desk)")

model = build(desk_config("MGI"), seed=0)
x = np.random.default_rng(0).random((2, 3) + PATCH_SHAPE, dtype=np.float32)
for tag, fmap in dump_feature_maps(model, x, model.stage_tags).items():
    print(f"  {tag:12s} channels {fmap.channels:3d}  spatial {fmap.spatial_shape}")
print("softmax of an untrained net:", forward(model, x).round(3).tolist())

for fusion in ("sum", "concat", "conv1x1"):
    print(f"MGI with {fusion} fusion: {count_parameters(build(desk_config('MGI', fusion))):,} params")
