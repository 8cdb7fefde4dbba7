"""Generate a small synthetic set and look at the three-scale patches of one nodule.

    python3 demos/synthetic_and_patches.py
"""
import numpy as np

from mgicnn.patching import augmented_count, enumerate_augmentations, extract_multiscale
from mgicnn.synthetic import SyntheticSpec, generate

spec = SyntheticSpec(num_scans=3, volume_shape=(64, 64, 32), nodules_per_scan=2, distractors_per_scan=4, seed=7)
data = generate(spec)
print(f"{len(data.volumes)} scans, {len(data.gt)} nodules, {len(data.candidates)} candidates")

vol = data.volumes[0]
nodule = next(c for c in data.candidates if c.series_id == vol.series_id and c.label == 1)
tube = next(c for c in data.candidates if c.series_id == vol.series_id and c.label == 0)

for name, cand in (("nodule", nodule), ("distractor", tube)):
    triple = extract_multiscale(vol, cand)
    # mean intensity of the central voxel column at each scale
    means = [float(p[:, 8:12, 8:12].mean()) for p in (triple.s1, triple.s2, triple.s3)]
    print(f"{name:10s} centre means S1/S2/S3: " + " ".join(f"{m:.2f}" for m in means))

augs = enumerate_augmentations(vol, nodule)
print(f"{len(augs)} augmentations per nodule; 1,205 nodules -> {augmented_count(1205):,} training samples")
print("patch shape (z, y, x):", np.asarray(augs[0].s1).shape)
