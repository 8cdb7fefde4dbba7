"""Train a small network on one fold of a synthetic set and report held-out CPM.

    python3 demos/train_one_fold.py        # about a minute on one core
"""
import torch

from mgicnn.evaluation import cpm
from mgicnn.experiment import predict_candidates
from mgicnn.model import build, desk_config
from mgicnn.patching import build_patch_cache
from mgicnn.synthetic import SyntheticSpec, generate
from mgicnn.training import assemble_training_set, desk_train_config, make_folds, train

torch.set_num_threads(1)
data = generate(SyntheticSpec(num_scans=10, seed=1))
cache, skipped = build_patch_cache({v.series_id: v for v in data.volumes}, data.candidates)
plan = make_folds([v.series_id for v in data.volumes], k=5, seed=0)
train_series, test_series = plan[0]

stream = assemble_training_set(train_series, None, cache, seed=0)
print(f"{len(cache)} candidates cached, {len(skipped)} skipped; training stream of {len(stream)} samples")

model = build(desk_config("MGI"), seed=0)
cfg = desk_train_config(epochs=2)
train(model, stream, cfg, progress=lambda e, loss, lr: print(f"  epoch {e + 1} loss {loss:.4f} lr {lr:.5f}"))

test_idx = [i for i, c in enumerate(cache.candidates) if c.series_id in test_series]
preds = predict_candidates(model, cache, test_idx)
gt = [g for g in data.gt if g.series_id in test_series]
score = cpm(preds, gt, len(test_series), bootstrap_n=200, seed=0)
print(f"held-out scans {sorted(test_series)}: CPM {score.average:.3f}")
