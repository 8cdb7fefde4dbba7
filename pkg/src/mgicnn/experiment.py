"""Scan-level k-fold cross-validation of a network on a candidate set."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation import CpmResult, GroundTruthNodule, confusion_counts, cpm
from .model import ModelConfig, build, count_parameters, forward
from .patching import PatchCache, build_patch_cache
from .training import FoldPlan, TrainConfig, assemble_training_set, check_no_leakage, make_folds, train
from .volume_io import Candidate, Volume

log = logging.getLogger(__name__)


@dataclass
class FoldOutcome:
    fold: int
    train_size: int
    test_candidates: int
    epoch_loss: list[float]
    wall_time_s: float


@dataclass
class ExperimentResult:
    predictions: list[Candidate]
    plan: FoldPlan
    folds: list[FoldOutcome]
    cpm: CpmResult
    confusion: tuple[int, int, int]
    parameter_count: int
    skipped: list = field(default_factory=list)

    @property
    def sensitivity_at_1fp(self) -> float:
        return self.cpm.sensitivities[1.0]


def predict_candidates(model, cache: PatchCache, indices: Sequence[int]) -> list[Candidate]:
    """Nodule probabilities for ``cache.candidates[indices]``."""
    indices = list(indices)
    if not indices:
        return []
    probs = forward(model, cache.patches[indices])[:, 1]
    return [
        replace(cache.candidates[i], probability=float(np.clip(p, 0.0, 1.0)))
        for i, p in zip(indices, probs)
    ]


def cross_validate(
    volumes: Sequence[Volume],
    candidates: Sequence[Candidate],
    gt: Sequence[GroundTruthNodule],
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    seed: int = 0,
    bootstrap_n: int = 1000,
    cache: Optional[PatchCache] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> ExperimentResult:
    """Train one network per fold and score the pooled held-out predictions.

    Fold ``i`` uses model seed ``seed + i`` and stream seed
    ``train_config.seed + i``; everything is reproducible for fixed seeds.
    """
    skipped = []
    if cache is None:
        cache, skipped = build_patch_cache({v.series_id: v for v in volumes}, candidates)
    plan = make_folds([v.series_id for v in volumes], k, seed)
    check_no_leakage(plan, cache.candidates)

    preds: dict[int, Candidate] = {}
    outcomes = []
    n_params = 0
    for i, (train_series, test_series) in enumerate(plan):
        stream = assemble_training_set(train_series, None, cache, seed=train_config.seed + i)
        model = build(model_config, seed=seed + i)
        n_params = count_parameters(model)
        cfg = replace(train_config, seed=train_config.seed + i)

        def report(epoch, loss, lr, i=i):
            msg = f"fold {i + 1}/{k} epoch {epoch + 1}/{cfg.epochs} loss {loss:.4f} lr {lr:.6f}"
            log.info(msg)
            if progress:
                progress(msg)

        result = train(model, stream, cfg, progress=report)
        test_idx = [j for j, c in enumerate(cache.candidates) if c.series_id in test_series]
        for j, p in zip(test_idx, predict_candidates(model, cache, test_idx)):
            preds[j] = p
        outcomes.append(FoldOutcome(i, len(stream), len(test_idx), result.epoch_loss, result.wall_time_s))

    predictions = [preds[j] for j in sorted(preds)]
    score = cpm(predictions, gt, len(volumes), bootstrap_n=bootstrap_n, seed=seed,
                scan_ids=[v.series_id for v in volumes])
    return ExperimentResult(
        predictions, plan, outcomes, score, confusion_counts(predictions, gt), n_params, skipped
    )
