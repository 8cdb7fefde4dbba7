"""Training recipe: momentum SGD with per-epoch learning-rate decay, scan-level k-fold splits
and nodule oversampling through the 81 rotation/shift augmentations."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .patching import SHIFTS, PatchCache
from .volume_io import NODULE, Candidate

log = logging.getLogger(__name__)

AUGMENTATIONS_PER_NODULE = 3 * len(SHIFTS)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


class MissingPatchRecord(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.003
    lr_decay_per_epoch: float = 0.025
    epochs: int = 40
    batch_size: int = 128
    momentum: float = 0.9
    dropout: float = 0.5
    seed: int = 0
    l2: float = 0.0
    init: str = "xavier"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise ValueError("lr_decay_per_epoch must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.init != "xavier":
            raise ValueError("only xavier initialisation is supported")

    def learning_rate(self, epoch: int) -> float:
        """``base_lr * (1 - decay) ** epoch`` with epochs counted from 0."""
        return self.base_lr * (1.0 - self.lr_decay_per_epoch) ** epoch


def desk_train_config(**overrides) -> TrainConfig:
    """Short schedule for ``desk_config`` networks on the default synthetic set.

    Smaller batches give ~4x more updates per epoch at the same compute,
    which matters when only a few epochs fit on one CPU core.
    """
    base = dict(base_lr=0.01, epochs=3, batch_size=32)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[frozenset, frozenset], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i):
        return self.folds[i]

    def fold_of(self, series_id: str) -> int:
        """Index of the fold whose test set holds ``series_id``."""
        for i, (_, test) in enumerate(self.folds):
            if series_id in test:
                return i
        raise KeyError(series_id)

    def to_dict(self) -> dict:
        return {"k": self.k, "test_series": [sorted(test) for _, test in self.folds]}


def make_folds(series_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Split series (never candidates) into ``k`` test folds of near-equal size."""
    ids = sorted(set(series_ids))
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of series ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, k)
    all_ids = frozenset(ids)
    folds = []
    for chunk in chunks:
        test = frozenset(ids[i] for i in chunk)
        folds.append((all_ids - test, test))
    return FoldPlan(tuple(folds))


def check_no_leakage(plan: FoldPlan, candidates: Sequence[Candidate]) -> None:
    """Assert no series contributes candidates to both sides of any fold."""
    for i, (train, test) in enumerate(plan):
        overlap = train & test
        if overlap:
            raise AssertionError(f"fold {i}: series on both sides: {sorted(overlap)[:5]}")
        tr = {c.series_id for c in candidates if c.series_id in train}
        te = {c.series_id for c in candidates if c.series_id in test}
        if tr & te:
            raise AssertionError(f"fold {i}: candidate series leak across the split")


# --------------------------------------------------------------------------
# sample stream


class SampleStream:
    """Training samples as ``(candidate index, shift index, quarter turns, label)`` rows.

    Shift index -1 marks an unaugmented sample.  Patches are materialised
    per batch from the cache, so the 81x nodule expansion costs no memory.
    """

    def __init__(self, cache: PatchCache, entries: np.ndarray, seed: int = 0):
        self.cache = cache
        self.entries = np.asarray(entries, dtype=np.int64).reshape(-1, 4)
        self.seed = seed

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return self.entries[:, 3]

    def sample(self, row: Sequence[int]) -> np.ndarray:
        idx, shift, turns, _ = (int(r) for r in row)
        if shift < 0:
            return self.cache.patches[idx]
        return self.cache.augmented(idx, shift, turns)

    def materialize(self, rows: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        x = np.stack([self.sample(r) for r in rows]).astype(np.float32, copy=False)
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(rows[:, 3].copy())

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self.entries))

    def batches(self, epoch: int, batch_size: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        perm = self.order(epoch)
        for i in range(0, len(perm), batch_size):
            yield self.materialize(self.entries[perm[i : i + batch_size]])


def assemble_training_set(
    train_series: Iterable[str],
    candidates: Optional[Sequence[Candidate]],
    cache: PatchCache,
    seed: int = 0,
) -> SampleStream:
    """All train-side non-nodules, all nodules, and each nodule's 81 augmentations.

    ``candidates`` defaults to every candidate in the cache; each one must
    have a cache record (and nodules their augmentation sources).
    """
    train_series = set(train_series)
    lookup = {(c.series_id, c.world_mm): i for i, c in enumerate(cache.candidates)}
    pool = cache.candidates if candidates is None else candidates
    rows = []
    n_nod = n_non = 0
    for cand in pool:
        if cand.series_id not in train_series:
            continue
        i = lookup.get((cand.series_id, cand.world_mm))
        if i is None:
            raise MissingPatchRecord(f"no patch record for {cand.series_id} at {cand.world_mm}")
        label = cache.candidates[i].label if cand.label is None else cand.label
        if label is None:
            raise ValueError(f"training candidate without label: {cand}")
        rows.append((i, -1, 0, label))
        if label == NODULE:
            if i not in cache.shifted:
                raise MissingPatchRecord(f"no augmentation record for nodule {cand.series_id} at {cand.world_mm}")
            n_nod += 1
            for turns in (1, 2, 3):
                rows.extend((i, s, turns, label) for s in range(len(SHIFTS)))
        else:
            n_non += 1
    if n_nod == 0:
        msg = f"training set has no nodules ({n_non} non-nodules only)"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    return SampleStream(cache, np.array(rows, dtype=np.int64), seed)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainResult:
    model: nn.Module
    epoch_loss: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def set_dropout(model: nn.Module, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.p = rate


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.l2)


def loss_fn(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def train(model: nn.Module, stream: SampleStream, cfg: TrainConfig, progress=None) -> TrainResult:
    """Fit ``model`` in place on ``stream``; returns the per-epoch loss trace.

    ``progress(epoch, loss, lr)`` is called after every epoch when given.
    """
    if len(stream) == 0:
        raise ValueError("empty training stream")
    torch.manual_seed(cfg.seed)
    set_dropout(model, cfg.dropout)
    dtype = next(model.parameters()).dtype
    opt = make_optimizer(model, cfg)
    result = TrainResult(model)
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        total, seen = 0.0, 0
        for b, (x, y) in enumerate(stream.batches(epoch, cfg.batch_size)):
            loss = loss_fn(model(x.to(dtype)), y)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value * len(y)
            seen += len(y)
        result.epoch_loss.append(total / seen)
        result.epoch_lr.append(lr)
        if progress is not None:
            progress(epoch, result.epoch_loss[-1], lr)
    model.eval()
    result.wall_time_s = time.perf_counter() - start
    return result


def write_manifest(path, **fields) -> Path:
    """Run manifest as pretty-printed JSON (config echo, seed, fold, losses, timings)."""
    path = Path(path)

    def _plain(v):
        if hasattr(v, "to_dict"):
            return v.to_dict()
        if hasattr(v, "__dataclass_fields__"):
            return asdict(v)
        raise TypeError(f"cannot serialise {type(v).__name__}")

    path.write_text(json.dumps(fields, indent=2, sort_keys=True, default=_plain) + "\n")
    return path
