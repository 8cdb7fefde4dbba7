"""Multi-scale patch extraction around nodule candidates.

Each candidate yields three co-centred crops of 40x40x26, 30x30x10 and
20x20x6 voxels (x, y, z), resized to 20x20x6 with nearest-neighbour
sampling and mapped from the [-1000, 400] HU window onto [0, 1].

Arrays follow the volume layout, so a patch has numpy shape ``(6, 20, 20)``
i.e. ``(z, y, x)``.  Sizes quoted as ``20x20x6`` in docstrings are x, y, z.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .volume_io import NODULE, Candidate, Volume, world_to_voxel

HU_MIN = -1000.0
HU_MAX = 400.0
PAD_HU = -1000.0

# crop sizes in (z, y, x) array order, largest context first
SCALE_SHAPES = ((26, 40, 40), (10, 30, 30), (6, 20, 20))
PATCH_SHAPE = (6, 20, 20)

ROTATIONS_DEG = (90, 180, 270)
SHIFTS = tuple(itertools.product((-1, 0, 1), repeat=3))  # (dx, dy, dz)

CACHE_FORMAT_VERSION = 1


class DegenerateCandidate(ValueError):
    """The candidate centre lies too far outside the voxel grid to crop."""


@dataclass(frozen=True, eq=False)
class PatchTriple:
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    source_candidate: Optional[Candidate] = None

    def __post_init__(self):
        shapes = {np.shape(self.s1), np.shape(self.s2), np.shape(self.s3)}
        if len(shapes) != 1:
            raise ValueError(f"scale patches differ in shape: {sorted(shapes)}")

    def stacked(self) -> np.ndarray:
        """The three scales as one ``(3, z, y, x)`` float32 array."""
        return np.stack([self.s1, self.s2, self.s3]).astype(np.float32, copy=False)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, source_candidate: Optional[Candidate] = None) -> "PatchTriple":
        return cls(arr[0], arr[1], arr[2], source_candidate)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: int
    shift_voxels: tuple[int, int, int]

    def __post_init__(self):
        if self.rotation_deg not in ROTATIONS_DEG:
            raise ValueError(f"rotation must be one of {ROTATIONS_DEG}")
        if len(self.shift_voxels) != 3 or any(s not in (-1, 0, 1) for s in self.shift_voxels):
            raise ValueError("shift components must be -1, 0 or 1")

    @property
    def quarter_turns(self) -> int:
        return self.rotation_deg // 90


def augmentation_specs() -> list[AugmentationSpec]:
    """All 81 nodule augmentations, rotation-major."""
    return [AugmentationSpec(r, s) for r in ROTATIONS_DEG for s in SHIFTS]


def normalize_hu(patch) -> np.ndarray:
    """Fixed-window min-max scaling of HU onto [0, 1], clamped."""
    arr = np.asarray(patch, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("patch contains NaN")
    return np.clip((arr - HU_MIN) / (HU_MAX - HU_MIN), 0.0, 1.0)


def resize_nearest(patch, target: Sequence[int] = PATCH_SHAPE) -> np.ndarray:
    """Centre-aligned nearest-neighbour resize.

    Output index ``i`` on an axis reads source index
    ``floor((i + 0.5) * src / dst)``, clamped to the source range.
    """
    arr = np.asarray(patch)
    target = tuple(int(t) for t in target)
    if arr.ndim != len(target):
        raise ValueError(f"target {target} does not match patch rank {arr.ndim}")
    if min(target) < 1:
        raise ValueError(f"target shape must be positive, got {target}")
    if min(arr.shape) < 1:
        raise ValueError(f"source shape must be positive, got {arr.shape}")
    index = []
    for src, dst in zip(arr.shape, target):
        i = np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.intp)
        index.append(np.clip(i, 0, src - 1))
    return arr[np.ix_(*index)]


def rotate_transverse(patch: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate a ``(..., z, y, x)`` array by 90 degree steps in the x-y plane."""
    return np.rot90(patch, k=quarter_turns, axes=(-2, -1))


def candidate_center_voxel(volume: Volume, candidate: Candidate) -> tuple[int, int, int]:
    """Nearest voxel ``(x, y, z)`` to the candidate; ties round up."""
    v = world_to_voxel(volume, candidate.world_mm)
    return tuple(int(c) for c in np.floor(v + 0.5))


def crop_padded(voxels: np.ndarray, center_zyx: Sequence[int], shape_zyx: Sequence[int], pad_value=PAD_HU) -> np.ndarray:
    """Crop ``shape_zyx`` around ``center_zyx``; out-of-grid voxels get ``pad_value``.

    For an even size ``n`` the crop spans ``center - n//2 .. center + n//2 - 1``.
    """
    out = np.full(shape_zyx, pad_value, dtype=np.float64)
    src, dst = [], []
    for c, n, dim in zip(center_zyx, shape_zyx, voxels.shape):
        lo = c - n // 2
        a, b = max(lo, 0), min(lo + n, dim)
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def extract_multiscale(
    volume: Volume,
    candidate: Candidate,
    shift_voxels: Sequence[int] = (0, 0, 0),
) -> PatchTriple:
    """Three normalised 20x20x6 patches (S1 widest context, S3 tightest).

    ``shift_voxels`` is ``(dx, dy, dz)`` in source voxels and moves the crop
    centre before resizing.
    """
    if candidate.series_id != volume.series_id:
        raise ValueError(f"candidate series {candidate.series_id!r} != volume {volume.series_id!r}")
    cx, cy, cz = candidate_center_voxel(volume, candidate)
    dx, dy, dz = (int(s) for s in shift_voxels)
    center = (cz + dz, cy + dy, cx + dx)

    largest = SCALE_SHAPES[0]
    for c, n, dim, axis in zip(center, largest, volume.voxels.shape, "zyx"):
        half = n // 2
        if c < -half or c > dim - 1 + half:
            raise DegenerateCandidate(
                f"{candidate.series_id}: centre {axis}={c} is more than {half} voxels outside [0, {dim - 1}]"
            )
    scales = [
        normalize_hu(resize_nearest(crop_padded(volume.voxels, center, shape), PATCH_SHAPE))
        for shape in SCALE_SHAPES
    ]
    return PatchTriple(*scales, source_candidate=candidate)


def shifted_extractions(volume: Volume, candidate: Candidate) -> np.ndarray:
    """The 27 shifted extractions as a ``(27, 3, z, y, x)`` float32 array, in ``SHIFTS`` order."""
    return np.stack([extract_multiscale(volume, candidate, s).stacked() for s in SHIFTS])


def enumerate_augmentations(volume: Volume, candidate: Candidate) -> list[PatchTriple]:
    """81 augmented copies of a nodule: 3 transverse rotations x 27 one-voxel shifts.

    The unaugmented sample is not part of the list.
    """
    if candidate.label != NODULE:
        raise ValueError("augmentation applies to nodule-labelled candidates only")
    shifted = shifted_extractions(volume, candidate)
    out = []
    for spec in augmentation_specs():
        arr = rotate_transverse(shifted[SHIFTS.index(spec.shift_voxels)], spec.quarter_turns)
        out.append(PatchTriple.from_stacked(np.ascontiguousarray(arr), candidate))
    return out


def augmented_count(num_nodules: int) -> int:
    """Number of augmented samples generated for ``num_nodules`` nodules."""
    return num_nodules * len(ROTATIONS_DEG) * len(SHIFTS)


# --------------------------------------------------------------------------
# patch cache


class PatchCache:
    """In-memory patches for a candidate list, with optional augmentation sources.

    ``patches[i]`` is the ``(3, 6, 20, 20)`` stack for ``candidates[i]``;
    ``shifted[i]`` (nodules only) holds the 27 shifted extractions the
    rotations are applied to.
    """

    def __init__(self, candidates: list[Candidate], patches: np.ndarray, shifted: Optional[dict[int, np.ndarray]] = None):
        if len(candidates) != len(patches):
            raise ValueError("one patch stack per candidate required")
        self.candidates = list(candidates)
        self.patches = np.asarray(patches, dtype=np.float32)
        self.shifted = dict(shifted or {})

    def __len__(self):
        return len(self.candidates)

    def augmented(self, index: int, shift_index: int, quarter_turns: int) -> np.ndarray:
        try:
            src = self.shifted[index][shift_index]
        except KeyError:
            raise KeyError(f"no augmentation record for candidate {index}") from None
        return rotate_transverse(src, quarter_turns)

    def save(self, path: str | os.PathLike) -> Path:
        """Write the cache as an ``.npz`` container (see README for layout)."""
        path = Path(path)
        meta = {
            "format": "mgicnn-patch-cache",
            "format_version": CACHE_FORMAT_VERSION,
            "patch_shape_zyx": list(PATCH_SHAPE),
            "scales_zyx": [list(s) for s in SCALE_SHAPES],
            "hu_window": [HU_MIN, HU_MAX],
        }
        idx = np.array(sorted(self.shifted), dtype=np.int64)
        shifted = (
            np.stack([self.shifted[i] for i in idx]).astype(np.float32)
            if len(idx)
            else np.zeros((0, len(SHIFTS), 3) + PATCH_SHAPE, np.float32)
        )
        labels = np.array([-1 if c.label is None else c.label for c in self.candidates], dtype=np.int8)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                header=np.array(json.dumps(meta, sort_keys=True)),
                series_id=np.array([c.series_id for c in self.candidates], dtype=str),
                world_mm=np.array([c.world_mm for c in self.candidates], dtype=np.float64).reshape(-1, 3),
                label=labels,
                patches=self.patches,
                shifted_index=idx,
                shifted=shifted,
            )
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PatchCache":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["header"]))
            if meta.get("format") != "mgicnn-patch-cache":
                raise ValueError(f"{path}: not a patch cache")
            if meta.get("format_version") != CACHE_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported cache version {meta.get('format_version')}")
            candidates = [
                Candidate(str(s), tuple(w), None if lab < 0 else int(lab))
                for s, w, lab in zip(z["series_id"], z["world_mm"], z["label"])
            ]
            shifted = {int(i): arr for i, arr in zip(z["shifted_index"], z["shifted"])}
            return cls(candidates, z["patches"], shifted)


def build_patch_cache(
    volumes: dict[str, Volume],
    candidates: Iterable[Candidate],
    augment: bool = True,
) -> tuple[PatchCache, list[tuple[Candidate, str]]]:
    """Extract patches for every candidate whose series is available.

    Returns the cache plus ``(candidate, reason)`` pairs for skipped ones
    (missing series or degenerate centre).
    """
    kept, stacks, shifted, skipped = [], [], {}, []
    for cand in candidates:
        vol = volumes.get(cand.series_id)
        if vol is None:
            skipped.append((cand, "missing series"))
            continue
        try:
            triple = extract_multiscale(vol, cand)
            extra = shifted_extractions(vol, cand) if augment and cand.label == NODULE else None
        except DegenerateCandidate as exc:
            skipped.append((cand, str(exc)))
            continue
        if extra is not None:
            shifted[len(kept)] = extra
        kept.append(cand)
        stacks.append(triple.stacked())
    patches = np.stack(stacks) if stacks else np.zeros((0, 3) + PATCH_SHAPE, np.float32)
    return PatchCache(kept, patches, shifted), skipped
