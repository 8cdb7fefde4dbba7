"""Deterministic synthetic chest-CT stand-ins.

Each scan is air (-1000 HU) holding soft-tissue spheres (nodules) and
randomly oriented cylinders (vessel-like distractors) whose intensities
overlap, plus Gaussian noise.  Nodule candidates sit at the true sphere
centres, distractor candidates at the cylinder midpoints.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .evaluation import GroundTruthNodule, write_ground_truth
from .volume_io import NODULE, NON_NODULE, Candidate, Volume, save_volume, write_candidates

AIR_HU = -1000.0


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_scans: int = 40
    volume_shape: tuple[int, int, int] = (96, 96, 48)  # x, y, z voxels
    spacing_mm: tuple[float, float, float] = (0.7, 0.7, 1.25)
    nodules_per_scan: int = 3
    nodule_radius_mm: tuple[float, float] = (2.0, 5.0)
    nodule_intensity_hu: tuple[float, float] = (-100.0, 100.0)
    distractors_per_scan: int = 15
    distractor_radius_mm: tuple[float, float] = (1.0, 2.5)
    distractor_length_mm: tuple[float, float] = (25.0, 60.0)
    distractor_intensity_hu: tuple[float, float] = (-100.0, 100.0)
    noise_sigma_hu: float = 20.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("volume_shape", "spacing_mm", "nodule_radius_mm", "nodule_intensity_hu",
                     "distractor_radius_mm", "distractor_length_mm", "distractor_intensity_hu"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.num_scans < 0 or self.nodules_per_scan < 0 or self.distractors_per_scan < 0:
            raise ValueError("counts must be non-negative")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ValueError("volume_shape needs three positive extents")
        if min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be positive")
        for name in ("nodule_radius_mm", "distractor_radius_mm", "distractor_length_mm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (low, high) range")
        for name in ("nodule_intensity_hu", "distractor_intensity_hu"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be a (low, high) range")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


class SyntheticData(NamedTuple):
    volumes: list[Volume]
    gt: list[GroundTruthNodule]
    candidates: list[Candidate]


def _sphere_into(vox, grid_mm, center, radius, value):
    """Paint a physical-space sphere; ``grid_mm`` are per-axis (z, y, x) coordinate vectors."""
    sl = _bbox(grid_mm, center, radius)
    if sl is None:
        return
    zz, yy, xx = (g[s] for g, s in zip(grid_mm, sl))
    d2 = (zz[:, None, None] - center[2]) ** 2 + (yy[None, :, None] - center[1]) ** 2 + (xx[None, None, :] - center[0]) ** 2
    region = vox[sl]
    region[d2 <= radius**2] = value


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def _tube_into(vox, grid_mm, a, b, radius, value):
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    sl = []
    for axis, g in zip((2, 1, 0), grid_mm):
        i0 = np.searchsorted(g, lo[axis], side="left")
        i1 = np.searchsorted(g, hi[axis], side="right")
        if i0 >= i1:
            return
        sl.append(slice(i0, i1))
    zz, yy, xx = np.meshgrid(*(g[s] for g, s in zip(grid_mm, sl)), indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1)
    region = vox[tuple(sl)]
    region[_segment_distance(pts, a, b) <= radius] = value


def _bbox(grid_mm, center, radius):
    sl = []
    for axis, g in zip((2, 1, 0), grid_mm):
        i0 = np.searchsorted(g, center[axis] - radius, side="left")
        i1 = np.searchsorted(g, center[axis] + radius, side="right")
        if i0 >= i1:
            return None
        sl.append(slice(i0, i1))
    return tuple(sl)


def _random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def generate_scan(spec: SyntheticSpec, index: int, rng: np.random.Generator):
    nx, ny, nz = spec.volume_shape
    sx, sy, sz = spec.spacing_mm
    origin = np.array([-0.5 * nx * sx, -0.5 * ny * sy, -0.5 * nz * sz])
    series_id = f"synth-{spec.seed}-{index:03d}"
    extent = origin + (np.array(spec.volume_shape) - 1) * np.array(spec.spacing_mm)
    grid_mm = (
        origin[2] + np.arange(nz) * sz,
        origin[1] + np.arange(ny) * sy,
        origin[0] + np.arange(nx) * sx,
    )
    vox = np.full((nz, ny, nx), AIR_HU)

    nodules = []  # (center, radius)
    for _ in range(spec.nodules_per_scan):
        r = rng.uniform(*spec.nodule_radius_mm)
        margin = r + 1.0
        if np.any(origin + margin > extent - margin):
            raise PlacementError(f"{series_id}: a {r:.2f} mm nodule does not fit in the volume")
        for _attempt in range(spec.max_retries):
            c = rng.uniform(origin + margin, extent - margin)
            if all(np.linalg.norm(c - c2) > r + r2 + 2.0 for c2, r2 in nodules):
                break
        else:
            raise PlacementError(f"{series_id}: could not place nodule {len(nodules) + 1} after {spec.max_retries} tries")
        nodules.append((c, r))

    tubes = []  # (a, b, radius)
    for _ in range(spec.distractors_per_scan):
        r = rng.uniform(*spec.distractor_radius_mm)
        length = rng.uniform(*spec.distractor_length_mm)
        if np.any(origin + r + 1.0 > extent - r - 1.0):
            raise PlacementError(f"{series_id}: a {r:.2f} mm distractor does not fit in the volume")
        for _attempt in range(spec.max_retries):
            mid = rng.uniform(origin + r + 1.0, extent - r - 1.0)
            half = 0.5 * length * _random_direction(rng)
            a, b = mid - half, mid + half
            clear = all(
                _segment_distance(c[None], a, b)[0] > rn + r + 1.0 for c, rn in nodules
            )
            if clear:
                break
        else:
            raise PlacementError(f"{series_id}: could not place distractor {len(tubes) + 1} after {spec.max_retries} tries")
        tubes.append((a, b, r))

    nodule_hu = rng.uniform(*spec.nodule_intensity_hu, size=len(nodules))
    tube_hu = rng.uniform(*spec.distractor_intensity_hu, size=len(tubes))
    for (a, b, r), v in zip(tubes, tube_hu):
        _tube_into(vox, grid_mm, a, b, r, v)
    for (c, r), v in zip(nodules, nodule_hu):
        _sphere_into(vox, grid_mm, c, r, v)
    if spec.noise_sigma_hu > 0:
        vox += rng.normal(0.0, spec.noise_sigma_hu, size=vox.shape)
    voxels = np.clip(np.rint(vox), -32768, 32767).astype(np.int16)
    volume = Volume(voxels, spec.spacing_mm, tuple(origin), series_id, spec.spacing_mm[2])

    gt = [GroundTruthNodule(series_id, tuple(c), float(r)) for c, r in nodules]
    cands = [Candidate(series_id, tuple(c), NODULE) for c, _ in nodules]
    cands += [Candidate(series_id, tuple(0.5 * (a + b)), NON_NODULE) for a, b, _ in tubes]
    return volume, gt, cands, [float(v) for v in nodule_hu]


def generate(spec: Optional[SyntheticSpec] = None) -> SyntheticData:
    spec = spec or SyntheticSpec()
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_scans)
    volumes, gt, cands = [], [], []
    for i, ss in enumerate(seeds):
        v, g, c, _ = generate_scan(spec, i, np.random.default_rng(ss))
        volumes.append(v)
        gt += g
        cands += c
    return SyntheticData(volumes, gt, cands)


def export(data: SyntheticData, directory, spec: Optional[SyntheticSpec] = None) -> dict[str, Path]:
    """Write ``volumes/<series>.mhd|.raw``, ``candidates.csv`` and ``annotations.csv``.

    Volumes go first so a failure never leaves CSVs describing missing scans.
    """
    directory = Path(directory)
    vol_dir = directory / "volumes"
    try:
        vol_dir.mkdir(parents=True, exist_ok=True)
        for v in data.volumes:
            save_volume(v, vol_dir / f"{v.series_id}.mhd")
        paths = {
            "volumes": vol_dir,
            "candidates": write_candidates(data.candidates, directory / "candidates.csv"),
            "annotations": write_ground_truth(data.gt, directory / "annotations.csv"),
        }
        if spec is not None:
            paths["spec"] = directory / "synthetic_spec.json"
            paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"exporting synthetic data to {directory}: {exc}") from exc
    return paths
