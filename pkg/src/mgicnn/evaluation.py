"""FROC analysis and the competition performance metric (CPM).

A prediction hits a ground-truth nodule when it lies strictly inside the
nodule's radius on the same series.  Several predictions may hit one
nodule; those never count as false positives.  A prediction that hits no
nodule is a false positive at every threshold at or below its probability.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .volume_io import Candidate

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
# half-open confidence bands for false-positive triage; the top band is closed at 1
TRIAGE_BANDS = (("LC", 0.5, 0.7), ("MC", 0.7, 0.9), ("HC", 0.9, 1.0))


@dataclass(frozen=True)
class GroundTruthNodule:
    series_id: str
    center_mm: tuple[float, float, float]
    radius_mm: float

    def __post_init__(self):
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        if not self.radius_mm > 0:
            raise ValueError(f"radius must be positive, got {self.radius_mm}")


@dataclass(frozen=True)
class FrocCurve:
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    num_scans: int
    num_gt: int

    def __post_init__(self):
        fps = np.asarray(self.fp_per_scan, dtype=np.float64)
        sens = np.asarray(self.sensitivity, dtype=np.float64)
        if fps.shape != sens.shape:
            raise ValueError("fp_per_scan and sensitivity must have equal length")
        if np.any(np.diff(fps) <= 0):
            raise ValueError("fp_per_scan must be strictly increasing")
        if np.any(np.diff(sens) < 0):
            raise ValueError("sensitivity must be non-decreasing")
        object.__setattr__(self, "fp_per_scan", fps)
        object.__setattr__(self, "sensitivity", sens)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_scan.tolist(), self.sensitivity.tolist()))


@dataclass(frozen=True)
class CpmResult:
    sensitivities: dict
    average: float
    ci_low: float
    ci_high: float
    bootstrap_n: int = 0

    def as_row(self) -> list[float]:
        return [self.sensitivities[r] for r in FP_RATES] + [self.average]


# --------------------------------------------------------------------------
# matching


def match_hits(predictions: Sequence[Candidate], gt: Sequence[GroundTruthNodule]) -> list[list[int]]:
    """For each prediction, the indices of ground-truth nodules it hits."""
    by_series: dict[str, list[int]] = {}
    for j, g in enumerate(gt):
        by_series.setdefault(g.series_id, []).append(j)
    centers = np.array([g.center_mm for g in gt], dtype=np.float64).reshape(-1, 3)
    radii = np.array([g.radius_mm for g in gt], dtype=np.float64)
    hits = []
    for p in predictions:
        idx = by_series.get(p.series_id)
        if not idx:
            hits.append([])
            continue
        idx = np.asarray(idx)
        d = np.linalg.norm(centers[idx] - np.asarray(p.world_mm), axis=1)
        hits.append(idx[d < radii[idx]].tolist())
    return hits


def _probabilities(predictions: Sequence[Candidate]) -> np.ndarray:
    probs = []
    for p in predictions:
        if p.probability is None:
            raise ValueError(f"prediction without probability: {p}")
        probs.append(p.probability)
    return np.asarray(probs, dtype=np.float64)


def _detection_scores(predictions, gt, hits=None):
    """Per-GT best hitting probability (-inf if missed) and the FP probabilities."""
    probs = _probabilities(predictions)
    hits = match_hits(predictions, gt) if hits is None else hits
    best = np.full(len(gt), -np.inf)
    fp = []
    for p, h in zip(probs, hits):
        if h:
            best[h] = np.maximum(best[h], p)
        else:
            fp.append(p)
    return best, np.asarray(fp, dtype=np.float64), probs


def _curve_from_scores(gt_best: np.ndarray, fp_probs: np.ndarray, thresholds: np.ndarray, num_scans: int):
    """Sensitivity / FP-per-scan at each threshold (descending), collapsed per FP count."""
    if len(gt_best) == 0:
        raise ValueError("ground truth is empty; sensitivity undefined")
    thresholds = np.sort(np.unique(thresholds))[::-1]
    gt_sorted = np.sort(gt_best)
    fp_sorted = np.sort(fp_probs)
    detected = len(gt_sorted) - np.searchsorted(gt_sorted, thresholds, side="left")
    n_fp = len(fp_sorted) - np.searchsorted(fp_sorted, thresholds, side="left")
    sens = detected / len(gt_sorted)
    fps = n_fp / num_scans
    # keep, for every FP level, the highest sensitivity reached
    keep = np.r_[n_fp[1:] != n_fp[:-1], True] if len(n_fp) else np.zeros(0, bool)
    return fps[keep], sens[keep]


def froc(predictions: Sequence[Candidate], gt: Sequence[GroundTruthNodule], num_scans: int) -> FrocCurve:
    """Sweep every distinct prediction probability as an operating threshold."""
    if num_scans < 1:
        raise ValueError("num_scans must be >= 1")
    if not gt:
        raise ValueError("ground truth is empty; sensitivity undefined")
    best, fp, probs = _detection_scores(predictions, gt)
    fps, sens = _curve_from_scores(best, fp, probs, num_scans)
    return FrocCurve(fps, sens, num_scans, len(gt))


def sensitivity_at(curve: FrocCurve, fps: float) -> float:
    """Linear interpolation on the curve; ``(0, 0)`` anchors the low end, the top saturates."""
    if not fps > 0:
        raise ValueError("fps must be positive")
    x, y = curve.fp_per_scan, curve.sensitivity
    if len(x) == 0:
        return 0.0
    if x[0] > 0:
        x = np.r_[0.0, x]
        y = np.r_[0.0, y]
    return float(np.interp(fps, x, y))


def average_sensitivity(sensitivities: Sequence[float]) -> float:
    """Mean over the seven operating points."""
    vals = [float(s) for s in sensitivities]
    if len(vals) != len(FP_RATES):
        raise ValueError(f"expected {len(FP_RATES)} sensitivities, got {len(vals)}")
    return float(np.mean(vals))


def _cpm_point(curve: FrocCurve) -> tuple[dict, float]:
    sens = {r: sensitivity_at(curve, r) for r in FP_RATES}
    return sens, average_sensitivity(sens.values())


def cpm(
    predictions: Sequence[Candidate],
    gt: Sequence[GroundTruthNodule],
    num_scans: int,
    bootstrap_n: int = 1000,
    seed: int = 0,
    scan_ids: Optional[Sequence[str]] = None,
) -> CpmResult:
    """Seven-point average sensitivity with a percentile bootstrap CI over scans.

    ``scan_ids`` lists every scan in the evaluation; by default the series
    seen in predictions or GT, padded with empty scans up to ``num_scans``.
    Bootstrap replicates drawing no nodule at all are redrawn.
    """
    if bootstrap_n < 1:
        raise ValueError("bootstrap_n must be >= 1")
    curve = froc(predictions, gt, num_scans)
    sens, avg = _cpm_point(curve)

    seen = sorted({p.series_id for p in predictions} | {g.series_id for g in gt})
    scans = list(scan_ids) if scan_ids is not None else seen
    if not set(seen) <= set(scans):
        raise ValueError("scan_ids does not cover every series in predictions/GT")
    if len(scans) > num_scans:
        raise ValueError(f"{len(scans)} distinct scans but num_scans={num_scans}")
    scans += [f"<empty-{i}>" for i in range(num_scans - len(scans))]

    hits = match_hits(predictions, gt)
    best, _, probs = _detection_scores(predictions, gt, hits)
    pos = {s: i for i, s in enumerate(scans)}
    gt_scan = np.array([pos[g.series_id] for g in gt])
    is_fp = np.array([not h for h in hits], dtype=bool)
    pred_scan = np.array([pos[p.series_id] for p in predictions], dtype=np.int64)
    per_scan_gt = [best[gt_scan == s] for s in range(len(scans))]
    per_scan_fp = [probs[is_fp & (pred_scan == s)] for s in range(len(scans))]
    per_scan_p = [probs[pred_scan == s] for s in range(len(scans))]

    rng = np.random.default_rng(seed)
    stats = np.empty(bootstrap_n)
    for b in range(bootstrap_n):
        while True:
            draw = rng.integers(0, len(scans), len(scans))
            g = np.concatenate([per_scan_gt[s] for s in draw])
            if len(g):
                break
        f = np.concatenate([per_scan_fp[s] for s in draw])
        t = np.concatenate([per_scan_p[s] for s in draw])
        fps, se = _curve_from_scores(g, f, t, len(scans))
        c = FrocCurve(fps, se, len(scans), len(g))
        stats[b] = _cpm_point(c)[1]
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return CpmResult(sens, avg, float(min(lo, avg)), float(max(hi, avg)), bootstrap_n)


def confusion_counts(
    predictions: Sequence[Candidate], gt: Sequence[GroundTruthNodule], threshold: float = 0.5
) -> tuple[int, int, int]:
    """``(tp_in_gt, fp, fn)`` at ``probability >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    best, fp, _ = _detection_scores(predictions, gt)
    tp = int(np.count_nonzero(best >= threshold))
    return tp, int(np.count_nonzero(fp >= threshold)), len(gt) - tp


@dataclass
class TriageReport:
    counts: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _band_of(p: float) -> Optional[str]:
    for name, lo, hi in TRIAGE_BANDS:
        if lo <= p < hi or (hi == 1.0 and p == 1.0):
            return name
    return None


def triage_fps(predictions: Sequence[Candidate], gt: Sequence[GroundTruthNodule]) -> TriageReport:
    """Group false positives with ``p >= 0.5`` into LC / MC / HC confidence bands."""
    report = TriageReport({n: 0 for n, _, _ in TRIAGE_BANDS}, {n: [] for n, _, _ in TRIAGE_BANDS})
    for pred, h in zip(predictions, match_hits(predictions, gt)):
        if h:
            continue
        band = _band_of(pred.probability)
        if band is not None:
            report.counts[band] += 1
            report.members[band].append(pred)
    return report


# --------------------------------------------------------------------------
# files

PREDICTION_FIELDS = ("seriesuid", "coordX", "coordY", "coordZ", "probability")
GT_FIELDS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


def write_predictions(predictions: Iterable[Candidate], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for p in predictions:
            w.writerow([p.series_id, *(repr(c) for c in p.world_mm), repr(float(p.probability))])
    return path


def read_predictions(path) -> list[Candidate]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require(reader, PREDICTION_FIELDS, path)
        return [
            Candidate(
                r["seriesuid"],
                (float(r["coordX"]), float(r["coordY"]), float(r["coordZ"])),
                probability=float(r["probability"]),
            )
            for r in reader
        ]


def write_ground_truth(gt: Iterable[GroundTruthNodule], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_FIELDS)
        for g in gt:
            w.writerow([g.series_id, *(repr(c) for c in g.center_mm), repr(2.0 * g.radius_mm)])
    return path


def read_ground_truth(path) -> list[GroundTruthNodule]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require(reader, GT_FIELDS, path)
        return [
            GroundTruthNodule(
                r["seriesuid"],
                (float(r["coordX"]), float(r["coordY"]), float(r["coordZ"])),
                float(r["diameter_mm"]) / 2.0,
            )
            for r in reader
        ]


def _require(reader: csv.DictReader, fields, path):
    missing = set(fields) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")


def write_froc_csv(curve: FrocCurve, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fp_per_scan", "sensitivity"])
        for x, y in curve.points:
            w.writerow([repr(x), repr(y)])
    return path


def plot_froc(curve: FrocCurve, path, result: Optional[CpmResult] = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.clip(curve.fp_per_scan, FP_RATES[0] / 2, None)
    ax.step(x, curve.sensitivity, where="post", lw=1.5)
    if result is not None:
        ax.plot(FP_RATES, [result.sensitivities[r] for r in FP_RATES], "o", ms=4)
        ax.set_title(f"CPM {result.average:.3f} [{result.ci_low:.3f}, {result.ci_high:.3f}]")
    ax.set_xscale("log", base=2)
    ax.set_xlim(FP_RATES[0] / 2, FP_RATES[-1] * 2)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
