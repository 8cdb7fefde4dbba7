"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py`` (lines are printed in the
terminal summary) or ``python3 tests/test_acceptance.py`` for the lines
alone.  Criteria 6 and 7 train networks and take several minutes each.
"""
import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from oracles import brute_confusion, brute_froc, gradient_check, random_instance

from mgicnn.cli import run
from mgicnn.evaluation import average_sensitivity, confusion_counts, froc, sensitivity_at
from mgicnn.experiment import cross_validate
from mgicnn.model import build, count_parameters, default_config, desk_config, dump_feature_maps, forward
from mgicnn.patching import PATCH_SHAPE, augmented_count, enumerate_augmentations
from mgicnn.synthetic import SyntheticSpec, generate
from mgicnn.training import check_no_leakage, desk_train_config, make_folds
from mgicnn.volume_io import Candidate

RESULTS: list[str] = []
REPORT_DIR = Path(__file__).resolve().parent.parent / "reports"

FOLD_AUGMENTATION_COUNTS = {1205: 97_605, 1262: 102_222, 1260: 102_060, 1217: 98_577, 1284: 104_004}
CPM_V2 = (0.904, 0.931, 0.943, 0.947, 0.952, 0.956, 0.962)
CPM_V1 = (0.880, 0.894, 0.907, 0.912, 0.914, 0.919, 0.927)
REFERENCE_MGI_PARAMS = 9_472_000


def record(n: int, name: str, ok: bool, detail: str, soft: bool = False) -> None:
    status = "PASS" if ok else ("FAIL (soft, flagged for investigation)" if soft else "FAIL")
    line = f"[{status}] criterion {n}: {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)


def test_c1_augmentation_arithmetic():
    from conftest import sphere_volume

    vol = sphere_volume()
    z, y, x = (s // 2 for s in vol.voxels.shape)
    n_aug = len(enumerate_augmentations(vol, Candidate(vol.series_id, (x, y, z), 1)))
    cells = {n: augmented_count(n) for n in FOLD_AUGMENTATION_COUNTS}
    ok = n_aug == 81 and cells == FOLD_AUGMENTATION_COUNTS
    record(1, "augmentation arithmetic", ok, f"{n_aug} per nodule; " + ", ".join(f"{n}->{v}" for n, v in cells.items()))
    assert ok


def test_c2_cpm_arithmetic():
    v2, v1 = average_sensitivity(CPM_V2), average_sensitivity(CPM_V1)
    ok = abs(v2 - 0.942) <= 0.0005 and abs(v1 - 0.908) <= 0.0005
    record(2, "CPM arithmetic", ok, f"V2 {v2:.5f} (0.942 +-0.0005), V1 {v1:.5f} (0.908 +-0.0005)")
    assert ok


def test_c3_parameter_parity():
    counts = {v: count_parameters(build(default_config(v))) for v in ("MGI", "RI", "LR", "ZI", "ZO")}
    spread = (max(counts.values()) - min(counts.values())) / max(counts.values())
    mgi_dev = abs(counts["MGI"] - REFERENCE_MGI_PARAMS) / REFERENCE_MGI_PARAMS
    ok = spread <= 0.005 and mgi_dev <= 0.05 and counts["ZI"] == counts["ZO"]
    record(3, "parameter-count parity", ok,
           f"{counts}; spread {spread:.4%} (<= 0.5%), MGI off by {mgi_dev:.3%} (<= 5%), ZI==ZO {counts['ZI'] == counts['ZO']}")
    assert ok


def test_c4_gradient_check():
    t = time.perf_counter()
    errors, skipped = gradient_check(num_params=120, seed=0)
    ok = len(errors) >= 100 and errors.max() <= 1e-4
    record(4, "gradient correctness", ok,
           f"{len(errors)} params, max rel err {errors.max():.2e} (<= 1e-4), {skipped} kink-straddling params skipped, "
           f"{time.perf_counter() - t:.0f} s")
    assert ok


def test_c5_oracle_equivalence():
    rng = np.random.default_rng(12345)
    t = time.perf_counter()
    trials, mismatches = 1000, 0
    for _ in range(trials):
        preds, gt, n = random_instance(rng)
        curve = froc(preds, gt, n)
        fps, sens = brute_froc(preds, gt, n)
        thr = float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9]))
        same = (curve.fp_per_scan.tolist() == fps and curve.sensitivity.tolist() == sens
                and confusion_counts(preds, gt, thr) == brute_confusion(preds, gt, thr))
        mismatches += not same
    ok = mismatches == 0
    record(5, "FROC/CPM oracle equivalence", ok, f"{trials} random instances, {mismatches} mismatches, "
           f"{time.perf_counter() - t:.1f} s")
    assert ok


@pytest.mark.slow
def test_c6_end_to_end_synthetic():
    torch.set_num_threads(1)
    t = time.perf_counter()
    data = generate(SyntheticSpec())
    result = cross_validate(data.volumes, data.candidates, data.gt, desk_config("MGI"), desk_train_config(),
                            k=5, seed=0, bootstrap_n=1000)
    elapsed = time.perf_counter() - t
    c, s1 = result.cpm.average, result.sensitivity_at_1fp
    ok = result.parameter_count <= 200_000 and c >= 0.90 and s1 >= 0.95
    record(6, "end-to-end synthetic experiment", ok,
           f"{result.parameter_count} params, {desk_train_config().epochs} epochs, CPM {c:.4f} (>= 0.90) "
           f"CI [{result.cpm.ci_low:.3f}, {result.cpm.ci_high:.3f}], sens@1FP {s1:.4f} (>= 0.95), "
           f"TP/FP/FN {result.confusion}, {elapsed:.0f} s (target <= 900 s)")
    assert ok


@pytest.mark.slow
def test_c7_ablation_probe():
    """Soft: the report is always written; an ordering failure is flagged, not raised."""
    torch.set_num_threads(1)
    spec = dict(num_scans=10)
    train_cfg = desk_train_config(epochs=2)
    scores = {"MGI": [], "RI": []}
    t = time.perf_counter()
    for seed in range(5):
        data = generate(SyntheticSpec(seed=seed, **spec))
        for variant in scores:
            r = cross_validate(data.volumes, data.candidates, data.gt, desk_config(variant), train_cfg,
                               k=2, seed=seed, bootstrap_n=100)
            scores[variant].append(r.cpm.average)
    means = {v: float(np.mean(s)) for v, s in scores.items()}
    ok = means["MGI"] >= means["RI"]
    report = {
        "setup": {"synthetic": spec, "folds": 2, "train": dataclasses.asdict(train_cfg), "seeds": list(range(5))},
        "cpm": scores,
        "mean_cpm": means,
        "ordering_holds": ok,
        "wall_time_s": time.perf_counter() - t,
    }
    REPORT_DIR.mkdir(exist_ok=True)
    (REPORT_DIR / "ablation_probe.json").write_text(json.dumps(report, indent=2) + "\n")
    record(7, "ablation ordering probe", ok,
           f"mean CPM MGI {means['MGI']:.4f} vs RI {means['RI']:.4f} over 5 seeds; report {REPORT_DIR / 'ablation_probe.json'}",
           soft=True)


def _pipeline(root: Path) -> dict:
    cfg = {
        "paths": {"data_dir": str(root / "data"), "cache_dir": str(root / "cache"), "output_dir": str(root / "out")},
        "seed": 3,
        "synthetic": {"num_scans": 5, "volume_shape": [48, 48, 24], "nodules_per_scan": 2, "distractors_per_scan": 3},
        "train": {"epochs": 1, "batch_size": 32, "base_lr": 0.01},
        "folds": {"k": 5},
    }
    path = root / "config.yaml"
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg))
    for cmd in (["synth"], ["extract"], ["train"], ["predict"], ["evaluate", "--bootstrap", "50"]):
        code = run(["--config", str(path), "--workers", "1", *cmd])
        if code != 0:
            raise RuntimeError(f"{cmd[0]} exited {code}")
    files = sorted(p for p in root.rglob("*") if p.suffix in {".csv", ".ckpt"})
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def test_c8_determinism(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    n_csv = sum(k.endswith(".csv") for k in a)
    n_ckpt = sum(k.endswith(".ckpt") for k in a)
    ok = bool(a) and a == b and n_ckpt == 5
    record(8, "determinism", ok, f"{n_csv} CSVs and {n_ckpt} checkpoints byte-identical across two runs: {a == b}")
    assert ok


def test_c9_invariants():
    rng = np.random.default_rng(9)
    failures = []

    # zero padding keeps every pre-pooling stage at the patch size
    for v in ("MGI", "RI", "LR", "ZI", "ZO"):
        model = build(desk_config(v), seed=1)
        maps = dump_feature_maps(model, rng.random((1, 3) + PATCH_SHAPE), model.stage_tags)
        if any(m.spatial_shape != PATCH_SHAPE for m in maps.values()):
            failures.append(f"{v} stage dims")

    # softmax rows sum to one on arbitrary inputs
    for v in ("MGI", "RI", "LR", "ZI", "ZO"):
        out = forward(build(desk_config(v), seed=2), rng.normal(0, 3, (16, 3) + PATCH_SHAPE))
        if not np.allclose(out.sum(1), 1.0, atol=1e-6) or out.min() < 0:
            failures.append(f"{v} softmax")

    # FROC monotonicity
    for _ in range(300):
        preds, gt, n = random_instance(rng)
        c = froc(preds, gt, n)
        if np.any(np.diff(c.fp_per_scan) <= 0) or np.any(np.diff(c.sensitivity) < 0):
            failures.append("froc monotone")
            break
        if len(c.fp_per_scan):
            vals = [sensitivity_at(c, r) for r in (0.125, 0.25, 0.5, 1, 2, 4, 8)]
            if vals != sorted(vals):
                failures.append("interpolated sensitivity monotone")
                break

    # scan-level fold leakage
    for _ in range(100):
        ids = [f"s{i}" for i in range(int(rng.integers(5, 60)))]
        plan = make_folds(ids, int(rng.integers(2, 6)), int(rng.integers(0, 1000)))
        cands = [Candidate(s, (float(j), 0.0, 0.0), j % 2) for j, s in enumerate(ids * 3)]
        try:
            check_no_leakage(plan, cands)
        except AssertionError:
            failures.append("leakage")
            break
        tests = [te for _, te in plan]
        if frozenset().union(*tests) != frozenset(ids) or sum(map(len, tests)) != len(ids):
            failures.append("partition")
            break

    ok = not failures
    record(9, "invariant suite", ok, "padding dims, softmax rows, FROC monotonicity, fold leakage: "
           + ("all green" if ok else f"failures {failures}"))
    assert ok


if __name__ == "__main__":
    import tempfile

    for fn in [test_c1_augmentation_arithmetic, test_c2_cpm_arithmetic, test_c3_parameter_parity,
               test_c4_gradient_check, test_c5_oracle_equivalence, test_c6_end_to_end_synthetic,
               test_c7_ablation_probe, test_c9_invariants]:
        try:
            fn()
        except AssertionError:
            pass
    with tempfile.TemporaryDirectory() as d:
        try:
            test_c8_determinism(Path(d))
        except AssertionError:
            pass
    print("\n".join(sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0]))))
