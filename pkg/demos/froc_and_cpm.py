"""Score hand-made predictions: FROC points, CPM with a bootstrap interval, FP triage.

    python3 demos/froc_and_cpm.py
"""
from mgicnn.evaluation import GroundTruthNodule, confusion_counts, cpm, froc, triage_fps
from mgicnn.volume_io import Candidate

gt = [
    GroundTruthNodule("a", (10.0, 10.0, 10.0), 6.0),
    GroundTruthNodule("a", (40.0, 40.0, 20.0), 4.0),
    GroundTruthNodule("b", (20.0, 30.0, 15.0), 8.0),
]
preds = [
    Candidate("a", (10.5, 10.0, 10.0), 1, 0.97),
    Candidate("a", (41.0, 40.0, 20.0), 1, 0.62),
    Candidate("a", (70.0, 70.0, 30.0), 0, 0.91),
    Candidate("b", (21.0, 30.0, 15.0), 1, 0.88),
    Candidate("b", (5.0, 5.0, 5.0), 0, 0.75),
    Candidate("b", (60.0, 5.0, 5.0), 0, 0.30),
    Candidate("c", (30.0, 30.0, 30.0), 0, 0.55),
]

curve = froc(preds, gt, num_scans=3)
for fps, sens in curve.points:
    print(f"  {fps:.3f} FP/scan -> sensitivity {sens:.3f}")

result = cpm(preds, gt, num_scans=3, bootstrap_n=500, seed=0)
print("sensitivity at the seven rates:", [round(result.sensitivities[r], 3) for r in sorted(result.sensitivities)])
print(f"CPM {result.average:.3f}, 95% CI [{result.ci_low:.3f}, {result.ci_high:.3f}]")
print("TP/FP/FN at 0.5:", confusion_counts(preds, gt))
print("false positives by confidence band:", triage_fps(preds, gt).counts)
