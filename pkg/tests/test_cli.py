import hashlib
import json

import pytest
import yaml

from mgicnn.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, run
from mgicnn.evaluation import read_predictions
from mgicnn.model import load_checkpoint
from mgicnn.volume_io import Candidate, read_candidates, write_candidates

SMALL = {
    "synthetic": {"num_scans": 5, "volume_shape": [48, 48, 24], "nodules_per_scan": 2, "distractors_per_scan": 3},
    "train": {"epochs": 1, "batch_size": 64, "base_lr": 0.01},
    "folds": {"k": 5},
}


def write_config(tmp, extra=None, **paths):
    cfg = dict(SMALL)
    cfg["paths"] = {"data_dir": str(tmp / "data"), "cache_dir": str(tmp / "cache"), "output_dir": str(tmp / "out")}
    cfg.update(extra or {})
    path = tmp / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def pipeline(tmp, *train_flags):
    cfg = write_config(tmp)
    codes = [
        run(["--config", cfg, "synth"]),
        run(["--config", cfg, "extract"]),
        run(["--config", cfg, "train", *train_flags]),
        run(["--config", cfg, "predict"]),
        run(["--config", cfg, "evaluate", "--bootstrap", "50"]),
    ]
    return codes


def digest(root):
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in {".csv", ".ckpt", ".raw", ".mhd", ".npz"})
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run_a")
    codes = pipeline(tmp, "--variant", "MGI", "--fusion", "sum")
    return tmp, codes


def test_pipeline_exit_codes(first_run):
    _, codes = first_run
    assert codes == [0, 0, 0, 0, 0]


def test_synth_wrote_scans(first_run):
    tmp, _ = first_run
    assert len(list((tmp / "data" / "volumes").glob("*.mhd"))) == 5
    assert (tmp / "data" / "synth_manifest.json").exists()


def test_extract_one_record_per_candidate(first_run, capsys):
    tmp, _ = first_run
    cands = read_candidates(tmp / "data" / "candidates.csv")
    manifest = json.loads((tmp / "cache" / "extract_manifest.json").read_text())
    assert manifest["records"] == len(cands) == manifest["candidates"]


def test_checkpoint_echoes_flags(first_run):
    tmp, _ = first_run
    model, extra = load_checkpoint(tmp / "out" / "fold0" / "model.ckpt")
    assert (model.config.variant, model.config.fusion) == ("MGI", "sum")
    manifest = json.loads((tmp / "out" / "fold0" / "manifest.json").read_text())
    assert manifest["config"]["model"]["variant"] == "MGI"
    assert manifest["config"]["train"]["epochs"] == 1


def test_predictions_partition_candidates(first_run):
    tmp, _ = first_run
    cands = read_candidates(tmp / "data" / "candidates.csv")
    plan = json.loads((tmp / "out" / "folds.json").read_text())
    rows = []
    for i, test_series in enumerate(plan["test_series"]):
        fold_rows = read_predictions(tmp / "out" / f"fold{i}" / "predictions.csv")
        assert len(fold_rows) == sum(c.series_id in test_series for c in cands)
        rows += fold_rows
    assert sorted((p.series_id, p.world_mm) for p in rows) == sorted((c.series_id, c.world_mm) for c in cands)
    assert all(0.0 <= p.probability <= 1.0 for p in rows)
    assert len(read_predictions(tmp / "out" / "predictions.csv")) == len(cands)


def test_evaluation_report(first_run):
    tmp, _ = first_run
    report = json.loads((tmp / "out" / "evaluation.json").read_text())["report"]
    assert sorted(report["fp_triage"]) == ["HC", "LC", "MC"]
    assert len(report["sensitivity"]) == 7
    assert report["ci95"][0] <= report["cpm"] <= report["ci95"][1]
    assert (tmp / "out" / "froc.csv").exists() and (tmp / "out" / "froc.png").exists()


def test_determinism_byte_identical(first_run, tmp_path):
    tmp_a, _ = first_run
    assert pipeline(tmp_path, "--variant", "MGI", "--fusion", "sum") == [0, 0, 0, 0, 0]
    a, b = digest(tmp_a), digest(tmp_path)
    assert a and a == b


def test_extract_is_idempotent(first_run):
    tmp, _ = first_run
    cache = tmp / "cache" / "patches.npz"
    before = cache.read_bytes()
    assert run(["--config", str(tmp / "config.yaml"), "extract"]) == 0
    assert cache.read_bytes() == before


def test_perfect_predictions_cpm_one(first_run, tmp_path, capsys):
    tmp, _ = first_run
    cands = read_candidates(tmp / "data" / "candidates.csv")
    perfect = tmp_path / "perfect.csv"
    from mgicnn.evaluation import write_predictions

    write_predictions([Candidate(c.series_id, c.world_mm, probability=float(c.label)) for c in cands], perfect)
    code = run(["--config", str(tmp / "config.yaml"), "--output-dir", str(tmp_path), "evaluate",
                "--predictions", str(perfect), "--bootstrap", "20"])
    assert code == 0
    report = json.loads((tmp_path / "evaluation.json").read_text())["report"]
    assert report["cpm"] == 1.0
    assert report["at_0.5"]["fp"] == 0 and report["at_0.5"]["fn"] == 0
    assert "CPM 1.0000" in capsys.readouterr().out


def test_zi_zo_same_parameter_count(first_run, tmp_path):
    tmp, _ = first_run
    counts = []
    for variant in ("ZI", "ZO"):
        out = tmp_path / variant
        code = run(["--config", str(tmp / "config.yaml"), "--output-dir", str(out), "train", "--variant", variant, "--fold", "0"])
        assert code == 0
        counts.append(json.loads((out / "fold0" / "manifest.json").read_text())["parameters"])
    assert counts[0] == counts[1]


def test_predict_variant_mismatch(first_run):
    tmp, _ = first_run
    assert run(["--config", str(tmp / "config.yaml"), "predict", "--variant", "RI"]) == EXIT_USAGE


def test_extract_reports_missing_and_degenerate(first_run, tmp_path, capsys):
    tmp, _ = first_run
    cands = read_candidates(tmp / "data" / "candidates.csv")
    extra = cands + [Candidate("no-such-scan", (0, 0, 0), 0), Candidate(cands[0].series_id, (5000.0, 0, 0), 0)]
    path = write_candidates(extra, tmp_path / "c.csv")
    code = run(["--config", str(tmp / "config.yaml"), "--cache-dir", str(tmp_path / "cache"), "extract",
                "--candidates", str(path)])
    assert code == EXIT_DATA
    out = capsys.readouterr()
    assert f"{len(extra)} candidates in, {len(cands)} records out, 2 skipped" in out.out
    assert "no-such-scan" in out.err and "outside" in out.err
    assert (tmp_path / "cache" / "patches.npz").exists()


def test_env_overrides_path_roots(first_run, tmp_path, monkeypatch):
    tmp, _ = first_run
    monkeypatch.setenv("MGICNN_OUTPUT_DIR", str(tmp_path / "env_out"))
    cfg = tmp / "config.yaml"
    assert run(["--config", str(cfg), "evaluate", "--predictions", str(tmp / "out" / "predictions.csv"),
                "--bootstrap", "10"]) == 0
    assert (tmp_path / "env_out" / "evaluation.json").exists()
    # flags still win over the environment
    assert run(["--config", str(cfg), "--output-dir", str(tmp_path / "flag_out"), "evaluate",
                "--predictions", str(tmp / "out" / "predictions.csv"), "--bootstrap", "10"]) == 0
    assert (tmp_path / "flag_out" / "evaluation.json").exists()


def test_synth_seed_reproducible(tmp_path):
    hashes = []
    for name in ("a", "b"):
        assert run(["--data-dir", str(tmp_path / name), "--seed", "7", "synth", "--num-scans", "2"]) == 0
        hashes.append(digest(tmp_path / name))
    assert hashes[0] == hashes[1]


def test_synth_default_forty_scans(tmp_path):
    assert run(["--data-dir", str(tmp_path), "synth"]) == 0
    assert len(list((tmp_path / "volumes").glob("*.mhd"))) == 40


def test_synth_invalid_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["--data-dir", str(blocker / "data"), "synth", "--num-scans", "1"]) == EXIT_DATA
    assert not list(tmp_path.rglob("*.csv"))


def test_usage_errors(tmp_path):
    assert run(["train", "--variant", "XX"]) == EXIT_USAGE
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run(["--config", str(tmp_path / "missing.yaml"), "synth"]) == EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus_section: 1\n")
    assert run(["--config", str(bad), "synth"]) == EXIT_USAGE
    assert run(["--help"]) == 0


def test_evaluate_empty_gt(tmp_path):
    (tmp_path / "p.csv").write_text("seriesuid,coordX,coordY,coordZ,probability\na,0,0,0,0.5\n")
    (tmp_path / "g.csv").write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\n")
    code = run(["--output-dir", str(tmp_path), "--data-dir", str(tmp_path), "evaluate",
                "--predictions", str(tmp_path / "p.csv"), "--annotations", str(tmp_path / "g.csv")])
    assert code == EXIT_DATA


def test_missing_cache_is_data_error(tmp_path):
    assert run(["--cache-dir", str(tmp_path), "train", "--epochs", "1"]) == EXIT_DATA


def test_nan_loss_exit_code(first_run, tmp_path):
    tmp, _ = first_run
    code = run(["--config", str(tmp / "config.yaml"), "--output-dir", str(tmp_path), "train", "--fold", "0",
                "--lr", "1e30", "--momentum", "0.99"])
    assert code == EXIT_NUMERIC
