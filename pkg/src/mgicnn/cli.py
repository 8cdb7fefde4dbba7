"""``mgicnn`` command line: synth, extract, train, predict, evaluate.

Settings resolve as built-in defaults < YAML config file < environment
(path roots only) < command-line flags.  Every run writes the effective
configuration next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import click
import numpy as np
import yaml

from .evaluation import (
    FP_RATES,
    TRIAGE_BANDS,
    confusion_counts,
    cpm,
    froc,
    plot_froc,
    read_ground_truth,
    read_predictions,
    triage_fps,
    write_froc_csv,
    write_predictions,
)
from .model import ModelConfig, build, count_parameters, default_config, desk_config, load_checkpoint, save_checkpoint
from .patching import PatchCache, build_patch_cache
from .synthetic import PlacementError, SyntheticSpec, export, generate
from .training import FoldPlan, NonFiniteLoss, TrainConfig, assemble_training_set, check_no_leakage, make_folds, train, write_manifest
from .volume_io import MetaImageError, read_candidates

log = logging.getLogger("mgicnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PATH_ENV = {"data_dir": "MGICNN_DATA_DIR", "cache_dir": "MGICNN_CACHE_DIR", "output_dir": "MGICNN_OUTPUT_DIR"}

CACHE_FILE = "patches.npz"
FOLDS_FILE = "folds.json"

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "paths": {"data_dir": "data", "cache_dir": "cache", "output_dir": "runs"},
    "synthetic": {},
    "model": {"preset": "desk"},
    "train": {},
    "folds": {"k": 5, "select": None},
}


class DataError(Exception):
    """Inputs are missing, malformed or inconsistent."""


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise click.UsageError(f"cannot read config {path}: {exc.strerror}")
        except yaml.YAMLError as exc:
            raise click.UsageError(f"config {path} is not valid YAML: {exc}")
        if not isinstance(user, dict):
            raise click.UsageError(f"config {path} must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise click.UsageError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    for key, env in PATH_ENV.items():
        if os.environ.get(env):
            cfg["paths"][key] = os.environ[env]
    return cfg


def _apply_flags(cfg: dict, section: Optional[str], **flags) -> dict:
    for k, v in flags.items():
        if v is None:
            continue
        if section is None:
            cfg[k] = v
        else:
            cfg[section][k] = v
    return cfg


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = dict(cfg["synthetic"])
    d.setdefault("seed", cfg["seed"])
    try:
        return SyntheticSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"synthetic section: {exc}")


def model_config(cfg: dict) -> ModelConfig:
    d = dict(cfg["model"])
    preset = d.pop("preset", "desk")
    factory = {"desk": desk_config, "default": default_config}.get(preset)
    if factory is None:
        raise click.UsageError(f"model preset must be 'desk' or 'default', got {preset!r}")
    try:
        return factory(**d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"model section: {exc}")


def train_config(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"train section: {exc}")


def _paths(cfg: dict) -> tuple[Path, Path, Path]:
    p = cfg["paths"]
    return Path(p["data_dir"]), Path(p["cache_dir"]), Path(p["output_dir"])


def _echo_config(cfg: dict) -> None:
    log.info("effective config:\n%s", yaml.safe_dump(cfg, sort_keys=True).rstrip())


def _selected_folds(cfg: dict, k: int) -> list[int]:
    sel = cfg["folds"].get("select")
    if sel is None:
        return list(range(k))
    sel = [sel] if isinstance(sel, int) else list(sel)
    bad = [i for i in sel if not 0 <= i < k]
    if bad:
        raise click.UsageError(f"fold indices {bad} outside 0..{k - 1}")
    return sel


def _read_plan(output_dir: Path) -> FoldPlan:
    path = output_dir / FOLDS_FILE
    if not path.exists():
        raise DataError(f"{path} not found; run `mgicnn train` first")
    d = json.loads(path.read_text())
    all_ids = frozenset(s for t in d["test_series"] for s in t)
    return FoldPlan(tuple((all_ids - frozenset(t), frozenset(t)) for t in d["test_series"]))


def _load_cache(cache_dir: Path) -> PatchCache:
    path = cache_dir / CACHE_FILE
    if not path.exists():
        raise DataError(f"{path} not found; run `mgicnn extract` first")
    return PatchCache.load(path)


# --------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")
@click.option("--data-dir", help="Dataset root (volumes/, candidates.csv, annotations.csv).")
@click.option("--cache-dir", help="Patch cache directory.")
@click.option("--output-dir", help="Checkpoints, predictions and reports.")
@click.option("--seed", type=int, help="Seed for every stochastic component.")
@click.option("--workers", type=click.IntRange(min=1), help="Data-stage worker processes (default 1).")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx, config_path, data_dir, cache_dir, output_dir, seed, workers, verbose):
    """Multi-scale 3D CNN false-positive reduction for lung nodule candidates."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    cfg = load_config(config_path)
    _apply_flags(cfg, "paths", data_dir=data_dir, cache_dir=cache_dir, output_dir=output_dir)
    _apply_flags(cfg, None, seed=seed, workers=workers)
    ctx.obj = cfg


@main.command()
@click.option("--num-scans", type=click.IntRange(min=0))
@click.pass_obj
def synth(cfg, num_scans):
    """Generate a synthetic dataset into the data directory."""
    _apply_flags(cfg, "synthetic", num_scans=num_scans)
    spec = synthetic_spec(cfg)
    _echo_config(cfg)
    data_dir, _, _ = _paths(cfg)
    try:
        data = generate(spec)
    except PlacementError as exc:
        raise DataError(str(exc))
    paths = export(data, data_dir, spec)
    write_manifest(data_dir / "synth_manifest.json", command="synth", config=cfg,
                   scans=len(data.volumes), nodules=len(data.gt), candidates=len(data.candidates))
    click.echo(f"wrote {len(data.volumes)} scans, {len(data.gt)} nodules, "
               f"{len(data.candidates)} candidates to {paths['volumes'].parent}")
    return EXIT_OK


def _extract_group(args):
    volume_path, cands = args
    from .volume_io import load_volume

    vol = load_volume(volume_path)
    return build_patch_cache({vol.series_id: vol}, cands)


@main.command()
@click.option("--candidates", "candidates_path", type=click.Path(dir_okay=False), help="Candidate CSV (default: data dir).")
@click.pass_obj
def extract(cfg, candidates_path):
    """Build the multi-scale patch cache for every candidate."""
    _echo_config(cfg)
    data_dir, cache_dir, _ = _paths(cfg)
    cpath = Path(candidates_path) if candidates_path else data_dir / "candidates.csv"
    if not cpath.exists():
        raise DataError(f"candidate file {cpath} not found")
    candidates = read_candidates(cpath)
    vol_dir = data_dir / "volumes"
    available = {p.stem: p for p in sorted(vol_dir.glob("*.mhd"))} if vol_dir.is_dir() else {}
    if not available:
        raise DataError(f"no .mhd volumes under {vol_dir}")

    groups: dict[str, list] = {}
    for c in candidates:
        groups.setdefault(c.series_id, []).append(c)
    jobs = [(available[s], cs) for s, cs in groups.items() if s in available]
    missing = [c for s, cs in groups.items() if s not in available for c in cs]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            parts = list(pool.map(_extract_group, jobs))
    else:
        parts = [_extract_group(j) for j in jobs]

    # stitch per-series caches back together in input order
    by_key, skipped = {}, [(c, "missing series") for c in missing]
    for cache, skip in parts:
        skipped += skip
        for i, c in enumerate(cache.candidates):
            by_key[(c.series_id, c.world_mm)] = (cache.patches[i], cache.shifted.get(i))
    kept, patches, shifted = [], [], {}
    for c in candidates:
        rec = by_key.get((c.series_id, c.world_mm))
        if rec is None:
            continue
        if rec[1] is not None:
            shifted[len(kept)] = rec[1]
        kept.append(c)
        patches.append(rec[0])
    cache = PatchCache(kept, np.stack(patches) if patches else np.zeros((0, 3, 6, 20, 20), np.float32), shifted)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache.save(cache_dir / CACHE_FILE)
    write_manifest(cache_dir / "extract_manifest.json", command="extract", config=cfg, candidates=len(candidates),
                   records=len(kept), augmented_nodules=len(shifted),
                   skipped=[{"series_id": c.series_id, "world_mm": list(c.world_mm), "reason": r} for c, r in skipped])
    for c, reason in skipped:
        click.echo(f"skipped {c.series_id} {c.world_mm}: {reason}", err=True)
    click.echo(f"{len(candidates)} candidates in, {len(kept)} records out, {len(skipped)} skipped")
    if any(r == "missing series" for _, r in skipped):
        return EXIT_DATA
    return EXIT_OK


@main.command(name="train")
@click.option("--variant", type=click.Choice(["MGI", "RI", "LR", "ZI", "ZO"]))
@click.option("--fusion", type=click.Choice(["sum", "concat", "conv1x1"]))
@click.option("--preset", type=click.Choice(["desk", "default"]), help="Channel widths: desk-scale or full size.")
@click.option("--epochs", type=int)
@click.option("--lr", "base_lr", type=float)
@click.option("--lr-decay", "lr_decay_per_epoch", type=float)
@click.option("--batch-size", type=int)
@click.option("--momentum", type=float)
@click.option("--dropout", type=float)
@click.option("--k", type=int, help="Number of folds.")
@click.option("--fold", "folds", type=int, multiple=True, help="Train only these folds (repeatable).")
@click.pass_obj
def train_cmd(cfg, variant, fusion, preset, epochs, base_lr, lr_decay_per_epoch, batch_size, momentum, dropout, k, folds):
    """Train one network per cross-validation fold."""
    import torch

    _apply_flags(cfg, "model", variant=variant, fusion=fusion, preset=preset)
    _apply_flags(cfg, "train", epochs=epochs, base_lr=base_lr, lr_decay_per_epoch=lr_decay_per_epoch,
                 batch_size=batch_size, momentum=momentum, dropout=dropout)
    _apply_flags(cfg, "folds", k=k, select=list(folds) if folds else None)
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    _echo_config(cfg)
    _, cache_dir, out_dir = _paths(cfg)
    cache = _load_cache(cache_dir)
    series = sorted({c.series_id for c in cache.candidates})
    try:
        plan = make_folds(series, cfg["folds"]["k"], cfg["seed"])
    except ValueError as exc:
        raise DataError(str(exc))
    check_no_leakage(plan, cache.candidates)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / FOLDS_FILE).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    torch.set_num_threads(1)
    for i in _selected_folds(cfg, plan.k):
        train_series, _ = plan[i]
        fold_cfg = dataclasses.replace(tcfg, seed=tcfg.seed + i)
        stream = assemble_training_set(train_series, None, cache, seed=fold_cfg.seed)
        model = build(mcfg, seed=cfg["seed"] + i)

        def progress(epoch, loss, lr, i=i):
            log.info("fold %d epoch %d/%d loss %.4f lr %.6g", i, epoch + 1, fold_cfg.epochs, loss, lr)

        result = train(model, stream, fold_cfg, progress=progress)
        fold_dir = out_dir / f"fold{i}"
        fold_dir.mkdir(exist_ok=True)
        save_checkpoint(model, fold_dir / "model.ckpt", {"fold": i, "train": dataclasses.asdict(fold_cfg)})
        write_manifest(fold_dir / "manifest.json", command="train", config=cfg, fold=i,
                       model=mcfg, train=fold_cfg, parameters=count_parameters(model), samples=len(stream),
                       epoch_loss=result.epoch_loss, epoch_lr=result.epoch_lr, wall_time_s=result.wall_time_s)
        click.echo(f"fold {i}: {count_parameters(model)} parameters, final loss {result.epoch_loss[-1]:.4f}, "
                   f"checkpoint {fold_dir / 'model.ckpt'}")
    return EXIT_OK


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Single checkpoint (needs exactly one --fold).")
@click.option("--fold", "folds", type=int, multiple=True)
@click.option("--variant", type=click.Choice(["MGI", "RI", "LR", "ZI", "ZO"]), help="Expected variant; checked against the checkpoint.")
@click.pass_obj
def predict(cfg, checkpoint, folds, variant):
    """Score each fold's held-out candidates with that fold's checkpoint."""
    from .experiment import predict_candidates

    _apply_flags(cfg, "model", variant=variant)
    _apply_flags(cfg, "folds", select=list(folds) if folds else None)
    model_config(cfg)  # validate the section early
    expected = cfg["model"].get("variant")
    _echo_config(cfg)
    _, cache_dir, out_dir = _paths(cfg)
    cache = _load_cache(cache_dir)
    plan = _read_plan(out_dir)
    selected = _selected_folds(cfg, plan.k)
    if checkpoint and len(selected) != 1:
        raise click.UsageError("--checkpoint needs exactly one --fold")
    rows = {}
    for i in selected:
        ckpt = Path(checkpoint) if checkpoint else out_dir / f"fold{i}" / "model.ckpt"
        if not ckpt.exists():
            raise DataError(f"checkpoint {ckpt} not found")
        model, _ = load_checkpoint(ckpt)
        if expected and model.config.variant != expected:
            raise click.UsageError(f"checkpoint {ckpt} holds a {model.config.variant} network, config expects {expected}")
        _, test_series = plan[i]
        idx = [j for j, c in enumerate(cache.candidates) if c.series_id in test_series]
        preds = predict_candidates(model, cache, idx)
        write_predictions(preds, out_dir / f"fold{i}" / "predictions.csv")
        rows.update(zip(idx, preds))
        click.echo(f"fold {i}: {len(preds)} predictions")
    combined = [rows[j] for j in sorted(rows)]
    write_predictions(combined, out_dir / "predictions.csv")
    write_manifest(out_dir / "predict_manifest.json", command="predict", config=cfg, folds=selected, rows=len(combined))
    click.echo(f"wrote {len(combined)} predictions to {out_dir / 'predictions.csv'}")
    return EXIT_OK


@main.command()
@click.option("--predictions", "pred_path", type=click.Path(dir_okay=False), help="Default: <output>/predictions.csv")
@click.option("--annotations", "gt_path", type=click.Path(dir_okay=False), help="Default: <data>/annotations.csv")
@click.option("--num-scans", type=click.IntRange(min=1), help="Default: number of volumes in the data dir.")
@click.option("--bootstrap", type=click.IntRange(min=1), default=1000, show_default=True)
@click.pass_obj
def evaluate(cfg, pred_path, gt_path, num_scans, bootstrap):
    """FROC / CPM report with bootstrap CI, confusion counts and FP triage."""
    _echo_config(cfg)
    data_dir, _, out_dir = _paths(cfg)
    pred_path = Path(pred_path) if pred_path else out_dir / "predictions.csv"
    gt_path = Path(gt_path) if gt_path else data_dir / "annotations.csv"
    for p in (pred_path, gt_path):
        if not p.exists():
            raise DataError(f"{p} not found")
    preds, gt = read_predictions(pred_path), read_ground_truth(gt_path)
    if not gt:
        raise DataError(f"{gt_path} holds no ground-truth nodules; sensitivity is undefined")
    scans = sorted({p.series_id for p in preds} | {g.series_id for g in gt})
    vol_dir = data_dir / "volumes"
    if vol_dir.is_dir():
        scans = sorted(set(scans) | {p.stem for p in vol_dir.glob("*.mhd")})
    n = num_scans or len(scans)
    result = cpm(preds, gt, n, bootstrap_n=bootstrap, seed=cfg["seed"], scan_ids=scans if n >= len(scans) else None)
    curve = froc(preds, gt, n)
    tp, fp, fn = confusion_counts(preds, gt)
    triage = triage_fps(preds, gt)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_froc_csv(curve, out_dir / "froc.csv")
    plot_froc(curve, out_dir / "froc.png", result)
    report = {
        "num_scans": n,
        "num_gt": len(gt),
        "num_predictions": len(preds),
        "sensitivity": {str(r): result.sensitivities[r] for r in FP_RATES},
        "cpm": result.average,
        "ci95": [result.ci_low, result.ci_high],
        "bootstrap_n": bootstrap,
        "at_0.5": {"tp_in_gt": tp, "fp": fp, "fn": fn},
        "fp_triage": {name: triage.counts[name] for name, _, _ in TRIAGE_BANDS},
    }
    write_manifest(out_dir / "evaluation.json", command="evaluate", config=cfg, report=report)
    for r in FP_RATES:
        click.echo(f"sensitivity @ {r:g} FP/scan: {result.sensitivities[r]:.4f}")
    click.echo(f"CPM {result.average:.4f}  95% CI [{result.ci_low:.4f}, {result.ci_high:.4f}]")
    click.echo(f"threshold 0.5: TP in GT {tp}/{len(gt)}, FP {fp}, FN {fn}")
    click.echo("FP triage: " + ", ".join(f"{k} {v}" for k, v in report["fp_triage"].items()))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto the documented exit codes."""
    try:
        rv = main.main(args=argv, prog_name="mgicnn", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except (DataError, MetaImageError, OSError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    return rv if isinstance(rv, int) else EXIT_OK


def entry_point() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry_point()
