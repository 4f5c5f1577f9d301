"""Experiment-level operations behind the ``dentage`` CLI."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import plots
from .backbones import (
    BACKBONES,
    CUT_RANGE,
    REFERENCE_CUT_PARAMS,
    REFERENCE_PARAMS,
    build_extractor,
    count_trainable_parameters,
    model_label,
)
from .config import ExperimentConfig, write_config
from .dataset import (
    DEFAULT_AGE_BOUNDS,
    ChannelPolicy,
    PreprocessSpec,
    load_image,
    load_manifest,
    normalize,
    split_dataset,
)
from .errors import CountMismatch, DentageError, MissingFile, NoModels, OutputExists
from .gradcam import HeatmapOverlay, grad_cam
from .metrics import MetricsReport, evaluate
from .regressor import assemble, load_checkpoint
from .trainer import ImageBank, evaluate_loss, train

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("model_label", "total_trainable_params", "test_mae", "test_rmse", "test_r2",
                 "reference_params", "param_ratio", "status")


def guard_output(path, overwrite: bool) -> Path:
    """Refuse to write into an existing non-empty directory (or over a file) unless ``overwrite``."""
    path = Path(path)
    occupied = path.is_file() or (path.is_dir() and any(path.iterdir()))
    if occupied and not overwrite:
        raise OutputExists(f"{path} already exists; pass --overwrite to replace it")
    if occupied and path.is_dir():
        shutil.rmtree(path)
    return path


def preprocess_for(cfg: ExperimentConfig) -> PreprocessSpec:
    d = cfg.dataset
    return PreprocessSpec(d.image_height, d.image_width, ChannelPolicy(d.channel_policy), cfg.model.backbone)


def dataset_meta(cfg: ExperimentConfig) -> dict:
    d = cfg.dataset
    return {
        "manifest": str(d.manifest),
        "counts": list(d.counts),
        "seed": d.seed,
        "age_min": d.age_min,
        "age_max": d.age_max,
        "channel_policy": d.channel_policy,
    }


def load_split(cfg: ExperimentConfig):
    d = cfg.dataset
    records = load_manifest(d.manifest, (d.age_min, d.age_max))
    return split_dataset(records, d.counts, d.seed)


def build_model(cfg: ExperimentConfig, backbone=None, cut=..., seed=None):
    torch.manual_seed(cfg.training.seed if seed is None else seed)
    name = backbone or cfg.model.backbone
    cut = cfg.model.cut_block_index if cut is ... else cut
    d = cfg.dataset
    extractor = build_extractor(name, cut, cfg.model.pretrained, (d.image_height, d.image_width, 3),
                                cfg.model.weights_dir)
    return assemble(extractor)


def run_train(cfg: ExperimentConfig, overwrite: bool = False, split=None, model=None):
    """Train per ``cfg``; writes checkpoint, history.csv, curves.png and config.ini to ``cfg.output_dir``."""
    out = guard_output(cfg.output_dir, overwrite)
    split = split or load_split(cfg)
    model = model or build_model(cfg)
    ckpt, state = train(
        model, split, cfg.training, cfg.augmentation, out_dir=out,
        preprocess=PreprocessSpec(cfg.dataset.image_height, cfg.dataset.image_width,
                                  ChannelPolicy(cfg.dataset.channel_policy), model.normalization),
        config_hash=cfg.digest(), extra_meta={"dataset": dataset_meta(cfg)},
    )
    plots.training_curves(state.history, out / "curves.png", title=model.label)
    write_config(cfg, out / "config.ini")
    return ckpt, state, model


def write_predictions(path, records, predictions) -> Path:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "actual_age", "predicted_age"])
        for rec, p in zip(records, predictions):
            writer.writerow([str(rec.image_path), repr(float(rec.age_years)), repr(float(p))])
    return Path(path)


def evaluate_records(predict_fn, records, out_dir=None, title=None) -> tuple[MetricsReport, np.ndarray]:
    """Score ``predict_fn(records) -> ages``; with ``out_dir`` write metrics.json/.csv, predictions.csv, scatter.png."""
    preds = np.asarray(predict_fn(records), dtype=np.float64).reshape(-1)
    actual = np.array([r.age_years for r in records], dtype=np.float64)
    report = evaluate(preds, actual)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "metrics.csv").write_text(report.to_csv_row(), encoding="utf-8")
        write_predictions(out / "predictions.csv", records, preds)
        plots.actual_vs_predicted(actual, preds, out / "scatter.png", title=title)
    return report, preds


def model_predictor(model, spec: PreprocessSpec, batch_size: int = 16):
    def predict_fn(records):
        bank = ImageBank(records, spec)
        return evaluate_loss(model, bank, batch_size)[2]

    return predict_fn


def select_split(records, meta: dict, split: str):
    if split == "all":
        return records
    ds = meta.get("dataset") or {}
    counts = ds.get("counts")
    if counts is None:
        raise CountMismatch("checkpoint records no split counts; use --split all")
    if sum(counts) != len(records):
        raise CountMismatch(
            f"manifest has {len(records)} rows but the checkpoint was trained on a split of {sum(counts)}; "
            "pass the training manifest or use --split all"
        )
    return split_dataset(records, counts, ds.get("seed", 42)).part(split)


def evaluate_checkpoint(checkpoint, manifest, split: str = "test", out_dir=None, overwrite: bool = False):
    model, meta = load_checkpoint(checkpoint)
    ds = meta.get("dataset") or {}
    bounds = (ds.get("age_min", DEFAULT_AGE_BOUNDS[0]), ds.get("age_max", DEFAULT_AGE_BOUNDS[1]))
    records = select_split(load_manifest(manifest, bounds), meta, split)
    h, w, _ = meta.get("input_shape", (256, 256, 3))
    spec = PreprocessSpec(h, w, ChannelPolicy(ds.get("channel_policy", "replicate_gray_to_3")), meta["normalization"])
    out = None
    if out_dir is not None:
        out = guard_output(out_dir, overwrite)
    return evaluate_records(model_predictor(model, spec), records, out, title=f"{meta['model_label']} ({split})")


# --- sweeps -----------------------------------------------------------------


@dataclass
class SweepRow:
    model_label: str
    total_trainable_params: int | None = None
    test_mae: float | None = None
    test_rmse: float | None = None
    test_r2: float | None = None
    reference_params: float | None = None
    param_ratio: float | None = None
    status: str = "ok"

    def values(self):
        return [getattr(self, c) for c in SWEEP_COLUMNS]


def sweep_entries(cfg: ExperimentConfig, kind: str):
    if kind == "cuts":
        cuts = cfg.sweep.cuts if cfg.sweep.cuts is not None else tuple(CUT_RANGE)
        return [("InceptionV3", c) for c in cuts]
    if kind == "backbones":
        names = cfg.sweep.backbones if cfg.sweep.backbones is not None else BACKBONES
        return [(n, None) for n in names]
    raise ValueError(f"unknown sweep kind {kind!r}")


def run_sweep(cfg: ExperimentConfig, kind: str, out_dir=None, params_only: bool = False,
              overwrite: bool = False) -> list[SweepRow]:
    """Train and test each model with the shared protocol; failures are recorded per row."""
    entries = sweep_entries(cfg, kind)
    if not entries:
        raise NoModels(f"the {kind} sweep lists no models")
    out = guard_output(out_dir or cfg.output_dir, overwrite)
    out.mkdir(parents=True, exist_ok=True)
    split = None if params_only else load_split(cfg)
    rows = []
    for name, cut in entries:
        label = model_label(name, cut)
        ref = REFERENCE_CUT_PARAMS.get(cut) if cut is not None else REFERENCE_PARAMS.get(name)
        row = SweepRow(label, reference_params=ref)
        try:
            model = build_model(cfg, name, cut)
            row.total_trainable_params = count_trainable_parameters(model)
            if ref:
                row.param_ratio = row.total_trainable_params / ref
            if not params_only:
                sub = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, backbone=name, cut_block_index=cut),
                                          output_dir=out / label)
                ckpt, _, model = run_train(sub, overwrite=True, split=split, model=model)
                spec = PreprocessSpec(cfg.dataset.image_height, cfg.dataset.image_width,
                                      ChannelPolicy(cfg.dataset.channel_policy), name)
                report, _ = evaluate_records(model_predictor(model, spec), split.test, ckpt / "test",
                                             title=f"{label} (test)")
                row.test_mae, row.test_rmse, row.test_r2 = report.mae, report.rmse, report.r2
        except (DentageError, RuntimeError, ValueError) as exc:
            log.warning("sweep row %s failed: %s", label, exc)
            row.status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        rows.append(row)
    rows.sort(key=lambda r: r.model_label)
    write_sweep_report(rows, out, kind)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4g}" if abs(v) < 1e5 else f"{v:.0f}"
    return str(v)


def write_sweep_report(rows, out_dir, kind: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    csv_path = out / f"sweep_{kind}.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow(["" if v is None else v for v in r.values()])
    md_path = out / f"sweep_{kind}.md"
    lines = ["| " + " | ".join(SWEEP_COLUMNS) + " |", "|" + "---|" * len(SWEEP_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(v) for v in r.values()) + " |")
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, md_path


def read_sweep_report(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# --- explain / dataset report ----------------------------------------------


def explain(checkpoint, image_path, out_png, target_layer=None, alpha: float = 0.4,
            overwrite: bool = False) -> HeatmapOverlay:
    image_path = Path(image_path)
    if not image_path.is_file():
        raise MissingFile(f"image not found: {image_path}")
    out_png = Path(out_png)
    for p in (out_png, out_png.with_suffix(".json")):
        if p.exists() and not overwrite:
            raise OutputExists(f"{p} already exists; pass --overwrite to replace it")
    model, meta = load_checkpoint(checkpoint)
    ds = meta.get("dataset") or {}
    h, w, _ = meta.get("input_shape", (256, 256, 3))
    spec = PreprocessSpec(h, w, ChannelPolicy(ds.get("channel_policy", "replicate_gray_to_3")), meta["normalization"])
    raw = load_image(image_path, spec)
    result = grad_cam(model, normalize(raw, spec), target_layer, original=raw, alpha=alpha)
    result.save(out_png)
    return result


def dataset_report(manifest, out_dir, overwrite: bool = False, age_bounds=DEFAULT_AGE_BOUNDS) -> dict:
    records = load_manifest(manifest, age_bounds)
    if not records:
        raise CountMismatch("manifest has no rows")
    out = guard_output(out_dir, overwrite)
    out.mkdir(parents=True, exist_ok=True)
    ages = np.array([r.age_years for r in records])
    _, counts, edges = plots.age_histogram(ages, out / "age_histogram.png")
    summary = {
        "count": int(ages.size),
        "min": float(ages.min()),
        "max": float(ages.max()),
        "mean": float(ages.mean()),
        "bin_edges": [float(e) for e in edges],
        "bin_counts": [int(c) for c in counts],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary
