from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from dentage.cli import main
from dentage.config import ExperimentConfig, load_config, write_config
from dentage.dataset import load_manifest
from dentage.errors import ConfigError, MissingFile, UnknownConfigKey
from dentage.harness import SWEEP_COLUMNS, evaluate_records, read_sweep_report
from dentage.trainer import read_history

TINY_INI = """\
[dataset]
manifest = {manifest}
train_count = 24
val_count = 8
test_count = 8
image_height = 96
image_width = 96

[model]
backbone = InceptionV3
cut_block_index = 3
pretrained = false

[training]
max_epochs = 2
plateau_patience = 1
early_stop_patience = 2
batch_size = 8

[output]
dir = run
"""


def write_ini(tmp_path, manifest, extra="", name="exp.ini"):
    path = tmp_path / name
    path.write_text(TINY_INI.format(manifest=manifest) + extra, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained_run(tiny_synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_ini(root, tiny_synth_dir / "manifest.csv")
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
    return root, cfg, root / "run"


# --- config ----------------------------------------------------------------


def test_defaults_mirror_protocol(tmp_path, tiny_synth_dir):
    path = tmp_path / "min.ini"
    path.write_text(f"[dataset]\nmanifest = {tiny_synth_dir / 'manifest.csv'}\n")
    cfg = load_config(path)
    assert cfg.dataset.counts == (962, 170, 200) and cfg.dataset.image_height == 256
    assert cfg.training.max_epochs == 500 and cfg.training.plateau_factor == 0.8
    assert cfg.training.plateau_patience == 7 and cfg.training.early_stop_patience == 25
    assert cfg.augmentation.brightness_range == (0.7, 1.1) and cfg.model.pretrained


def test_config_round_trip(tmp_path, tiny_synth_dir):
    cfg = load_config(write_ini(tmp_path, tiny_synth_dir / "manifest.csv", "\n[sweep]\ncuts = 3, 5\n"))
    again = load_config(write_config(cfg, tmp_path / "copy.ini"))
    assert again == cfg and again.digest() == cfg.digest()
    assert isinstance(cfg, ExperimentConfig) and cfg.sweep.cuts == (3, 5)


@pytest.mark.parametrize("old,new,exc", [
    ("batch_size = 8", "batch_size = 8\nlearning_rate = 1", UnknownConfigKey),
    ("[output]", "[extras]\na = 1\n\n[output]", UnknownConfigKey),
    ("[output]", "[augmentation]\nzoom_fraction = 2\n\n[output]", ConfigError),
    ("batch_size = 8", "batch_size = eight", ConfigError),
])
def test_config_rejections(tmp_path, tiny_synth_dir, old, new, exc):
    path = tmp_path / "bad.ini"
    path.write_text(TINY_INI.format(manifest=tiny_synth_dir / "manifest.csv").replace(old, new))
    with pytest.raises(exc):
        load_config(path)


def test_config_model_checks(tmp_path, tiny_synth_dir):
    base = TINY_INI.format(manifest=tiny_synth_dir / "manifest.csv")
    for old, new in (("cut_block_index = 3", "cut_block_index = 12"), ("backbone = InceptionV3", "backbone = VGG16"),
                     ("backbone = InceptionV3", "backbone = AlexNet"), ("pretrained = false", "pretrained = maybe")):
        (tmp_path / "m.ini").write_text(base.replace(old, new))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "m.ini")
    (tmp_path / "m.ini").write_text(base.replace(str(tiny_synth_dir / "manifest.csv"), "missing.csv"))
    with pytest.raises(MissingFile):
        load_config(tmp_path / "m.ini")


# --- commands ----------------------------------------------------------------


def test_train_artifacts(trained_run):
    _, _, run = trained_run
    for name in ("weights.pt", "model.json", "history.csv", "curves.png", "config.ini"):
        assert (run / name).is_file(), name
    meta = json.loads((run / "model.json").read_text())
    assert meta["train_config_hash"] and meta["dataset"]["counts"] == [24, 8, 8]
    assert len(read_history(run / "history.csv")) == 2


def test_train_is_deterministic_and_refuses_clobber(trained_run, capsys):
    root, cfg, run = trained_run
    assert main(["train", "--config", str(cfg)]) == 1
    assert "OutputExists" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--deterministic", "--out", str(root / "again")]) == 0
    assert (root / "again" / "history.csv").read_bytes() == (run / "history.csv").read_bytes()


def test_evaluate(trained_run, tiny_synth_dir):
    root, _, run = trained_run
    out = root / "eval"
    assert main(["evaluate", "--checkpoint", str(run), "--manifest", str(tiny_synth_dir / "manifest.csv"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert set(report) == {"mse", "rmse", "mae", "r2", "n"} and report["n"] == 8
    assert len((out / "predictions.csv").read_text().splitlines()) == 9
    assert (out / "scatter.png").is_file() and (out / "metrics.csv").is_file()


def test_evaluate_perfect_stub(tmp_path, tiny_synth_dir):
    records = load_manifest(tiny_synth_dir / "manifest.csv")
    report, _ = evaluate_records(lambda recs: [r.age_years for r in recs], records, tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["r2"] == 1.0 == report.r2


def test_evaluate_rejects_mismatched_weights(trained_run, tiny_synth_dir, tmp_path, capsys):
    _, _, run = trained_run
    bad = tmp_path / "bad"
    shutil.copytree(run, bad)
    meta = json.loads((bad / "model.json").read_text())
    meta["cut_block_index"] = 5
    (bad / "model.json").write_text(json.dumps(meta))
    code = main(["evaluate", "--checkpoint", str(bad), "--manifest", str(tiny_synth_dir / "manifest.csv")])
    assert code == 2 and "CheckpointMismatch" in capsys.readouterr().err


def test_explain(trained_run, tiny_synth_dir, capsys):
    root, _, run = trained_run
    image = tiny_synth_dir / "images" / "synth_00000.png"
    outs = [root / "x1.png", root / "x2.png"]
    for o in outs:
        assert main(["explain", "--checkpoint", str(run), "--image", str(image), "--out", str(o)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    meta = json.loads(outs[0].with_suffix(".json").read_text())
    assert np.isfinite(meta["predicted_age"]) and meta["target_layer"] == "features.mixed3"
    assert main(["explain", "--checkpoint", str(run), "--image", str(root / "nope.png"),
                 "--out", str(root / "x3.png")]) != 0


def test_sweep_params_only(tmp_path, tiny_synth_dir):
    cfg = write_ini(tmp_path, tiny_synth_dir / "manifest.csv")
    assert main(["sweep", "--config", str(cfg), "--sweep", "cuts", "--params-only", "--out", str(tmp_path / "c")]) == 0
    rows = read_sweep_report(tmp_path / "c" / "sweep_cuts.csv")
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert [r["model_label"] for r in rows] == [f"InceptionV3Mixed_0{k}" for k in range(3, 10)]
    params = [int(r["total_trainable_params"]) for r in rows]
    assert params == sorted(set(params))
    assert (tmp_path / "c" / "sweep_cuts.md").read_text().startswith("| model_label |")
    assert main(["sweep", "--config", str(cfg), "--sweep", "backbones", "--params-only",
                 "--out", str(tmp_path / "b")]) == 0
    rows = read_sweep_report(tmp_path / "b" / "sweep_backbones.csv")
    assert sorted(r["model_label"] for r in rows) == sorted(
        ["InceptionV3", "MobileNetV2", "ResNet50V2", "EfficientNetB4", "VGG16", "DenseNet201"])


def test_sweep_trains_and_records_failures(tmp_path, tiny_synth_dir):
    cfg = write_ini(tmp_path, tiny_synth_dir / "manifest.csv", "\n[sweep]\ncuts = 3\nbackbones = MobileNetV2\n")
    assert main(["sweep", "--config", str(cfg), "--sweep", "cuts", "--out", str(tmp_path / "s")]) == 0
    (row,) = read_sweep_report(tmp_path / "s" / "sweep_cuts.csv")
    assert row["status"] == "ok" and float(row["test_mae"]) >= 0
    assert (tmp_path / "s" / "InceptionV3Mixed_03" / "test" / "metrics.json").is_file()
    text = cfg.read_text().replace("pretrained = false", "pretrained = true\nweights_dir = empty_cache")
    cfg.write_text(text)
    assert main(["sweep", "--config", str(cfg), "--sweep", "backbones", "--out", str(tmp_path / "f")]) == 0
    (row,) = read_sweep_report(tmp_path / "f" / "sweep_backbones.csv")
    assert row["status"].startswith("failed: WeightsUnavailable")


def test_empty_sweep_is_usage_error(tmp_path, tiny_synth_dir, capsys):
    cfg = write_ini(tmp_path, tiny_synth_dir / "manifest.csv", "\n[sweep]\ncuts =\n")
    assert main(["sweep", "--config", str(cfg), "--sweep", "cuts", "--out", str(tmp_path / "e")]) == 1
    assert "NoModels" in capsys.readouterr().err


def test_dataset_report(tmp_path, tiny_synth_dir):
    assert main(["dataset-report", "--manifest", str(tiny_synth_dir / "manifest.csv"), "--out", str(tmp_path / "r")]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["count"] == 40 and (tmp_path / "r" / "age_histogram.png").is_file()
    same = tmp_path / "same.csv"
    same.write_text("image_path,age_years\n" + "".join(f"i{i}.png,33\n" for i in range(5)))
    assert main(["dataset-report", "--manifest", str(same), "--out", str(tmp_path / "s")]) == 0
    counts = json.loads((tmp_path / "s" / "summary.json").read_text())["bin_counts"]
    assert sum(c > 0 for c in counts) == 1 and sum(counts) == 5
    cohort = tmp_path / "cohort.csv"
    ages = np.linspace(8, 68, 1332)
    cohort.write_text("image_path,age_years\n" + "".join(f"i{i}.png,{a}\n" for i, a in enumerate(ages)))
    assert main(["dataset-report", "--manifest", str(cohort), "--out", str(tmp_path / "c")]) == 0
    s = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert s["count"] == 1332 and s["bin_edges"][0] <= 8 and s["bin_edges"][-1] >= 68


def test_synth_command(tmp_path):
    out = tmp_path / "syn"
    assert main(["synth", "--out", str(out), "--count", "16", "--seed", "1"]) == 0
    assert len(load_manifest(out / "manifest.csv")) == 16
    cfg = load_config(out / "experiment.ini")
    assert cfg.dataset.counts == (12, 2, 2) and cfg.model.cut_block_index == 4 and not cfg.model.pretrained


def test_exit_codes(tmp_path, tiny_synth_dir, capsys):
    assert main_exit([]) == 1
    assert main_exit(["train"]) == 1
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 1
    missing = write_ini(tmp_path, tmp_path / "missing.csv", name="missing.ini")
    assert main(["train", "--config", str(missing)]) == 1
    assert "MissingFile" in capsys.readouterr().err
    # an undecodable image is a runtime failure
    broken = tmp_path / "broken"
    shutil.copytree(tiny_synth_dir, broken)
    (broken / "images" / "synth_00003.png").write_bytes(b"junk")
    cfg = write_ini(broken, broken / "manifest.csv")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "DecodeFailure" in capsys.readouterr().err


def main_exit(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "dentage", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "evaluate", "sweep", "explain", "dataset-report", "synth"):
        assert cmd in out.stdout
    if shutil.which("dentage"):
        assert subprocess.run(["dentage", "synth"], capture_output=True).returncode == 1
