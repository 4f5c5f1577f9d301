"""``dentage`` command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import DentageError

log = logging.getLogger("dentage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cmd_train(args):
    from .config import load_config
    from .harness import run_train

    cfg = load_config(args.config).with_overrides(args.seed, args.deterministic, args.out)
    ckpt, state, model = run_train(cfg, overwrite=args.overwrite)
    print(f"{model.label}: best val_loss {state.best_val_loss:.4f} at epoch {state.best_epoch} "
          f"({state.epoch} epochs, {state.stop_reason}); checkpoint {ckpt}")


def _cmd_evaluate(args):
    from .harness import evaluate_checkpoint

    out = args.out or Path(args.checkpoint) / f"eval_{args.split}"
    report, _ = evaluate_checkpoint(args.checkpoint, args.manifest, args.split, out, args.overwrite)
    print(report.to_json())


def _cmd_sweep(args):
    from .config import load_config
    from .harness import run_sweep

    cfg = load_config(args.config, require_manifest=not args.params_only)
    cfg = cfg.with_overrides(args.seed, args.deterministic, args.out)
    rows = run_sweep(cfg, args.sweep, cfg.output_dir, args.params_only, args.overwrite)
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in dataclasses.asdict(r).items()))
    if any(r.status != "ok" for r in rows):
        log.warning("%d of %d sweep rows failed", sum(r.status != "ok" for r in rows), len(rows))


def _cmd_explain(args):
    from .harness import explain

    result = explain(args.checkpoint, args.image, args.out, args.layer, args.alpha, args.overwrite)
    print(json.dumps({"predicted_age": result.predicted_age, "target_layer": result.target_layer}))


def _cmd_dataset_report(args):
    from .harness import dataset_report

    summary = dataset_report(args.manifest, args.out, args.overwrite)
    print(json.dumps({k: summary[k] for k in ("count", "min", "max", "mean")}))


def _cmd_synth(args):
    from .config import DatasetSection, ExperimentConfig, ModelSection, write_config
    from .harness import guard_output
    from .synth import SynthConfig, generate

    out = guard_output(args.out, args.overwrite)
    cfg = SynthConfig(count=args.count, seed=args.seed, noise_sigma=args.noise)
    generate(cfg, out)
    n_val = n_test = max(1, args.count // 8)
    n_train = args.count - n_val - n_test
    starter = ExperimentConfig(
        dataset=DatasetSection(manifest=Path("manifest.csv"), train_count=n_train, val_count=n_val,
                               test_count=n_test, seed=args.seed),
        model=ModelSection(backbone="InceptionV3", cut_block_index=4, pretrained=False),
        output_dir=Path("run"),
    )
    write_config(starter, out / "experiment.ini")
    print(f"wrote {args.count} images, manifest.csv and experiment.ini to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dentage", description="Dental age estimation from panoramic radiographs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override dataset and training seeds")
            sp.add_argument("--deterministic", action="store_true", help="force deterministic kernels")

    sp = sub.add_parser("train", help="train one model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None, help="output directory (default: [output] dir)")
    common(sp)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--out", default=None, help="output directory (default: <checkpoint>/eval_<split>)")
    common(sp, seed=False)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("sweep", help="train/evaluate a list of backbones or InceptionV3 cuts")
    sp.add_argument("--config", required=True)
    sp.add_argument("--sweep", choices=("backbones", "cuts"), required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--params-only", action="store_true", help="count parameters without training")
    common(sp)
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("explain", help="Grad-CAM overlay and predicted age for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="overlay PNG path (a .json sidecar is written next to it)")
    sp.add_argument("--layer", default=None, help="target layer (default: last feature map)")
    sp.add_argument("--alpha", type=float, default=0.4)
    common(sp, seed=False)
    sp.set_defaults(func=_cmd_explain)

    sp = sub.add_parser("dataset-report", help="age histogram and summary statistics")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=_cmd_dataset_report)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with a known age signal")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=600)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.03)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except DentageError as exc:
        print(f"dentage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"dentage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
