"""Command-line entry point: ``dctbev {synth,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 runtime or domain error, 2 usage or config error.
``DCTBEV_OUTPUT_ROOT`` sets the default output root for eval and predict.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

OUTPUT_ROOT_ENV = "DCTBEV_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("dctbev")


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)
    summary: str = ""


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "outputs"))


def cmd_synth(args) -> CommandResult:
    from .data import DatasetConfig, build_dataset

    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    cfg = DatasetConfig(root=args.out, seed=args.seed, difficulty=args.difficulty,
                        image_size=args.image_size, grid_size=args.grid_size,
                        noise_std=args.noise_std, workers=args.workers)
    manifest = build_dataset(args.n, cfg)
    n_val = len(manifest.split("val"))
    path = Path(args.out) / "manifest.json"
    return CommandResult(EXIT_OK, [path],
                         f"wrote {len(manifest.entries)} scenes ({n_val} val) to {args.out}")


def cmd_train(args) -> CommandResult:
    from .plotting import plot_loss_curves
    from .training import load_config, train

    cfg = load_config(args.config)
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    result = train(cfg, resume_from=args.resume)
    artifacts = [result.last_checkpoint, result.best_checkpoint, result.log_path]
    if result.history:
        curve = Path(cfg.checkpoint_dir) / "loss_curve.png"
        plot_loss_curves(result.history, curve)
        artifacts.append(curve)
    final = result.history[-1]["total"] if result.history else float("nan")
    return CommandResult(EXIT_OK, artifacts,
                         f"trained {result.state.global_step} steps, final loss {final:.4f}, "
                         f"best val mIoU {result.state.best_val_miou:.4f}")


def _task_from_manifest(manifest: dict, mode: Optional[str], target: Optional[str]):
    from .data import MULTI_CLASS, SINGLE_CLASS

    train_cfg = manifest.get("extra", {}).get("train_config", {})
    if mode is None:
        mode = SINGLE_CLASS if len(manifest["class_set"]) == 2 else MULTI_CLASS
    if target is None:
        target = train_cfg.get("target_class", "vehicle")
    return mode, (target if mode == SINGLE_CLASS else None)


def _gt_samples(dataset):
    n = len(dataset.class_set)
    for s in dataset.samples:
        yield np.eye(n)[s.classes].transpose(2, 0, 1), s.classes


def cmd_eval(args) -> CommandResult:
    from .data import LayoutDataset
    from .metrics import evaluate, evaluate_arrays
    from .training import load_model

    if args.checkpoint is None and not (args.gt_as_prediction and args.mode):
        raise UsageError("--checkpoint is required unless --gt-as-prediction is given with --mode")
    model, manifest = (None, None)
    if args.checkpoint is not None:
        model, manifest = load_model(args.checkpoint)
        mode, target = _task_from_manifest(manifest, args.mode, args.target_class)
        hw = model.cfg.input_hw
    else:
        mode, target, hw = args.mode, args.target_class or "vehicle", None
        if mode == "multi_class":
            target = None
    dataset = LayoutDataset.load(args.data, args.split, mode, target, hw)
    if args.gt_as_prediction:
        report = evaluate_arrays(_gt_samples(dataset), dataset.class_set)
        report.notes.append("ground truth used as prediction")
    else:
        report = evaluate(model, dataset, tuple(manifest["class_set"]))
    out = Path(args.out) if args.out else output_root() / f"eval_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.table())
    return CommandResult(EXIT_OK, [out], f"mIoU {report.miou:.4f} mAP {report.map:.4f}; report at {out}")


def _probability_png(prob: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def cmd_predict(args) -> CommandResult:
    import torch

    from .data import load_image_png, save_class_png
    from .plotting import plot_prediction
    from .training import load_model

    src = Path(args.image)
    if src.is_dir():
        images = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
        if not images:
            raise FileNotFoundError(f"no PNG images in {src}")
    elif src.is_file():
        images = [src]
    else:
        raise FileNotFoundError(f"{src} does not exist")
    model, manifest = load_model(args.checkpoint)
    class_set = tuple(manifest["class_set"])
    hw = model.cfg.input_hw
    out_dir = Path(args.out) if args.out else output_root() / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for path in images:
        pixels = load_image_png(path).pixels
        if pixels.shape[:2] != (hw, hw):
            raise ValueError(f"{path} is {pixels.shape[0]}x{pixels.shape[1]}, model expects {hw}x{hw}")
        x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            probs = torch.softmax(model.forward_infer(x).main_logits, dim=1)[0].numpy()
        classes = probs.argmax(axis=0)
        stem = path.stem
        pred_path = out_dir / f"{stem}_pred.png"
        save_class_png(classes, pred_path)
        artifacts.append(pred_path)
        for i, name in enumerate(class_set):
            p = out_dir / f"{stem}_prob_{name}.png"
            _probability_png(probs[i], p)
            artifacts.append(p)
        comp = out_dir / f"{stem}_composite.png"
        plot_prediction(pixels, classes, class_set, comp)
        artifacts.append(comp)
    return CommandResult(EXIT_OK, artifacts, f"wrote predictions for {len(images)} image(s) to {out_dir}")


def cmd_gradcheck(args, focal_fn: Optional[Callable] = None) -> CommandResult:
    from .losses import focal_loss
    from .selfcheck import run_checks

    results = run_checks(focal_fn or focal_loss)
    print(f"{'check':<32}{'max error':>14}{'tolerance':>12}  status")
    for r in results:
        print(f"{r.name:<32}{r.max_error:>14.3e}{r.tolerance:>12.1e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        return CommandResult(EXIT_RUNTIME, [], f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return CommandResult(EXIT_OK, [], f"all {len(results)} checks passed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dctbev", description="Front-view to BEV layout toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--difficulty", choices=("easy", "standard"), default="standard")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON or TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="override max_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", help="train, val or all")
    p.add_argument("--mode", choices=("single_class", "multi_class"), default=None,
                   help="override the task stored in the checkpoint")
    p.add_argument("--target-class", choices=("vehicle", "road"), default=None)
    p.add_argument("--gt-as-prediction", action="store_true", help="debug: score ground truth against itself")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict BEV layouts for front-view images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run numerical self-checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> CommandResult:
    from .checkpoint import CheckpointError
    from .training import ConfigError, TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(int(exc.code or 0))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_USAGE, summary=str(exc))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_RUNTIME, summary=str(exc))
    except (CheckpointError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_RUNTIME, summary=str(exc))


def main(argv=None) -> int:
    result = run(argv)
    if result.summary and result.exit_code == EXIT_OK:
        print(result.summary)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
