"""Command-line interface: dataset synthesis, training, evaluation,
prediction, ablation sweeps, and self-verification.

Exit codes: 0 success, 2 usage/config/data problems, 3 runtime or
numerical failures.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .data import (Sample, load_dataset, load_image, resize, save_mask_png,
                   save_sample, split, synth_dataset)
from .errors import (CascnError, ConfigError, ContractError, DataError)
from .metrics import METRIC_NAMES
from .model import VARIANT_LABELS, build, load_model, variant
from .train import evaluate, train
from .verify import run_checks


def _limit_threads(count: int) -> None:
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=count)
    except ImportError:
        pass  # honored only when a BLAS thread controller is available


def _load_run_config(args) -> RunConfig:
    base = RunConfig.paper() if args.scale == "paper" else RunConfig.desk()
    cfg = base
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file '{path}' not found")
        cfg = RunConfig.parse(path.read_text(), base=base)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _prepared_splits(cfg: RunConfig, data_root):
    samples = load_dataset(data_root)
    resized = [resize(s, cfg.model.input_size) for s in samples]
    train_s, val_s, test_s = split(resized, cfg.split_spec())
    # tiny datasets may leave empty splits; fall back to the training set
    return train_s, val_s or train_s, test_s or train_s


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"size must look like 48x64, got '{text}'")


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, _parse_size(args.size), args.seed or 0)
    for sample in samples:
        save_sample(sample, args.out)
    print(f"wrote {len(samples)} samples under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    train_s, val_s, test_s = _prepared_splits(cfg, args.data)
    model = build(cfg.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    state, _ = train(
        model, train_s, cfg.epochs, cfg.opt_config(), val_samples=val_s,
        batch_size=cfg.batch_size, policy=cfg.policy(), seed=cfg.model.seed,
        out_dir=out_dir, max_steps=cfg.max_steps or None)
    report = evaluate(model, test_s)
    (out_dir / "metrics.csv").write_text(report.to_csv())
    mean = report.mean()
    print(f"trained {state.step} steps; test "
          + " ".join(f"{m}={mean[m]:.4f}" for m in METRIC_NAMES))
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    samples = load_dataset(args.data)
    resized = [resize(s, model.config.input_size) for s in samples]
    report = evaluate(model, resized)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_predict(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    image = load_image(args.image)
    original = image.shape[:2]
    h, w = model.config.input_size
    resized = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
    batch = resized.astype(model.config.dtype).transpose(2, 0, 1)[None] / 255.0
    probs = model.infer(batch)
    mask = (probs[0, 0] >= 0.5).astype(np.uint8)
    if original != (h, w):
        mask = np.asarray(Image.fromarray(mask).resize(
            (original[1], original[0]), Image.NEAREST))
    save_mask_png(args.out, mask)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    train_s, val_s, test_s = _prepared_splits(cfg, args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["model," + ",".join(METRIC_NAMES)]
    for name in ("stConv", "seConv", "seConv+ASPP", "seConv+MECA", "full"):
        model = build(variant(cfg.model, name))
        train(model, train_s, cfg.epochs, cfg.opt_config(), val_samples=val_s,
              batch_size=cfg.batch_size, policy=cfg.policy(),
              seed=cfg.model.seed, max_steps=cfg.max_steps or None)
        mean = evaluate(model, test_s).mean()
        lines.append(VARIANT_LABELS[name] + ","
                     + ",".join(f"{mean[m]:.4f}" for m in METRIC_NAMES))
    table = "\n".join(lines) + "\n"
    (out_dir / "ablation.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_verify(args) -> int:
    return 0 if run_checks(print) else 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascn",
        description="Skin-lesion segmentation network: train, evaluate, "
                    "predict, ablate, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=False, config=False):
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the run")
        p.add_argument("--deterministic", action="store_true",
                       help="pin BLAS to one thread for stable reductions")
        p.add_argument("--scale", choices=("paper", "desk"), default="desk",
                       help="preset defaults before applying --config")
        if config:
            p.add_argument("--config", help="key=value config file")
        if data:
            p.add_argument("--data", required=True, help="dataset root")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, out=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", default="48x64")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and report test metrics")
    common(p, data=True, out=True, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, CSV to stdout")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a 0/255 PNG mask for one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and score every ablation variant")
    common(p, data=True, out=True, config=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the numerical self-check suite")
    common(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = os.environ.get("CASCN_THREADS")
    if getattr(args, "deterministic", False):
        _limit_threads(1)
    elif threads:
        try:
            _limit_threads(max(int(threads), 1))
        except ValueError:
            print(f"error: CASCN_THREADS must be an integer, got '{threads}'",
                  file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (ConfigError, DataError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CascnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
