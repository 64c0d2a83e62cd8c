"""Command-line entry point: train, eval, infer, visualize, ablate,
synthesize.

Configuration is flat `section.key=value` text; CLI overrides win over file
values. Every command echoes its effective config and a run.json provenance
record into the output directory. Exit codes: 0 success, 1 config error,
2 data/checkpoint error, 3 numerical abort.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import data as data_mod
from . import evaluation, training
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .losses import LossConfig
from .render import RenderSpec, render_attention
from .training import TrainConfig
from .variants import normalize_preset, run_ablation

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


# -- config handling ----------------------------------------------------------

def default_config():
    cfg = {f"train.{f.name}": getattr(TrainConfig(), f.name)
           for f in fields(TrainConfig)}
    cfg.update({f"loss.{f.name}": getattr(LossConfig(), f.name)
                for f in fields(LossConfig)})
    cfg.update({
        "model.variant": "bag",
        "extractor.source": "auto",
        "data.root": "",
        "data.split": "train",
    })
    return cfg


def parse_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(key, value, template):
    target = template[key]
    if isinstance(value, type(target)) and not isinstance(value, str):
        return value
    text = str(value)
    if isinstance(target, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(target, int) and not isinstance(target, bool):
            return int(text)
        if isinstance(target, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return text


def merge_config(file_path=None, overrides=()):
    cfg = default_config()
    layers = []
    if file_path:
        layers.append(parse_config_file(file_path))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    layers.append(pairs)
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, cfg)
    return cfg


def split_config(cfg):
    train_cfg = TrainConfig(**{f.name: cfg[f"train.{f.name}"]
                               for f in fields(TrainConfig)})
    loss_cfg = LossConfig(**{f.name: cfg[f"loss.{f.name}"]
                             for f in fields(LossConfig)})
    return train_cfg, loss_cfg


def echo_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "effective.cfg").write_text("\n".join(lines) + "\n")


def write_run_record(out_dir, command, cfg, extra=None):
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": {k: cfg[k] for k in sorted(cfg)} if cfg else None,
    }
    if extra:
        record.update(extra)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def _apply_flag_overrides(cfg, args):
    direct = {
        "epochs": "train.epochs",
        "max_steps": "train.max_steps",
        "seed": "train.seed",
        "variant": "model.variant",
        "extractor": "extractor.source",
        "data": "data.root",
        "split": "data.split",
    }
    for attr, key in direct.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = _coerce(key, value, cfg)
    if getattr(args, "deterministic", False):
        cfg["train.deterministic"] = True
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_train(args):
    cfg = merge_config(args.config, args.set)
    _apply_flag_overrides(cfg, args)
    if not cfg["data.root"]:
        raise ConfigError("no dataset root given (use --data or data.root)")
    root = Path(cfg["data.root"])
    if not root.exists():
        raise DataError(f"dataset root does not exist: {root}")
    train_cfg, loss_cfg = split_config(cfg)
    variant = normalize_preset(cfg["model.variant"])
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    write_run_record(out_dir, "train", cfg)

    index = data_mod.load_index(root, cfg["data.split"])
    if len(index) == 0:
        raise DataError(f"no training pairs found under {root}/{cfg['data.split']}")
    print(f"{len(index)} training pairs under {root}/{cfg['data.split']}")
    state = training.make_state(train_cfg, loss_cfg, variant=variant,
                                extractor_source=cfg["extractor.source"])
    probe = _probe_image(index, train_cfg)
    records = training.train(state, index, out_dir=out_dir, probe_image=probe)
    training.save_checkpoint(state, out_dir / "checkpoint.pt")
    print(f"trained {len(records)} steps; checkpoint at {out_dir / 'checkpoint.pt'}")
    return 0


def _probe_image(index, train_cfg):
    sample = index.load_pair(0)
    size = min(train_cfg.crop, sample.blurred.shape[1], sample.blurred.shape[2])
    size -= size % 4
    crop = data_mod.random_crop_pair(sample, size, seed=train_cfg.seed)
    return torch.from_numpy(crop.blurred).unsqueeze(0)


def cmd_eval(args):
    cfg = merge_config(args.config, args.set)
    _apply_flag_overrides(cfg, args)
    if not cfg["data.root"]:
        raise ConfigError("no dataset root given (use --data or data.root)")
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    index = data_mod.load_index(cfg["data.root"], cfg["data.split"])
    report = evaluation.evaluate_checkpoint(args.checkpoint, index,
                                            limit=args.limit)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_text())
    write_run_record(out_dir, "eval", cfg,
                     {"checkpoint": str(args.checkpoint)})
    print(report.to_text(), end="")
    return 0


def _iter_input_images(path):
    path = Path(path)
    if path.is_file():
        return [path]
    if path.is_dir():
        exts = (".png", ".jpg", ".jpeg")
        return sorted(p for p in path.iterdir() if p.suffix.lower() in exts)
    raise DataError(f"input not found: {path}")


def cmd_infer(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = training.load_generator(args.checkpoint)
    spec = RenderSpec(scale=args.scale)
    paths = _iter_input_images(args.input)
    if not paths:
        raise DataError(f"no images under {args.input}")
    done = 0
    for path in paths:
        img = data_mod.normalize(data_mod.load_image_u8(path))
        h, w = img.shape[1:]
        if h % 4 or w % 4:
            print(f"skipping {path.name}: {h}x{w} not divisible by 4",
                  file=sys.stderr)
            continue
        with torch.no_grad():
            restored, maps = generator(torch.from_numpy(img).unsqueeze(0))
        data_mod.save_image_u8(out_dir / path.name,
                               data_mod.denormalize(restored.squeeze(0).numpy()))
        if args.dump_attention:
            for k, attention in enumerate(maps, start=1):
                data_mod.save_image_u8(out_dir / f"{path.stem}_attn_m{k}.png",
                                       render_attention(attention, spec))
        done += 1
    write_run_record(out_dir, "infer", None,
                     {"checkpoint": str(args.checkpoint),
                      "inputs": len(paths), "restored": done})
    if done == 0:
        raise DataError("all inputs were skipped (dimensions not divisible by 4)")
    print(f"restored {done}/{len(paths)} image(s) into {out_dir}")
    return 0


def cmd_visualize(args):
    args.dump_attention = True
    return cmd_infer(args)


def cmd_ablate(args):
    cfg = merge_config(args.config, args.set)
    _apply_flag_overrides(cfg, args)
    if not cfg["data.root"]:
        raise ConfigError("no dataset root given (use --data or data.root)")
    train_cfg, loss_cfg = split_config(cfg)
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    index = data_mod.load_index(cfg["data.root"], cfg["data.split"])
    table = run_ablation(args.presets, train_cfg, loss_cfg, index, index,
                         extractor_source=cfg["extractor.source"],
                         out_dir=out_dir)
    write_run_record(out_dir, "ablate", cfg, {"presets": table["columns"]})
    from .variants import format_ablation_table
    print(format_ablation_table(table), end="")
    return 0


def cmd_synthesize(args):
    sharp_dir = Path(args.sharp_dir)
    if not sharp_dir.is_dir():
        raise DataError(f"sharp image directory not found: {sharp_dir}")
    kernel = data_mod.KernelSpec(args.kernel, args.length, args.angle)
    noise = data_mod.NoiseSpec(args.sigma)
    images = {}
    for path in sorted(sharp_dir.rglob("*")):
        if path.suffix.lower() in (".png", ".jpg", ".jpeg"):
            rel = path.relative_to(sharp_dir)
            seq = rel.parts[0] if len(rel.parts) > 1 else "seq0"
            images[f"{seq}/{path.name}"] = data_mod.load_image_u8(path)
    if not images:
        raise DataError(f"no images under {sharp_dir}")
    records = data_mod.synthesize_dataset(images, args.out, args.split,
                                          kernel, noise, args.seed)
    write_run_record(args.out, "synthesize", None,
                     {"pairs": len(records), "kernel": kernel.to_dict(),
                      "sigma": args.sigma, "seed": args.seed})
    print(f"wrote {len(records)} synthetic pair(s) under {args.out}/{args.split}")
    return 0


# -- argument parsing -----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bagdeblur",
        description="Blind non-uniform motion deblurring with a "
                    "blur-attention generator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("train", help="train a generator/critic pair")
    common(p)
    p.add_argument("--data", help="dataset root (GoPro layout)")
    p.add_argument("--split", help="dataset split (default train)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--variant", help="generator preset (default bag)")
    p.add_argument("--extractor", help="VGG19 weights source "
                                       "(auto|random[:seed]|path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, help="evaluate only the first N pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore images with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--dump-attention", action="store_true",
                   help="also write the rendered attention maps")
    p.add_argument("--scale", type=int, default=1,
                   help="nearest-neighbor upscale for attention renders")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize",
                       help="restore one image and render its attention maps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="train and score structural presets")
    common(p)
    p.add_argument("--presets", nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--split", help="dataset split (default train)")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--extractor")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synthesize", help="build a synthetic blurred dataset")
    common(p)
    p.add_argument("--sharp-dir", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--kernel", default="linear_motion",
                   choices=("delta", "box", "linear_motion"))
    p.add_argument("--length", type=int, default=5)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.set_defaults(func=cmd_synthesize)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None:
        args.set = list(args.set) + [f"train.seed={args.seed}"]
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
