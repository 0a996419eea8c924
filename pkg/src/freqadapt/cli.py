"""``freqadapt`` command line: synth, pretrain, adapt, eval, ablate-fixed.

Exit codes: 0 success, 1 usage error, 2 data or compatibility error.
Every command writes ``<output>.config.json`` with the resolved arguments and
configuration; passing that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IDENTITY_SHIFT, DomainShiftSpec, load_dataset, save_dataset, stack_images, stack_masks, \
    synth_generate
from .segnet import CheckpointMismatch
from .trainer import (AdaptConfig, CheckpointFormatError, TrainingDiverged, adapt, edge_gradient, evaluate,
                      filtered_images, load_checkpoint, pretrain_source, save_checkpoint, write_log_csv)

log = logging.getLogger("freqadapt")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
# fields that describe the network shape and must follow the checkpoint
ARCH_FIELDS = ("in_channels", "num_classes", "seg_width", "seg_levels", "seg_norm", "filter_width",
               "q_hidden")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; 2 is reserved for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument helpers


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` with an inclusive stop, e.g. ``0.01:0.1:0.01`` -> 10 values."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range must look like start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"range values must be numbers, got {text!r}") from None
    if step <= 0 or stop < start:
        raise UsageError(f"range needs step > 0 and stop >= start, got {text!r}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(n)]


def _read_json(path: str | Path, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{what} {path}: expected a JSON object")
    return raw


def _config_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides (win over --config)")
    for f in fields(AdaptConfig):
        kind = type(getattr(AdaptConfig(), f.name))
        if kind is bool:
            g.add_argument(_config_flag(f.name), dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            g.add_argument(_config_flag(f.name), dest=f"cfg_{f.name}", type=kind, default=None, metavar=kind.__name__.upper())


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> AdaptConfig:
    """defaults <- base (e.g. checkpoint) <- --config file <- explicit flags."""
    raw = dict(base or {})
    if args.config:
        loaded = _read_json(args.config, "config")
        raw.update(loaded.get("config", loaded) if "command" in loaded else loaded)
    for f in fields(AdaptConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            raw[f.name] = v
    try:
        return AdaptConfig.from_dict({**AdaptConfig().to_dict(), **raw})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def write_snapshot(path: Path, command: str, args: argparse.Namespace, cfg: AdaptConfig | None) -> Path:
    plain = {k: v for k, v in vars(args).items() if not k.startswith("cfg_") and k not in ("func", "config")}
    snap = {"command": command, "args": plain, "config": cfg.to_dict() if cfg else None}
    out = path.with_name(path.name + ".config.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _dataset(path: str, labelled: bool = False):
    root = Path(path)
    if not (root / "images").is_dir():
        raise DataError(f"{root} has no images/ folder")
    samples = load_dataset(root)
    if not samples:
        raise DataError(f"{root}/images contains no .png or .pgm files")
    if labelled and any(s.mask is None for s in samples):
        raise DataError(f"{root}: every image needs a mask in masks/")
    return samples


def _checkpoint(path: str):
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _arch_base(ckpt) -> dict:
    return {k: ckpt.config[k] for k in ARCH_FIELDS if k in ckpt.config}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    shift = IDENTITY_SHIFT
    if args.shift:
        raw = _read_json(args.shift, "shift spec")
        try:
            shift = DomainShiftSpec.from_json(json.dumps(raw))
        except (TypeError, ValueError) as exc:
            raise DataError(f"shift spec {args.shift}: {exc}") from exc
    try:
        samples = synth_generate(args.count, shift, seed=args.seed, size=args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n = save_dataset(samples, out)
    (out / "shift.json").write_text(shift.to_json() + "\n")
    write_snapshot(out / "synth", "synth", args, None)
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    data = _dataset(args.data, labelled=True)
    cfg = cfg.replace(image_size=data[0].image.shape[-1], in_channels=data[0].image.shape[0])
    out = Path(args.out)
    write_snapshot(out, "pretrain", args, cfg)
    ckpt = pretrain_source(data, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    if ckpt.history:
        write_log_csv(ckpt.history, out.with_name(out.name + ".log.csv"), list(ckpt.history[0]))
    res = evaluate(ckpt, data, use_filter=False)
    res.write_csv(out.with_name(out.name + ".metrics.csv"))
    print(f"pretrained {cfg.epochs} epochs; train DSC {res.mean_dsc:.4f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    src = _checkpoint(args.model)
    cfg = resolve_config(args, _arch_base(src))
    data = _dataset(args.data)
    out = Path(args.out)
    write_snapshot(out, "adapt", args, cfg)
    ckpt = adapt(data, src, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    write_log_csv(ckpt.history, out.with_name(out.name + ".log.csv"))
    if all(s.mask is not None for s in data):
        res = evaluate(ckpt, data, use_filter=not args.no_filter)
        res.write_csv(out.with_name(out.name + ".metrics.csv"))
        print(f"adapted {cfg.epochs} epochs; DSC {res.mean_dsc:.4f}")
    else:
        print(f"adapted {cfg.epochs} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args.model)
    if args.config or any(getattr(args, f"cfg_{f.name}") is not None for f in fields(AdaptConfig)):
        ckpt.config = resolve_config(args, ckpt.config).to_dict()
    data = _dataset(args.data, labelled=True)
    out = Path(args.out)
    write_snapshot(out, "eval", args, ckpt.adapt_config)
    res = evaluate(ckpt, data, use_filter=not args.no_filter)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.write_csv(out)
    print(f"DSC {res.mean_dsc:.4f}  IoU {res.mean_iou:.4f}  ({len(res.rows)} samples)")
    return EXIT_OK


def cmd_ablate_fixed(args) -> int:
    thresholds = parse_range(args.thresholds)
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise UsageError("thresholds must lie in [0, 1]")
    src = _checkpoint(args.source)
    adapted = _checkpoint(args.adapted)
    cfg = resolve_config(args, {**adapted.config, **_arch_base(src)})
    data = _dataset(args.data)
    test = _dataset(args.eval_data or args.data, labelled=True)
    images, masks = stack_images(test), stack_masks(test)
    out = Path(args.out)
    write_snapshot(out, "ablate-fixed", args, cfg)
    rows = []
    for t in thresholds:
        ck = adapt(data, src, cfg.replace(filter_mode="fixed", highpass_threshold=t))
        res = evaluate(ck, test, use_filter=True)
        rows.append(("fixed", t, res.mean_dsc, res.mean_iou, edge_gradient(filtered_images(ck, images), masks)))
        log.info("threshold %.4g: DSC %.4f", t, res.mean_dsc)
    res = evaluate(adapted, test, use_filter=True)
    rows.append(("adaptive", float("nan"), res.mean_dsc, res.mean_iou,
                 edge_gradient(filtered_images(adapted, images), masks)))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filter", "threshold", "dsc", "iou", "edge_gradient"])
        for kind, t, d, j, e in rows:
            w.writerow([kind, "" if kind == "adaptive" else f"{t:g}", f"{d:.6f}", f"{j:.6f}", f"{e:.6f}"])
    best = max(rows[:-1], key=lambda r: r[2])
    print(f"best fixed t={best[1]:g} DSC {best[2]:.4f}; adaptive DSC {rows[-1][2]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freqadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shift", help="JSON file with domain-shift fields")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="supervised training on labelled source data")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    add_config_flags(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="source-free adaptation on (unlabelled) target data")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="source checkpoint")
    s.add_argument("--out", required=True, help="adapted checkpoint path")
    s.add_argument("--config")
    s.add_argument("--no-filter", action="store_true", help="score the final metrics without the filter")
    add_config_flags(s)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="per-sample DSC / IoU of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="metrics CSV path")
    s.add_argument("--config")
    s.add_argument("--no-filter", action="store_true")
    add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-fixed", help="fixed high-pass thresholds vs the adaptive filter")
    s.add_argument("--data", required=True, help="target data used for adaptation")
    s.add_argument("--eval-data", help="labelled evaluation data (default: --data)")
    s.add_argument("--source", required=True, help="source checkpoint")
    s.add_argument("--adapted", required=True, help="checkpoint adapted with the learned filter")
    s.add_argument("--thresholds", default="0.01:0.1:0.01")
    s.add_argument("--out", required=True, help="comparison CSV path")
    s.add_argument("--config")
    add_config_flags(s)
    s.set_defaults(func=cmd_ablate_fixed)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"freqadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"freqadapt: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CheckpointFormatError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"freqadapt: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
