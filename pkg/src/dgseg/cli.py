"""Command-line entry point: ``dgseg {train,eval,stylize-preview,synth-data}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .errors import ConfigError
from .config import RunConfig

OUT_ENV = "DGSEG_OUT"
PALETTE = np.array(
    [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
     [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195], [128, 128, 0],
     [255, 215, 180]],
    dtype=np.uint8,
)

log = logging.getLogger("dgseg")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="sectioned key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. trainer.total_iters=10 (repeatable)")
    common.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--seed", type=int, help="shorthand for trainer.seed (toy.seed for synth-data)")
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="dgseg", description="Domain-generalized segmentation with wild-style training.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train and evaluate")
    t.add_argument("--resume", type=Path, help="training checkpoint to resume from")
    t.add_argument("--no-eval", action="store_true", help="skip the final evaluation")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the configured domains")
    e.add_argument("--checkpoint", type=Path, required=True)
    s = sub.add_parser("stylize-preview", parents=[common],
                       help="side-by-side predictions of the plain and stylized branches")
    s.add_argument("--checkpoint", type=Path, help="training or inference checkpoint (default: freshly initialized)")
    s.add_argument("--source", type=Path, required=True, help="content image")
    s.add_argument("--wild", type=Path, required=True, help="style image")
    sub.add_parser("synth-data", parents=[common], help="write the synthetic toy datasets to disk")
    return p


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    if args.config is not None:
        cfg = config_mod.load(args.config)
    else:
        cfg = base if base is not None else RunConfig()
    config_mod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        if args.command == "synth-data":
            cfg.toy.seed = args.seed
        else:
            cfg.trainer.seed = args.seed
    return cfg.validate()


def _checkpoint_config(args) -> RunConfig | None:
    """A checkpoint's recorded config, used as the base when no --config is given."""
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is None or args.config is not None:
        return None
    from .netgraph import load_checkpoint

    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint {ckpt} not found")
    return config_mod.from_dict(load_checkpoint(ckpt)[1]["config"])


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _colorize(classes: np.ndarray) -> np.ndarray:
    return PALETTE[classes % len(PALETTE)]


def _load_rgb(path: Path, size=None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != size:
            im = im.resize(size, Image.BILINEAR)
        return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> int:
    from .trainer import run_training

    res = run_training(cfg, _out_dir(args), resume_from=args.resume, evaluate=not args.no_eval)
    print(f"final checkpoint: {res.final_checkpoint}")
    if res.report is not None:
        for name, d in res.report.domains.items():
            print(f"{name:>12s}  mIoU {100 * d.miou:6.2f}")
        print(f"{'avg':>12s}  mIoU {100 * res.report.avg:6.2f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evalreport import evaluate_domains
    from .trainer import eval_datasets, load_inference_model

    model, _, meta = load_inference_model(args.checkpoint)
    report = evaluate_domains(model, eval_datasets(cfg), cfg.data.num_classes, cfg.data.ignore_id)
    out = _out_dir(args)
    _, summary = report.write(out)
    for name, d in report.domains.items():
        print(f"{name:>12s}  mIoU {100 * d.miou:6.2f}")
    print(f"{'avg':>12s}  mIoU {100 * report.avg:6.2f}")
    print(f"summary: {summary}")
    return 0


def cmd_stylize_preview(args, cfg: RunConfig) -> int:
    from .trainer import build_assembly, load_assembly

    if args.checkpoint is not None:
        assembly, _, _ = load_assembly(args.checkpoint)
    else:
        torch.manual_seed(cfg.trainer.seed)
        assembly = build_assembly(cfg)
    src = _load_rgb(args.source)
    wild = _load_rgb(args.wild, size=(src.shape[2], src.shape[1]))
    assembly.train()  # stylization is only active in training mode
    with torch.no_grad():
        out = assembly.forward_training(torch.from_numpy(src)[None], torch.from_numpy(wild)[None],
                                        generator=torch.Generator().manual_seed(cfg.trainer.seed))
    plain = _colorize(out.logits_src.argmax(1)[0].numpy())
    styl = _colorize(out.logits_stylized.argmax(1)[0].numpy())
    to_u8 = lambda a: (np.clip(a.transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)  # noqa: E731
    gap = np.full((src.shape[1], 4, 3), 255, np.uint8)
    panel = np.concatenate([to_u8(src), gap, to_u8(wild), gap, plain, gap, styl], axis=1)
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "stylize_preview.png"
    Image.fromarray(panel).save(path)
    changed = float((out.logits_src.argmax(1) != out.logits_stylized.argmax(1)).float().mean())
    print(f"preview: {path} (panels: source, wild, plain prediction, stylized prediction)")
    print(f"pixels whose prediction changes under stylization: {100 * changed:.2f}%")
    return 0


def cmd_synth_data(args, cfg: RunConfig) -> int:
    from .datapipe import synth_toy, write_dataset

    data = synth_toy(cfg.toy.seed, cfg.toy.toy_config())
    out = _out_dir(args)
    write_dataset(data.source, out / "source")
    write_dataset(data.wild, out / "wild")
    for name, ds in data.eval_domains().items():
        write_dataset(ds, out / "eval" / ("seen" if name == "source" else name))
    mapping = out / "mapping.csv"
    mapping.write_text("raw_id,train_id\n" + "".join(f"{i},{i}\n" for i in range(cfg.toy.num_classes)))
    print(f"wrote toy datasets under {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "stylize-preview": cmd_stylize_preview,
    "synth-data": cmd_synth_data,
}


def _failing_module(exc: BaseException) -> str:
    """Innermost package module on the traceback, else the exception's own module."""
    name = None
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("dgseg."):
            name = mod.split(".", 1)[1]
    return name or type(exc).__module__.split(".")[-1]


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args, _checkpoint_config(args))
    except ConfigError as exc:
        print(f"dgseg: error [config]: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    text = config_mod.dumps(cfg)
    print(text, end="")
    if args.dump_config:
        return 0
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"dgseg: error [{_failing_module(exc)}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, mapped to exit 1
        print(f"dgseg: error [{_failing_module(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
