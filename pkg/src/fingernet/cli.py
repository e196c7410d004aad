"""Command-line entry point: synth, split, train, eval, saliency.

Exit codes: 0 success, 1 usage/configuration error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULTS, RunConfig, decode_names, encode_names, load_config_file
from .data.dataset import Sample, SplitPlan, ingest_dataset, split
from .data.netpbm import read_image
from .data.synth import SynthParams, synth_generate
from .errors import ConfigError, DataError, FingerNetError
from .model import Model, build_resnet, replace_head
from .saliency import SaliencyConfig, occlusion_sweep, render_map
from .trainer import evaluate, train

log = logging.getLogger("fingernet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fingernet", description="Fingerprint recognition with a residual network.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic fingerprint dataset")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--per-subject", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="write a per-subject train/val/test plan")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-per-subject", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train or fine-tune and keep the best validation epoch")
    p.add_argument("--config", help="key=value file; flags below override it")
    for key, (default, help_text) in DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="VALUE", help=f"{help_text} [{default or 'empty'}]")

    p = sub.add_parser("eval", help="test accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", default="report", help="report directory")

    p = sub.add_parser("saliency", help="occlusion saliency map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--label", required=True, help="class index or subject name")
    p.add_argument("--window", type=int, help="square side N (default image side / 8)")
    p.add_argument("--stride", type=int, help="stride S (default N / 2)")
    p.add_argument("--out", required=True, help="output prefix")
    return parser


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    params = SynthParams(
        num_subjects=args.subjects, images_per_subject=args.per_subject, image_size=args.size, seed=args.seed
    )
    ds = synth_generate(params, args.out)
    print(f"wrote {len(ds)} images of {ds.num_classes} subjects to {args.out}")
    return 0


def cmd_split(args) -> int:
    plan = split(ingest_dataset(args.data), args.seed, args.val_per_subject)
    plan.save(args.out)
    counts = plan.counts()
    print(f"train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def _class_names(model: Model) -> list[str] | None:
    text = model.metadata.get("class_names")
    return decode_names(text) if text else None


def cmd_train(args) -> int:
    values = load_config_file(args.config) if args.config else {}
    for key in DEFAULTS:
        flag = getattr(args, f"opt_{key}")
        if flag is not None:
            values[key] = flag
    cfg = RunConfig(values)
    if not cfg["data_root"]:
        raise ConfigError("data_root is not set")
    report_dir = Path(cfg["report_dir"])
    report_dir.mkdir(parents=True, exist_ok=True)

    ds = ingest_dataset(cfg["data_root"])
    if cfg["split_file"]:
        plan = SplitPlan.load(cfg["split_file"])
    else:
        plan = split(ds, cfg.int("split_seed"), cfg.int("val_per_subject"))
        cfg["split_file"] = str(report_dir / "split.tsv")
        plan.save(cfg["split_file"])
    if cfg["num_classes"] == "auto":
        cfg["num_classes"] = ds.num_classes
    num_classes = cfg.int("num_classes")

    if cfg["checkpoint_in"]:
        model = load_checkpoint(cfg["checkpoint_in"])
        if model.config.num_classes != num_classes:
            log.info("replacing %d-way head with a %d-way head", model.config.num_classes, num_classes)
            replace_head(model, num_classes, cfg.int("init_seed"))
        model.metadata = {}
        cfg["variant"] = model.config.variant
        cfg["input_channels"] = model.config.input_channels
        cfg["input_size"] = model.config.input_size
        cfg["stage_widths"] = ",".join(map(str, model.config.stage_widths))
        cfg["blocks_per_stage"] = ",".join(map(str, model.config.blocks_per_stage))
    else:
        model = build_resnet(cfg.model_config(num_classes), cfg.int("init_seed"))
    if not cfg["checkpoint_out"]:
        cfg["checkpoint_out"] = str(report_dir / "best.fpnt")
    tc = cfg.train_config()
    cfg.write(report_dir / "resolved_config.txt")

    report = train(model, plan.select(ds, "train"), plan.select(ds, "val"), tc)
    model.metadata.update(
        epoch=str(report.best_epoch),
        val_accuracy=repr(report.best_val_acc),
        class_names=encode_names(ds.class_names),
    )
    save_checkpoint(model, cfg["checkpoint_out"])
    report.write_csv(report_dir / "train_report.csv", header=cfg.values)
    print(f"best_epoch={report.best_epoch} val_accuracy={report.best_val_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = ingest_dataset(args.data)
    names = _class_names(model)
    if names is not None and names != ds.class_names:
        raise DataError("dataset subjects do not match the checkpoint's class names")
    test = SplitPlan.load(args.split).select(ds, "test")
    report = evaluate(model, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval_", ds.class_names)
    print(f"accuracy={report.accuracy:.4f} ({int(report.confusion.trace())}/{len(test)})")
    return 0


def cmd_saliency(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = read_image(args.image)
    names = _class_names(model)
    if names is not None and args.label in names:
        label = names.index(args.label)
    else:
        try:
            label = int(args.label)
        except ValueError:
            raise ConfigError(f"unknown label {args.label!r}") from None
    cfg = RunConfig()
    if args.window is not None:
        cfg["saliency_window"] = args.window
    if args.stride is not None:
        cfg["saliency_stride"] = args.stride
    sal_cfg: SaliencyConfig = cfg.saliency_config(min(image.shape))
    smap = occlusion_sweep(model, Sample(subject_id=label, image=image, source_path=args.image), sal_cfg)
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    paths = render_map(smap, args.out)
    flipped = sum(w.flipped for w in smap.windows)
    print(
        f"baseline_class={smap.baseline_class} p_true={smap.baseline_prob:.4f} "
        f"windows={len(smap.windows)} flipped={flipped} -> {', '.join(map(str, paths))}"
    )
    return 0


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "saliency": cmd_saliency}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FingerNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
