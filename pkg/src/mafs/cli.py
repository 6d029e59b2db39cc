"""Command-line entry point.

Every subcommand accepts ``--config FILE``, ``--preset desk|full`` and any
number of ``--section.key=value`` overrides, and writes the resolved config
to ``config.ini`` next to its outputs. Exit codes: 0 success, 1 config error,
2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from mafs.checkpoint import Checkpoint
from mafs.config import Config, dump_config, load_config
from mafs.errors import ConfigError
from mafs.imaging import (
    ImagePair,
    read_image,
    read_label,
    read_manifest,
    rgb_to_ycbcr,
    synth_dataset,
    write_image,
    write_label,
    write_manifest,
)
from mafs.metrics import ConfusionMatrix, FusionScores, fusion_scores, miou, pixel_accuracy

log = logging.getLogger("mafs")

SNAPSHOT = "config.ini"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _split_overrides(extra: list[str]) -> list[str]:
    """``--train.lr=0.1`` / ``--train.lr 0.1`` -> ``train.lr=0.1``."""
    out, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {arg!r}")
        body = arg[2:]
        if "=" not in body:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {arg} needs a value")
            body = f"{body}={extra[i + 1]}"
            i += 1
        out.append(body)
        i += 1
    return out


def _samples(manifest, cfg: Config, need_labels=False):
    rows = read_manifest(manifest)
    if not rows:
        raise ConfigError(f"manifest {manifest} is empty")
    out = []
    for vis, ir, lab in rows:
        pair = ImagePair(read_image(vis, 3), read_image(ir, 1))
        label = read_label(lab, cfg.data.num_classes, cfg.data.ignore_index) if lab is not None else None
        if need_labels and label is None:
            raise ConfigError(f"{manifest}: {vis.name} has no label column")
        out.append((vis.stem, pair, label))
    return out


def _prepare(args, extra) -> tuple[Config, Path]:
    cfg = load_config(args.config, _split_overrides(extra), base=args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / SNAPSHOT)
    if args.threads:
        torch.set_num_threads(args.threads)
    return cfg, out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args, extra):
    cfg, out = _prepare(args, extra)
    size, k = cfg.data.size, cfg.data.num_classes
    data = synth_dataset(args.pairs + args.test_pairs, size, size, k, args.seed)
    rows = []
    for i, (pair, label) in enumerate(data):
        name = f"{i:04d}.png"
        paths = (out / "vi" / name, out / "ir" / name, out / "label" / name)
        write_image(paths[0], pair.visible)
        write_image(paths[1], pair.infrared)
        write_label(paths[2], label)
        rows.append(paths)
    write_manifest(out / "train.txt", rows[: args.pairs])
    write_manifest(out / "test.txt", rows[args.pairs :])
    log.info("wrote %d training and %d test pairs to %s", args.pairs, args.test_pairs, out)


def cmd_pretrain(args, extra):
    from mafs.training import pretrain_stage1

    cfg, out = _prepare(args, extra)
    data = [(p, lab) for _, p, lab in _samples(args.manifest, cfg)]
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_path = out / "stage1.jsonl"
    if resume is None:
        log_path.unlink(missing_ok=True)
    ckpt = pretrain_stage1(cfg, data, resume=resume, log_path=log_path)
    ckpt.save(out / "stage1.ckpt")
    log.info("stage-I checkpoint: %s", out / "stage1.ckpt")


def cmd_train_teacher(args, extra):
    from mafs.training import teacher_checkpoint, train_teacher

    cfg, out = _prepare(args, extra)
    data = [(p, lab) for _, p, lab in _samples(args.manifest, cfg, need_labels=True)]
    log_path = out / "teacher.jsonl"
    log_path.unlink(missing_ok=True)
    teacher = train_teacher(cfg, data, log_path=log_path)
    teacher_checkpoint(teacher).save(out / "teacher.ckpt")
    log.info("teacher pixel accuracy %.4f; checkpoint: %s", teacher.train_accuracy, out / "teacher.ckpt")


def cmd_train(args, extra):
    from mafs.training import load_teacher, teacher_checkpoint, train_stage2, train_teacher

    cfg, out = _prepare(args, extra)
    data = [(p, lab) for _, p, lab in _samples(args.manifest, cfg, need_labels=True)]
    stage1 = Checkpoint.load(args.stage1 or out / "stage1.ckpt")
    teacher_path = Path(args.teacher) if args.teacher else out / "teacher.ckpt"
    if teacher_path.exists():
        teacher = load_teacher(teacher_path)
    elif args.teacher:
        raise ConfigError(f"teacher checkpoint {teacher_path} not found")
    else:
        log.info("no teacher checkpoint; training the built-in teacher")
        teacher = train_teacher(cfg, data)
        teacher_checkpoint(teacher).save(teacher_path)
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_path = out / "stage2.jsonl"
    if resume is None:
        log_path.unlink(missing_ok=True)
    ckpt = train_stage2(cfg, data, stage1, teacher, resume=resume, log_path=log_path)
    ckpt.meta["teacher_digest"] = teacher.digest()
    ckpt.save(out / "stage2.ckpt")
    log.info("stage-II checkpoint: %s", out / "stage2.ckpt")


def cmd_fuse(args, extra):
    from mafs.training import infer_fuse, load_joint

    cfg, out = _prepare(args, extra)
    model = load_joint(args.ckpt)
    for stem, pair, _ in _samples(args.manifest, cfg):
        write_image(out / f"{stem}.png", infer_fuse(None, pair, model))


def cmd_segment(args, extra):
    from mafs.training import infer_segment, load_joint

    cfg, out = _prepare(args, extra)
    model = load_joint(args.ckpt)
    cm = ConfusionMatrix(model.cfg.num_classes, cfg.data.ignore_index)
    per_image = {}
    for stem, pair, label in _samples(args.manifest, cfg):
        pred = infer_segment(None, pair, model)
        write_label(out / f"{stem}.png", pred)
        if label is not None:
            one = ConfusionMatrix(model.cfg.num_classes, cfg.data.ignore_index).update(pred, label)
            cm = cm + one
            per_image[stem] = miou(one)[1]
    if cm.total:
        per_class, m = miou(cm)
        summary = {"per_class_iou": per_class, "miou": m, "per_image_miou": per_image}
        (out / "iou.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        log.info("mIoU %.4f", m)


def cmd_eval(args, extra):
    cfg, out = _prepare(args, extra)
    fused_dir = Path(args.fused)
    pred_dir = Path(args.pred) if args.pred else None
    rows, scores = [], []
    cm = ConfusionMatrix(cfg.data.num_classes, cfg.data.ignore_index)
    preds, truths = [], []
    for stem, pair, label in _samples(args.manifest, cfg):
        fpath = fused_dir / f"{stem}.png"
        if not fpath.exists():
            raise ConfigError(f"missing fused image {fpath}")
        fused = read_image(fpath)
        fused_y = rgb_to_ycbcr(fused)[0][..., 0] if fused.shape[2] == 3 else fused[..., 0]
        vi_y = rgb_to_ycbcr(pair.visible)[0][..., 0]
        s = fusion_scores(fused_y, pair.infrared[..., 0], vi_y)
        scores.append(s)
        row = {"image": stem, **{k.upper(): v for k, v in s.as_dict().items()}}
        if pred_dir is not None and label is not None:
            ppath = pred_dir / f"{stem}.png"
            if ppath.exists():
                pred = read_label(ppath, cfg.data.num_classes, cfg.data.ignore_index)
                cm.update(pred, label)
                preds.append(pred.data.ravel())
                truths.append(label.data.ravel())
                row["mIoU"] = miou(ConfusionMatrix(cfg.data.num_classes, cfg.data.ignore_index).update(pred, label))[1]
        rows.append(row)
    mean = {k.upper(): float(np.mean([getattr(s, k) for s in scores])) for k in FusionScores.__dataclass_fields__}
    agg = {"image": "mean", **mean}
    summary = {"fusion": mean, "num_images": len(rows)}
    if cm.total:
        per_class, m = miou(cm)
        agg["mIoU"] = m
        summary["segmentation"] = {
            "mIoU": m,
            "per_class_iou": per_class,
            "pixel_accuracy": pixel_accuracy(np.concatenate(preds), np.concatenate(truths), cfg.data.ignore_index),
        }
    cols = ["image", "EN", "SD", "SF", "VIF", "QABF", "AG"] + (["mIoU"] if cm.total else [])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows + [agg]:
            w.writerow(r)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--preset", default="desk", choices=("desk", "full"))
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 = library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mafs", description="Infrared-visible fusion and segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="generate a synthetic paired dataset")
    s.add_argument("--pairs", type=int, default=20)
    s.add_argument("--test-pairs", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", parents=[common], help="stage I: masked reconstruction")
    s.add_argument("--manifest", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-teacher", parents=[common], help="fit the built-in teacher")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train", parents=[common], help="stage II: joint fusion and segmentation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--stage1", help="stage-I checkpoint (default OUT/stage1.ckpt)")
    s.add_argument("--teacher", help="teacher checkpoint (default OUT/teacher.ckpt, trained if absent)")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("fuse", cmd_fuse, "write fused colour images"),
        ("segment", cmd_segment, "write label maps (and IoU when labels exist)"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ckpt", required=True, help="stage-II checkpoint")
        s.add_argument("--manifest", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="fusion metrics and mIoU")
    s.add_argument("--fused", required=True, help="directory of fused images named like the visible inputs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pred", help="directory of predicted label maps")
    s.set_defaults(func=cmd_eval)
    return p


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.func(args, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
