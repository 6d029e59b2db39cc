"""Two-stage training, teacher fitting, checkpoint plumbing and inference."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from mafs.checkpoint import ENCODER_GROUPS, Checkpoint
from mafs.config import Config, NetConfig, net_config_from_dict
from mafs.errors import ConfigError, InvalidInputError, NumericError
from mafs.imaging import (
    ImagePair,
    LabelMap,
    apply_aug,
    draw_aug_params,
    make_patch_mask,
    rgb_to_ycbcr_t,
    ycbcr_to_rgb_t,
)
from mafs.losses import TaskWeights, aux_loss, dwa_update, fusion_loss, kd_loss, ohem_ce, stage1_loss, total_stage2
from mafs.metrics import ConfusionMatrix, miou, pixel_accuracy
from mafs.models import JointNet, Stage1Net, Teacher, TeacherConfig, TeacherNet

log = logging.getLogger(__name__)

_STAGE_TAGS = {"stage1": 1, "stage2": 2, "teacher": 3}


class TrainingAborted(NumericError):
    """Non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint: Checkpoint | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# data


def _center_params(h, w, crop):
    from mafs.imaging import AugParams

    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} smaller than crop {crop}")
    return AugParams((h - crop) // 2, (w - crop) // 2, False, 0)


def make_batch(samples, crop: int, rng: np.random.Generator | None, augment: bool = True):
    """Stack samples into ``(vi B3HW, ir B1HW, labels BHW or None)`` tensors."""
    vis, irs, labs = [], [], []
    for pair, label in samples:
        h, w = pair.shape
        params = draw_aug_params(rng, h, w, crop) if augment else _center_params(h, w, crop)
        p, lab = apply_aug(pair, label, params, crop)
        vis.append(torch.from_numpy(p.visible).permute(2, 0, 1))
        irs.append(torch.from_numpy(p.infrared).permute(2, 0, 1))
        labs.append(None if lab is None else torch.from_numpy(lab.data))
    labels = None if any(lab is None for lab in labs) else torch.stack(labs)
    return torch.stack(vis).float(), torch.stack(irs).float(), labels


def _schedule(n, batch_size, epochs, max_steps):
    spe = math.ceil(n / batch_size)
    total = epochs * spe
    if max_steps:
        total = min(total, max_steps)
    return spe, total


def _batch_indices(seed, tag, epoch, within, n, batch_size):
    order = np.random.default_rng([seed, tag, epoch, 0]).permutation(n)
    return order[within * batch_size : (within + 1) * batch_size]


def _step_rng(seed, tag, step):
    return np.random.default_rng([seed, tag, step, 1])


# ---------------------------------------------------------------------------
# checkpoint helpers


def _optimizer(params_named, cfg: Config):
    named = [(n, p) for n, p in params_named if p.requires_grad]
    opt = torch.optim.SGD(
        [p for _, p in named], lr=cfg.train.lr, momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay
    )
    return opt, named


def _optim_state(opt, named) -> dict:
    out = {}
    for name, p in named:
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().clone()
    return out


def _load_optim_state(opt, named, state: dict):
    for name, p in named:
        if name in state:
            opt.state[p]["momentum_buffer"] = state[name].clone()


def _make_checkpoint(kind, model, opt, named, cfg: Config, step, extra=None) -> Checkpoint:
    meta = {"step": step, "config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    return Checkpoint(
        kind=kind,
        net_config=_net_dict(cfg.net),
        weights={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=_optim_state(opt, named) if opt is not None else {},
        rng=torch.get_rng_state(),
        meta=meta,
    )


def _net_dict(net: NetConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(net).items()}


def _set_lr(opt, cfg: Config, epoch):
    lr = cfg.train.lr * cfg.train.lr_decay**epoch
    for g in opt.param_groups:
        g["lr"] = lr
    return lr


class _Logger:
    def __init__(self, path, reports):
        self.fh = open(path, "a") if path is not None else None
        self.reports = reports

    def __call__(self, report):
        if self.reports is not None:
            self.reports.append(report)
        if self.fh is not None:
            self.fh.write(report.to_json() + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _resume(model, opt, named, resume: Checkpoint | None, kind: str, cfg: Config) -> int:
    if resume is None:
        return 0
    if resume.kind != kind:
        raise ConfigError(f"cannot resume {kind} from a {resume.kind} checkpoint")
    resume.check_net_config(_net_dict(cfg.net))
    model.load_state_dict(resume.weights)
    _load_optim_state(opt, named, resume.optimizer)
    if resume.rng is not None:
        torch.set_rng_state(resume.rng)
    return int(resume.meta.get("step", 0))


# ---------------------------------------------------------------------------
# stage I


def sample_masks(rng, batch: int, h: int, w: int, cfg: Config) -> torch.Tensor:
    """``B x 1 x H x W`` patch masks, ratio fixed or drawn per sample."""
    lo, hi = cfg.train.mask_ratio_range
    out = []
    for _ in range(batch):
        ratio = cfg.train.mask_ratio or float(rng.uniform(lo, hi))
        out.append(make_patch_mask(h, w, cfg.train.mask_patch, ratio, rng).data)
    return torch.from_numpy(np.stack(out))[:, None]


def pretrain_stage1(cfg: Config, dataset, resume: Checkpoint | None = None, log_path=None, reports=None) -> Checkpoint:
    """Masked reconstruction pretraining of the encoder (labels unused)."""
    tr = cfg.train
    torch.manual_seed(tr.seed)
    model = Stage1Net(cfg.net)
    opt, named = _optimizer(model.named_parameters(), cfg)
    step = _resume(model, opt, named, resume, "stage1", cfg)
    tag = _STAGE_TAGS["stage1"]
    spe, total = _schedule(len(dataset), tr.batch_size, tr.stage1_epochs, tr.max_steps)
    logger = _Logger(log_path, reports)
    last_good = resume
    model.train()
    try:
        while step < total:
            epoch, within = divmod(step, spe)
            _set_lr(opt, cfg, epoch)
            idx = _batch_indices(tr.seed, tag, epoch, within, len(dataset), tr.batch_size)
            rng = _step_rng(tr.seed, tag, step)
            vi, ir, _ = make_batch([dataset[i] for i in idx], tr.crop, rng, tr.augment)
            b, _, h, w = vi.shape
            m_vi = sample_masks(rng, b, h, w, cfg)
            m_ir = sample_masks(rng, b, h, w, cfg)
            rec_ir, rec_vi = model(vi * (1 - m_vi), ir * (1 - m_ir))
            vi_y = rgb_to_ycbcr_t(vi)[0]
            loss, report = stage1_loss(
                rec_ir, ir, m_ir, rec_vi, vi_y, m_vi, cfg.loss.rec_alpha1, cfg.loss.rec_alpha2, cfg.loss.sobel_norm, step
            )
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite stage-I loss at step {step}", last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            logger(report)
            step += 1
            if step % spe == 0:
                last_good = _make_checkpoint("stage1", model, opt, named, cfg, step)
    finally:
        logger.close()
    return _make_checkpoint("stage1", model, opt, named, cfg, step)


# ---------------------------------------------------------------------------
# teacher


def _jitter_luma(vi: torch.Tensor, rng) -> torch.Tensor:
    """Random gain/offset on the Y channel, chroma kept."""
    y, cb, cr = rgb_to_ycbcr_t(vi)
    b = vi.shape[0]
    gain = torch.from_numpy(rng.uniform(0.6, 1.4, size=(b, 1, 1, 1))).float()
    off = torch.from_numpy(rng.uniform(-0.15, 0.15, size=(b, 1, 1, 1))).float()
    return ycbcr_to_rgb_t((y * gain + off).clamp(0, 1), cb, cr)


def evaluate_teacher(teacher: Teacher, dataset, crop: int) -> float:
    correct = total = 0
    for pair, label in dataset:
        vi, _, lab = make_batch([(pair, label)], crop, None, augment=False)
        pred = teacher(vi).argmax(1)
        keep = lab != label.ignore_index
        correct += int((pred[keep] == lab[keep]).sum())
        total += int(keep.sum())
    return correct / max(total, 1)


def train_teacher(cfg: Config, dataset, log_path=None) -> Teacher:
    """Fit the built-in teacher on visible images with plain cross-entropy,
    stopping once training-set pixel accuracy reaches the target."""
    tr = cfg.train
    if any(label is None for _, label in dataset):
        raise ConfigError("teacher training needs labeled samples")
    torch.manual_seed(tr.seed + 1)
    tcfg = TeacherConfig(cfg.net.num_classes, tr.teacher_width)
    net = TeacherNet(tcfg.num_classes, tcfg.width, tcfg.in_channels)
    opt = torch.optim.Adam(net.parameters(), lr=tr.teacher_lr)
    tag = _STAGE_TAGS["teacher"]
    spe, total = _schedule(len(dataset), tr.batch_size, tr.teacher_epochs, 0)
    best_acc, best_state = -1.0, None
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(total):
            epoch, within = divmod(step, spe)
            net.train()
            idx = _batch_indices(tr.seed, tag, epoch, within, len(dataset), tr.batch_size)
            rng = _step_rng(tr.seed, tag, step)
            vi, _, lab = make_batch([dataset[i] for i in idx], tr.crop, rng, tr.augment)
            vi = _jitter_luma(vi, rng)
            loss = torch.nn.functional.cross_entropy(net(vi), lab, ignore_index=dataset[0][1].ignore_index)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if within == spe - 1 and (epoch % 5 == 4 or epoch == tr.teacher_epochs - 1):
                net.eval()
                acc = evaluate_teacher(Teacher(net, tcfg.num_classes), dataset, tr.crop)
                for p in net.parameters():
                    p.requires_grad_(True)
                if fh:
                    fh.write(json.dumps({"epoch": epoch, "loss": loss.item(), "pixel_acc": acc}) + "\n")
                if acc > best_acc:
                    best_acc = acc
                    best_state = {k: v.clone() for k, v in net.state_dict().items()}
                if acc >= tr.teacher_target_acc:
                    break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        net.load_state_dict(best_state)
    if best_acc < tr.teacher_target_acc:
        warnings.warn(f"teacher reached pixel accuracy {best_acc:.3f} < target {tr.teacher_target_acc}", RuntimeWarning)
    teacher = Teacher(net, tcfg.num_classes, "builtin", asdict(tcfg))
    teacher.train_accuracy = best_acc
    return teacher


def teacher_checkpoint(teacher: Teacher) -> Checkpoint:
    return Checkpoint(
        kind="teacher",
        net_config=dict(teacher.config),
        weights={k: v.detach().clone() for k, v in teacher.module.state_dict().items()},
        meta={"provenance": teacher.provenance, "num_classes": teacher.num_classes},
    )


def load_teacher(src) -> Teacher:
    """Teacher from a teacher checkpoint (object or path)."""
    ckpt = src if isinstance(src, Checkpoint) else Checkpoint.load(src)
    if ckpt.kind != "teacher":
        raise ConfigError(f"expected a teacher checkpoint, got {ckpt.kind!r}")
    tcfg = TeacherConfig(**ckpt.net_config)
    net = TeacherNet(tcfg.num_classes, tcfg.width, tcfg.in_channels)
    net.load_state_dict(ckpt.weights)
    return Teacher(net, tcfg.num_classes, ckpt.meta.get("provenance", "builtin"), asdict(tcfg))


# ---------------------------------------------------------------------------
# stage II


def init_from_stage1(model: JointNet, stage1: Checkpoint, cfg: Config) -> None:
    """Load exactly the SFE/AFM/PHF/Backbone/CAM groups; decoders stay fresh."""
    if stage1.kind != "stage1":
        raise ConfigError(f"expected a stage1 checkpoint, got {stage1.kind!r}")
    stage1.check_net_config(_net_dict(cfg.net))
    subset = stage1.subset(ENCODER_GROUPS)
    missing, unexpected = model.load_state_dict(subset, strict=False)
    enc_missing = [k for k in missing if k.startswith("encoder.")]
    if enc_missing or unexpected:
        raise ConfigError(f"stage-I checkpoint does not cover the encoder: missing {enc_missing[:3]}")


def stage2_step(model: JointNet, teacher: Teacher, vi, ir, labels, weights: TaskWeights, cfg: Config, step=0):
    """Forward one batch and build the stage-II objective. Returns ``(total, report, task_losses)``."""
    lc = cfg.loss
    out = model(vi, ir)
    vi_y, cb, cr = rgb_to_ycbcr_t(vi)
    fused_rgb = ycbcr_to_rgb_t(out.fused.detach(), cb, cr)
    t_logits = teacher(fused_rgb)
    l_int, l_grad = fusion_loss(out.fused, ir, vi_y, lc.sobel_norm)
    min_kept = lc.ohem_min_kept or None
    parts = {
        "l_int": l_int,
        "l_grad": l_grad,
        "l_seg": ohem_ce(out.logits, labels, lc.ohem_thresh, min_kept),
        "l_kd": kd_loss(out.logits, t_logits, lc.kd_temperature, lc.kd_t2_scale),
        "aux": aux_loss(out.aux, labels, ohem_thresh=lc.ohem_thresh, ohem_min_kept=min_kept, bce_cap=lc.bce_weight_cap),
    }
    return total_stage2(parts, weights, lc.alpha, lc.fair_first, step)


def _weights_from_meta(meta: dict | None, cfg: Config) -> TaskWeights:
    w = TaskWeights(alpha=cfg.loss.alpha, dwa_temperature=cfg.loss.dwa_temperature)
    if meta and "task_weights" in meta:
        tw = meta["task_weights"]
        w.lambda_f, w.lambda_s, w.prev_losses = tw["lambda_f"], tw["lambda_s"], tw["prev_losses"]
    return w


def train_stage2(
    cfg: Config,
    dataset,
    stage1_ckpt: Checkpoint,
    teacher: Teacher,
    resume: Checkpoint | None = None,
    log_path=None,
    reports=None,
) -> Checkpoint:
    """Joint fusion + segmentation training distilled from a frozen teacher."""
    tr = cfg.train
    if teacher.num_classes != cfg.net.num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, student {cfg.net.num_classes}")
    if any(label is None for _, label in dataset):
        raise ConfigError("stage II needs labeled samples")
    torch.manual_seed(tr.seed)
    model = JointNet(cfg.net)
    init_from_stage1(model, stage1_ckpt, cfg)
    opt, named = _optimizer(model.named_parameters(), cfg)
    step = _resume(model, opt, named, resume, "stage2", cfg)
    weights = _weights_from_meta(resume.meta if resume else None, cfg)
    tag = _STAGE_TAGS["stage2"]
    spe, total = _schedule(len(dataset), tr.batch_size, tr.stage2_epochs, tr.max_steps)
    logger = _Logger(log_path, reports)
    last_good = resume

    def extra():
        return {"task_weights": {"lambda_f": weights.lambda_f, "lambda_s": weights.lambda_s, "prev_losses": weights.prev_losses}}

    model.train()
    try:
        while step < total:
            epoch, within = divmod(step, spe)
            _set_lr(opt, cfg, epoch)
            idx = _batch_indices(tr.seed, tag, epoch, within, len(dataset), tr.batch_size)
            rng = _step_rng(tr.seed, tag, step)
            vi, ir, labels = make_batch([dataset[i] for i in idx], tr.crop, rng, tr.augment)
            loss, report, task = stage2_step(model, teacher, vi, ir, labels, weights, cfg, step)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite stage-II loss at step {step}", last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            logger(report)
            if cfg.loss.weighting == "dwa":
                key = ("f", "s") if cfg.loss.dwa_on_raw else ("fair_f", "fair_s")
                weights = dwa_update(weights, {"f": task[key[0]], "s": task[key[1]]})
            step += 1
            if step % spe == 0:
                last_good = _make_checkpoint("stage2", model, opt, named, cfg, step, extra())
    finally:
        logger.close()
    return _make_checkpoint("stage2", model, opt, named, cfg, step, extra())


# ---------------------------------------------------------------------------
# inference


def load_joint(src) -> JointNet:
    ckpt = src if isinstance(src, Checkpoint) else Checkpoint.load(src)
    if ckpt.kind != "stage2" or "De_fus" not in ckpt.groups() or "De_seg" not in ckpt.groups():
        raise ConfigError("inference needs a stage-II checkpoint with De_fus and De_seg weights")
    model = JointNet(net_config_from_dict(ckpt.net_config))
    model.load_state_dict(ckpt.weights)
    return model.eval()


def _pair_tensors(pair: ImagePair):
    vi = torch.from_numpy(pair.visible).permute(2, 0, 1)[None].float()
    ir = torch.from_numpy(pair.infrared).permute(2, 0, 1)[None].float()
    return vi, ir


@torch.no_grad()
def infer_fuse(src, pair: ImagePair, model: JointNet | None = None) -> np.ndarray:
    """Colour fused image (H x W x 3): fused luma with the visible chroma."""
    model = model or load_joint(src)
    vi, ir = _pair_tensors(pair)
    out = model(vi, ir, with_seg=False)
    _, cb, cr = rgb_to_ycbcr_t(vi)
    rgb = ycbcr_to_rgb_t(out.fused, cb, cr)
    return rgb[0].permute(1, 2, 0).numpy().astype(np.float32)


@torch.no_grad()
def infer_fused_y(src, pair: ImagePair, model: JointNet | None = None) -> np.ndarray:
    model = model or load_joint(src)
    vi, ir = _pair_tensors(pair)
    return model(vi, ir, with_seg=False).fused[0, 0].numpy()


@torch.no_grad()
def infer_segment(src, pair: ImagePair, model: JointNet | None = None) -> LabelMap:
    """Argmax of the student logits (ties resolve to the lowest class index)."""
    model = model or load_joint(src)
    vi, ir = _pair_tensors(pair)
    logits = model(vi, ir, with_fusion=False).logits
    pred = logits[0].argmax(0).numpy()
    return LabelMap(pred, model.cfg.num_classes)


def evaluate_segmentation(src, dataset, model: JointNet | None = None):
    """``(per_class_iou, miou, pixel_accuracy)`` over labeled samples."""
    model = model or load_joint(src)
    cm = ConfusionMatrix(model.cfg.num_classes)
    preds, truths = [], []
    for pair, label in dataset:
        pred = infer_segment(None, pair, model)
        cm.update(pred, label)
        preds.append(pred.data.ravel())
        truths.append(label.data.ravel())
    per_class, m = miou(cm)
    return per_class, m, pixel_accuracy(np.concatenate(preds), np.concatenate(truths))


def save_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
