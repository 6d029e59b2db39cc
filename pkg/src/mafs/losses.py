"""Training objectives and task weighting.

Images are ``B x 1 x H x W`` tensors, logits ``B x K x H x W``, labels
``B x H x W`` integer tensors with ``ignore_index`` marking unlabeled pixels.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from decimal import Decimal
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from mafs.errors import InvalidInputError
from mafs.imaging import IGNORE_INDEX, sobel
from mafs.seg_decoder import AuxOutputs, binary_target, boundary_target

log = logging.getLogger(__name__)

FAIR_EPS = 1e-8


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _check_same(a, b, who):
    if a.shape != b.shape:
        raise InvalidInputError(f"{who}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _mask_tensor(mask, like):
    m = getattr(mask, "data", mask)
    m = torch.as_tensor(m, dtype=like.dtype, device=like.device)
    if m.dim() == 3 and like.dim() == 4:
        m = m.unsqueeze(1)  # per-sample B x H x W masks
    while m.dim() < like.dim():
        m = m.unsqueeze(0)
    if m.shape[-2:] != like.shape[-2:]:
        raise InvalidInputError(f"mask {tuple(m.shape)} does not match image {tuple(like.shape)}")
    return m


def masked_recon_loss(recon, src, mask, a1=5.0, a2=5.0, norm="l1"):
    """``a1 * mean|recon*m - src*m| + a2 * mean|sobel(recon*m) - sobel(src*m)|``."""
    _check_same(recon, src, "masked_recon_loss")
    m = _mask_tensor(mask, recon)
    r, s = recon * m, src * m
    intensity = (r - s).abs().mean()
    grad = (sobel(r, norm) - sobel(s, norm)).abs().mean()
    return a1 * intensity + a2 * grad


def fusion_loss(fused, ir, vi_y, norm="l1"):
    """Returns ``(l_int, l_grad)`` against the per-pixel max of the sources."""
    _check_same(fused, ir, "fusion_loss")
    _check_same(fused, vi_y, "fusion_loss")
    l_int = (fused - torch.maximum(ir.abs(), vi_y.abs())).abs().mean()
    target = torch.maximum(sobel(ir, norm), sobel(vi_y, norm))
    l_grad = (sobel(fused, norm) - target).abs().mean()
    return l_int, l_grad


def ohem_ce(logits, labels, thresh=0.7, min_kept=None, ignore_index=IGNORE_INDEX):
    """Cross-entropy over pixels whose true-class probability is below ``thresh``,
    keeping at least ``min_kept`` of the hardest ones (default: valid pixels // 16)."""
    labels = labels.long()
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise InvalidInputError(f"ohem_ce: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    pix = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="none").flatten()
    valid = labels.flatten() != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("ohem_ce: every pixel is ignored; returning 0", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    pix = pix[valid]
    if thresh >= 1.0:
        return pix.mean()
    if not min_kept:
        min_kept = max(1, n_valid // 16)
    min_kept = min(int(min_kept), n_valid)
    # p_true < thresh  <=>  CE > -log(thresh)
    hard = pix > -math.log(thresh)
    if int(hard.sum()) >= min_kept:
        return pix[hard].mean()
    return torch.topk(pix, min_kept).values.mean()


def bce_weight(target, valid=None, cap=20.0) -> float:
    """Background/foreground pixel ratio, clipped to ``[1/cap, cap]``."""
    if valid is None:
        valid = torch.ones_like(target, dtype=torch.bool)
    fg = float((target[valid] > 0.5).sum())
    bg = float(valid.sum()) - fg
    if fg == 0:
        return cap
    return min(max(bg / fg, 1.0 / cap), cap)


def binary_bce(logits, target, weight=None, valid=None, cap=20.0):
    """``-w * mean(l log p + (1 - l) log(1 - p))`` over valid pixels."""
    target = target.to(logits.dtype)
    _check_same(logits, target, "binary_bce")
    if valid is None:
        valid = torch.ones_like(target, dtype=torch.bool)
    if weight is None:
        weight = bce_weight(target, valid, cap)
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0
    pix = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    return weight * (pix * valid).sum() / n


@dataclass
class AuxLoss:
    boundary: torch.Tensor
    binary: torch.Tensor
    seg: torch.Tensor

    @property
    def total(self):
        return self.boundary + self.binary + self.seg


def aux_loss(aux: AuxOutputs, labels, ignore_index=IGNORE_INDEX, ohem_thresh=0.7, ohem_min_kept=None, bce_cap=20.0):
    labels = labels.long()
    bt = boundary_target(labels, ignore_index)
    if (bt != ignore_index).any():
        l_boundary = F.cross_entropy(aux.boundary_logits, bt, ignore_index=ignore_index)
    else:
        l_boundary = aux.boundary_logits.sum() * 0.0
    target, valid = binary_target(labels, ignore_index)
    l_binary = binary_bce(aux.binary_logits[:, 0], target, valid=valid, cap=bce_cap)
    l_seg = ohem_ce(aux.aux_seg_logits, labels, ohem_thresh, ohem_min_kept, ignore_index)
    return AuxLoss(l_boundary, l_binary, l_seg)


def kd_loss(student, teacher, temperature=4.0, t2_scale=True):
    """Per-pixel ``KL(softmax(s/T) || softmax(t/T))`` averaged over pixels.

    The teacher is detached. Multiplied by ``T**2`` when ``t2_scale``.
    """
    _check_same(student, teacher, "kd_loss")
    t = temperature
    log_ps = F.log_softmax(student / t, dim=1)
    log_pt = F.log_softmax(teacher.detach() / t, dim=1)
    kl = (log_ps.exp() * (log_ps - log_pt)).sum(dim=1)
    loss = kl.mean()
    return loss * (t * t) if t2_scale else loss


def _complement(alpha) -> float:
    # decimal complement: 1 - 0.8 is 0.2 here, not 0.19999999999999996
    return float(Decimal(1) - Decimal(repr(float(alpha))))


def alpha_fair(loss, alpha=0.8):
    """``L**(1 - alpha) / (1 - alpha)``; non-positive losses are clamped to 1e-8."""
    if alpha >= 1:
        raise InvalidInputError("alpha must be < 1")
    beta = _complement(alpha)
    if isinstance(loss, torch.Tensor):
        if bool((loss <= 0).any()):
            log.debug("alpha_fair: clamping non-positive loss %s", loss.detach())
        loss = loss.clamp_min(FAIR_EPS)
        return loss.pow(beta) / beta
    if loss <= 0:
        log.debug("alpha_fair: clamping non-positive loss %s", loss)
        loss = FAIR_EPS
    return loss**beta / beta


@dataclass
class TaskWeights:
    """Fusion/segmentation weights driven by dynamic weight averaging."""

    lambda_f: float = 1.0
    lambda_s: float = 1.0
    prev_losses: dict | None = None
    alpha: float = 0.8
    dwa_temperature: float = 500.0
    num_tasks: int = 2

    def snapshot(self) -> dict:
        return {"lambda_f": self.lambda_f, "lambda_s": self.lambda_s}


def dwa_update(weights: TaskWeights, current_losses: dict) -> TaskWeights:
    """Next-iteration weights from loss ratios ``L(t) / L(t-1)``.

    ``current_losses`` maps ``"f"``/``"s"`` to scalars (already transformed if
    the caller wants ratios of fair losses). With no history the weights stay
    at 1.
    """
    cur = {k: float(current_losses[k]) for k in ("f", "s")}
    prev = weights.prev_losses
    if prev is None:
        lam = {"f": 1.0, "s": 1.0}
    else:
        ratios = {k: (cur[k] / prev[k] if prev[k] != 0 else 1.0) for k in ("f", "s")}
        t = weights.dwa_temperature
        m = max(ratios.values()) / t
        e = {k: math.exp(r / t - m) for k, r in ratios.items()}
        z = sum(e.values())
        lam = {k: weights.num_tasks * e[k] / z for k in ("f", "s")}
    return TaskWeights(lam["f"], lam["s"], cur, weights.alpha, weights.dwa_temperature, weights.num_tasks)


@dataclass
class LossReport:
    stage: str
    components: dict
    total: float
    weights: dict = field(default_factory=dict)
    step: int = 0
    alpha: float = 0.0
    fair_first: bool = True

    def recombine(self) -> float:
        """Rebuild the total from the recorded components and weights."""
        c = self.components
        if self.stage == "I":
            return c["l_vi"] + c["l_ir"]
        lf = c["l_int"] + c["l_grad"]
        ls = c["l_seg"] + c["l_kd"] + c["l_aux"]
        wf, ws = self.weights["lambda_f"], self.weights["lambda_s"]
        if self.fair_first:
            return wf * alpha_fair(lf, self.alpha) + ws * alpha_fair(ls, self.alpha)
        return alpha_fair(wf * lf, self.alpha) + alpha_fair(ws * ls, self.alpha)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def total_stage2(parts: dict, weights: TaskWeights, alpha=None, fair_first=True, step=0):
    """Weighted, fairness-transformed stage-II objective.

    ``parts`` holds tensors ``l_int, l_grad, l_seg, l_kd`` and an ``AuxLoss``
    under ``aux``. Returns ``(total_tensor, report, task_losses)`` where
    ``task_losses`` has the raw and transformed per-task sums as floats.
    """
    alpha = weights.alpha if alpha is None else alpha
    aux = parts["aux"]
    l_aux = aux.total
    lf = parts["l_int"] + parts["l_grad"]
    ls = parts["l_seg"] + parts["l_kd"] + l_aux
    wf, ws = weights.lambda_f, weights.lambda_s
    fair_f, fair_s = alpha_fair(lf, alpha), alpha_fair(ls, alpha)
    if fair_first:
        total = wf * fair_f + ws * fair_s
    else:
        total = alpha_fair(wf * lf, alpha) + alpha_fair(ws * ls, alpha)
    comps = {
        "l_int": parts["l_int"],
        "l_grad": parts["l_grad"],
        "l_seg": parts["l_seg"],
        "l_kd": parts["l_kd"],
        "l_aux": l_aux,
        "l_boundary": aux.boundary,
        "l_binary": aux.binary,
        "l_seg_aux": aux.seg,
    }
    comps = {k: _scalar(v) for k, v in comps.items()}
    report = LossReport("II", comps, _scalar(total), weights.snapshot(), step, alpha, fair_first)
    task = {"f": _scalar(lf), "s": _scalar(ls), "fair_f": _scalar(fair_f), "fair_s": _scalar(fair_s)}
    return total, report, task


def stage1_loss(rec_ir, ir, mask_ir, rec_vi, vi_y, mask_vi, a1=5.0, a2=5.0, norm="l1", step=0):
    l_vi = masked_recon_loss(rec_vi, vi_y, mask_vi, a1, a2, norm)
    l_ir = masked_recon_loss(rec_ir, ir, mask_ir, a1, a2, norm)
    total = l_vi + l_ir
    report = LossReport("I", {"l_vi": _scalar(l_vi), "l_ir": _scalar(l_ir)}, _scalar(total), {}, step)
    return total, report
