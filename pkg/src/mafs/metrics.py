"""Fusion-quality statistics and segmentation scores.

Fusion metrics take single-channel images on the [0, 255] scale (use
:func:`to_255` on [0, 1] images) and return Python floats.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

from mafs.errors import InvalidInputError

# Xydeas-Petrovic edge-preservation constants
QABF_CONSTANTS = dict(gamma_g=0.9994, kappa_g=-15.0, sigma_g=0.5, gamma_a=0.9879, kappa_a=-22.0, sigma_a=0.8)
VIF_NOISE_VAR = 2.0
VIF_SCALES = 4


def to_255(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise InvalidInputError("fusion metrics take single-channel images")
        a = a[:, :, 0]
    return a * 255.0


def _gray(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise InvalidInputError(f"expected a single-channel image, got shape {a.shape}")
    return a


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin histogram."""
    a = np.clip(np.round(_gray(img)), 0, 255).astype(np.int64)
    counts = np.bincount(a.ravel(), minlength=256)
    p = counts[counts > 0] / a.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def std_dev(img) -> float:
    return float(_gray(img).std())


def spatial_freq(img) -> float:
    a = _gray(img)
    rf2 = np.mean(np.diff(a, axis=1) ** 2) if a.shape[1] > 1 else 0.0
    cf2 = np.mean(np.diff(a, axis=0) ** 2) if a.shape[0] > 1 else 0.0
    return float(math.sqrt(rf2 + cf2))


def avg_grad(img) -> float:
    """Mean of ``sqrt((dx^2 + dy^2) / 2)`` over the ``(H-1) x (W-1)`` grid of forward differences."""
    a = _gray(img)
    h, w = a.shape
    if h < 2 and w < 2:
        return 0.0
    if h < 2 or w < 2:
        d = np.diff(a.ravel())
        return float(np.mean(np.abs(d) / math.sqrt(2.0)))
    dx = a[:-1, 1:] - a[:-1, :-1]
    dy = a[1:, :-1] - a[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


# ---------------------------------------------------------------------------
# Qabf

_QH = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_QV = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _edge_strength_orientation(a):
    sx = convolve2d(a, _QH, mode="same")
    sy = convolve2d(a, _QV, mode="same")
    g = np.sqrt(sx**2 + sy**2)
    # sy / tiny sx may overflow to inf; arctan(inf) is the right limit
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ang = np.where(sx == 0, math.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return g, ang


def _preservation(g_src, a_src, g_f, a_f, c):
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_g = np.where(
            g_src == g_f,
            1.0,
            np.where(g_src > g_f, g_f / np.where(g_src == 0, 1.0, g_src), g_src / np.where(g_f == 0, 1.0, g_f)),
        )
    rel_a = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    qg = c["gamma_g"] / (1.0 + np.exp(c["kappa_g"] * (rel_g - c["sigma_g"])))
    qa = c["gamma_a"] / (1.0 + np.exp(c["kappa_a"] * (rel_a - c["sigma_a"])))
    return qg * qa


def qabf_perfect(constants=None) -> float:
    """Score of a fused image that preserves every edge exactly."""
    c = constants or QABF_CONSTANTS
    qg = c["gamma_g"] / (1.0 + math.exp(c["kappa_g"] * (1.0 - c["sigma_g"])))
    qa = c["gamma_a"] / (1.0 + math.exp(c["kappa_a"] * (1.0 - c["sigma_a"])))
    return qg * qa


def qabf(fused, ir, vi, normalized=False, constants=None) -> float:
    """Gradient-based edge-preservation index.

    With the canonical constants a perfect fusion scores ``qabf_perfect()``
    (about 0.975); ``normalized=True`` divides that out so it scores 1.
    """
    f, a, b = _gray(fused), _gray(ir), _gray(vi)
    if not (f.shape == a.shape == b.shape):
        raise InvalidInputError("qabf: images differ in shape")
    c = constants or QABF_CONSTANTS
    gf, af = _edge_strength_orientation(f)
    ga, aa = _edge_strength_orientation(a)
    gb, ab = _edge_strength_orientation(b)
    den = float(np.sum(ga + gb))
    if den == 0:
        warnings.warn("qabf: both sources have zero gradient everywhere; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    qaf = _preservation(ga, aa, gf, af, c)
    qbf = _preservation(gb, ab, gf, af, c)
    q = float(np.sum(qaf * ga + qbf * gb) / den)
    return q / qabf_perfect(c) if normalized else q


# ---------------------------------------------------------------------------
# VIF (pixel domain, multi-scale)


def gaussian_window(n: int, sigma: float) -> np.ndarray:
    r = (n - 1) / 2.0
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    w = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    w[w < np.finfo(float).eps * w.max()] = 0
    return w / w.sum()


def _window_size(scale: int, h: int, w: int) -> int:
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    limit = min(h, w)
    if limit % 2 == 0:
        limit -= 1
    return max(1, min(n, limit))


def vif_single(ref, dist) -> float:
    """Pixel-domain VIF of ``dist`` against ``ref`` over four scales.

    Windows larger than the (downsampled) image shrink to the largest odd size
    that fits; scales whose window collapses to one pixel are skipped.
    """
    ref, dist = _gray(ref), _gray(dist)
    if ref.shape != dist.shape:
        raise InvalidInputError("vif: images differ in shape")
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = _window_size(scale, *ref.shape)
        if n < 3:
            break
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
            n = _window_size(scale, *ref.shape)
            if n < 3:
                break
            win = gaussian_window(n, n / 5.0)
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        s1 = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        s2 = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        s12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)
        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        flat1 = s1 < 1e-10
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0.0
        flat2 = s2 < 1e-10
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, 1e-10)
        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_NOISE_VAR)))
    if den == 0:
        return 0.0
    return num / den


def vif_fusion(fused, ir, vi) -> float:
    """Sum of per-source VIF scores."""
    return vif_single(ir, fused) + vif_single(vi, fused)


@dataclass
class FusionScores:
    en: float
    sd: float
    sf: float
    vif: float
    qabf: float
    ag: float

    def as_dict(self):
        return asdict(self)


def fusion_scores(fused, ir, vi) -> FusionScores:
    """All six scores for [0, 1] single-channel images."""
    f, a, b = to_255(fused), to_255(ir), to_255(vi)
    return FusionScores(entropy(f), std_dev(f), spatial_freq(f), vif_fusion(f, a, b), qabf(f, a, b), avg_grad(f))


# ---------------------------------------------------------------------------
# segmentation


class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ignored pixels are skipped."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(getattr(pred, "data", pred)).ravel().astype(np.int64)
        truth = np.asarray(getattr(truth, "data", truth)).ravel().astype(np.int64)
        if pred.shape != truth.shape:
            raise InvalidInputError("prediction and truth differ in size")
        keep = truth != self.ignore_index
        pred, truth = pred[keep], truth[keep]
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k or truth.min() < 0 or truth.max() >= k):
            raise InvalidInputError("class index out of range")
        self.counts += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm) -> tuple[list, float]:
    """Per-class IoU (``None`` for classes absent from truth and prediction) and their mean."""
    counts = np.asarray(getattr(cm, "counts", cm), dtype=np.float64)
    if counts.sum() == 0:
        raise InvalidInputError("empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in per_class if v is not None]
    return per_class, float(np.mean(present))


def pixel_accuracy(pred, truth, ignore_index: int = 255) -> float:
    pred = np.asarray(getattr(pred, "data", pred))
    truth = np.asarray(getattr(truth, "data", truth))
    keep = truth != ignore_index
    if not keep.any():
        raise InvalidInputError("no labeled pixels")
    return float((pred[keep] == truth[keep]).mean())
