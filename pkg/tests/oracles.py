"""Independent reference implementations used as test oracles.

Everything here is written with plain loops over Python floats so that it
shares no code path with the vectorized package implementations.
"""
from __future__ import annotations

import math

import numpy as np
import torch

# ---------------------------------------------------------------------------
# fusion statistics


def entropy_bf(img):
    counts = {}
    n = 0
    for row in img:
        for v in row:
            b = int(min(max(round(float(v)), 0), 255))
            counts[b] = counts.get(b, 0) + 1
            n += 1
    e = 0.0
    for c in counts.values():
        p = c / n
        e -= p * math.log2(p)
    return e


def std_bf(img):
    vals = [float(v) for row in img for v in row]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def sf_bf(img):
    h, w = len(img), len(img[0])
    rf = sum((float(img[i][j]) - float(img[i][j - 1])) ** 2 for i in range(h) for j in range(1, w)) / (h * (w - 1))
    cf = sum((float(img[i][j]) - float(img[i - 1][j])) ** 2 for i in range(1, h) for j in range(w)) / ((h - 1) * w)
    return math.sqrt(rf + cf)


def ag_bf(img):
    h, w = len(img), len(img[0])
    total = 0.0
    for i in range(h - 1):
        for j in range(w - 1):
            dx = float(img[i][j + 1]) - float(img[i][j])
            dy = float(img[i + 1][j]) - float(img[i][j])
            total += math.sqrt((dx * dx + dy * dy) / 2.0)
    return total / ((h - 1) * (w - 1))


# ---------------------------------------------------------------------------
# Qabf, straight from the published definition


def _conv2_same(img, k):
    """MATLAB ``conv2(img, k, 'same')`` with zero padding (true convolution)."""
    h, w = len(img), len(img[0])
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            s = 0.0
            for u in range(3):
                for v in range(3):
                    y, x = i + 1 - u, j + 1 - v
                    if 0 <= y < h and 0 <= x < w:
                        s += float(img[y][x]) * k[u][v]
            out[i][j] = s
    return out


def qabf_bf(fused, a, b):
    gx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    gy = [[1, 2, 1], [0, 0, 0], [-1, -2, -1]]
    Tg, kg, Dg = 0.9994, -15.0, 0.5
    Ta, ka, Da = 0.9879, -22.0, 0.8

    def strength_angle(im):
        sx, sy = _conv2_same(im, gx), _conv2_same(im, gy)
        h, w = len(im), len(im[0])
        g = [[math.sqrt(sx[i][j] ** 2 + sy[i][j] ** 2) for j in range(w)] for i in range(h)]
        ang = [[math.pi / 2 if sx[i][j] == 0 else math.atan(sy[i][j] / sx[i][j]) for j in range(w)] for i in range(h)]
        return g, ang

    gf, af = strength_angle(fused)
    ga, aa = strength_angle(a)
    gb, ab = strength_angle(b)
    h, w = len(fused), len(fused[0])

    def q(gs, as_, i, j):
        if gs[i][j] == gf[i][j]:
            G = 1.0
        elif gs[i][j] > gf[i][j]:
            G = gf[i][j] / gs[i][j]
        else:
            G = gs[i][j] / gf[i][j]
        A = 1.0 - abs(as_[i][j] - af[i][j]) / (math.pi / 2)
        return Tg / (1 + math.exp(kg * (G - Dg))) * Ta / (1 + math.exp(ka * (A - Da)))

    num = den = 0.0
    for i in range(h):
        for j in range(w):
            num += q(ga, aa, i, j) * ga[i][j] + q(gb, ab, i, j) * gb[i][j]
            den += ga[i][j] + gb[i][j]
    return num / den


# ---------------------------------------------------------------------------
# pixel-domain VIF


def _gauss(n, sigma):
    r = (n - 1) / 2.0
    w = [[math.exp(-((x - r) ** 2 + (y - r) ** 2) / (2 * sigma * sigma)) for x in range(n)] for y in range(n)]
    peak = max(max(row) for row in w)
    eps = np.finfo(float).eps
    w = [[v if v >= eps * peak else 0.0 for v in row] for row in w]
    s = sum(sum(row) for row in w)
    return [[v / s for v in row] for row in w]


def _conv_valid(img, k):
    h, w, n = len(img), len(img[0]), len(k)
    out = []
    for i in range(h - n + 1):
        row = []
        for j in range(w - n + 1):
            s = 0.0
            for u in range(n):
                for v in range(n):
                    # true convolution: flip the kernel
                    s += img[i + u][j + v] * k[n - 1 - u][n - 1 - v]
            row.append(s)
        out.append(row)
    return out


def _win(scale, h, w):
    n = 2 ** (4 - scale + 1) + 1
    lim = min(h, w)
    if lim % 2 == 0:
        lim -= 1
    return max(1, min(n, lim))


def vif_single_bf(ref, dist, sigma_n2=2.0):
    ref = [[float(v) for v in row] for row in ref]
    dist = [[float(v) for v in row] for row in dist]
    num = den = 0.0
    for scale in range(1, 5):
        n = _win(scale, len(ref), len(ref[0]))
        if n < 3:
            break
        if scale > 1:
            k = _gauss(n, n / 5.0)
            ref = [row[::2] for row in _conv_valid(ref, k)[::2]]
            dist = [row[::2] for row in _conv_valid(dist, k)[::2]]
            n = _win(scale, len(ref), len(ref[0]))
            if n < 3:
                break
        k = _gauss(n, n / 5.0)
        sq = lambda a, b: [[x * y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]  # noqa: E731
        mu1, mu2 = _conv_valid(ref, k), _conv_valid(dist, k)
        e11, e22, e12 = _conv_valid(sq(ref, ref), k), _conv_valid(sq(dist, dist), k), _conv_valid(sq(ref, dist), k)
        for i in range(len(mu1)):
            for j in range(len(mu1[0])):
                s1 = max(e11[i][j] - mu1[i][j] ** 2, 0.0)
                s2 = max(e22[i][j] - mu2[i][j] ** 2, 0.0)
                s12 = e12[i][j] - mu1[i][j] * mu2[i][j]
                g = s12 / (s1 + 1e-10)
                sv = s2 - g * s12
                if s1 < 1e-10:
                    g, sv, s1 = 0.0, s2, 0.0
                if s2 < 1e-10:
                    g, sv = 0.0, 0.0
                if g < 0:
                    sv, g = s2, 0.0
                sv = max(sv, 1e-10)
                num += math.log10(1 + g * g * s1 / (sv + sigma_n2))
                den += math.log10(1 + s1 / sigma_n2)
    return num / den if den else 0.0


# ---------------------------------------------------------------------------
# segmentation


def boundary_bf(labels: np.ndarray, background=0) -> np.ndarray:
    """Morphological gradient (3x3 dilation != erosion, edge-replicated),
    restricted to non-background pixels."""
    from scipy import ndimage

    dil = ndimage.grey_dilation(labels, size=(3, 3), mode="nearest")
    ero = ndimage.grey_erosion(labels, size=(3, 3), mode="nearest")
    return ((dil != ero) & (labels != background)).astype(np.int64)


def iou_bf(pred, truth, k):
    out = []
    for c in range(k):
        tp = fp = fn = 0
        for p, t in zip(np.ravel(pred), np.ravel(truth)):
            tp += p == c and t == c
            fp += p == c and t != c
            fn += p != c and t == c
        out.append(None if tp + fp + fn == 0 else tp / (tp + fp + fn))
    return out


# ---------------------------------------------------------------------------
# gradients


def central_diff_check(fn, inputs, eps=1e-6):
    """Relative error between autograd and central differences of ``fn`` (a
    scalar-valued function of float64 tensors) over every input element."""
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs)
    num_all, ana_all = [], []
    with torch.no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = float(fn(*inputs))
                flat[i] = orig - eps
                minus = float(fn(*inputs))
                flat[i] = orig
                num_all.append((plus - minus) / (2 * eps))
            ana_all.append(ga.reshape(-1))
    num = torch.tensor(num_all, dtype=torch.float64)
    ana = torch.cat(ana_all)
    scale = max(float(num.norm()), float(ana.norm()), 1e-12)
    return float((num - ana).norm()) / scale
