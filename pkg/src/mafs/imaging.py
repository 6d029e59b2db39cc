"""Image containers, colour conversion, gradients, patch masks and toy data.

Images are numpy arrays shaped ``H x W x C`` with values in ``[0, 1]``.
Network-side helpers (``sobel``, ``rgb_to_ycbcr_t``) take ``B x C x H x W``
torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy import ndimage

from mafs.errors import InvalidInputError

IGNORE_INDEX = 255

# BT.601 full-range (JFIF) RGB -> YCbCr, offsets applied to Cb/Cr
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ],
    dtype=np.float64,
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)
_YCC_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass
class ImagePair:
    """Registered visible (H x W x 3) and infrared (H x W x 1) images."""

    visible: np.ndarray
    infrared: np.ndarray

    def __post_init__(self):
        self.visible = as_image(self.visible, channels=3)
        self.infrared = as_image(self.infrared, channels=1)
        if self.visible.shape[:2] != self.infrared.shape[:2]:
            raise InvalidInputError(
                f"visible {self.visible.shape[:2]} and infrared {self.infrared.shape[:2]} are not registered"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape[0], self.visible.shape[1]


@dataclass
class LabelMap:
    data: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.ndim != 2:
            raise InvalidInputError(f"label map must be 2-D, got shape {self.data.shape}")
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        valid = self.data[self.data != self.ignore_index]
        if valid.size and (valid.min() < 0 or valid.max() >= self.num_classes):
            raise InvalidInputError("label values outside [0, num_classes)")


@dataclass
class PatchMask:
    """Binary per-pixel mask, constant on each aligned ``patch_size`` tile. 1 = masked."""

    data: np.ndarray
    patch_size: int
    ratio: float

    @property
    def fraction(self) -> float:
        return float(self.data.mean())


def as_image(arr, channels: int | None = None) -> np.ndarray:
    """Validate and normalise an array to ``H x W x C`` float32 in [0, 1]."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise InvalidInputError(f"expected H x W x {{1,3}} image, got shape {a.shape}")
    if channels is not None and a.shape[2] != channels:
        raise InvalidInputError(f"expected {channels} channels, got {a.shape[2]}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError("empty image")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise InvalidInputError("image values must be finite and within [0, 1]")
    return a


# ---------------------------------------------------------------------------
# colour


def rgb_to_ycbcr(img):
    """Split an RGB image into (Y, Cb, Cr), each ``H x W x 1``."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError(f"rgb_to_ycbcr needs a 3-channel image, got shape {a.shape}")
    ycc = a @ _RGB2YCC.T + _YCC_OFFSET
    ycc = np.clip(ycc, 0.0, 1.0)
    return ycc[:, :, 0:1], ycc[:, :, 1:2], ycc[:, :, 2:3]


def ycbcr_to_rgb(y, cb, cr):
    y, cb, cr = (np.asarray(c, dtype=np.float64) for c in (y, cb, cr))
    if not (y.shape == cb.shape == cr.shape):
        raise InvalidInputError(f"channel shapes differ: {y.shape}, {cb.shape}, {cr.shape}")
    if y.ndim == 2:
        y, cb, cr = y[:, :, None], cb[:, :, None], cr[:, :, None]
    ycc = np.concatenate([y, cb, cr], axis=2) - _YCC_OFFSET
    return np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0)


def rgb_to_ycbcr_t(x: torch.Tensor):
    """Tensor version for ``B x 3 x H x W``; returns three ``B x 1 x H x W`` tensors."""
    m = torch.as_tensor(_RGB2YCC, dtype=x.dtype, device=x.device)
    ycc = torch.einsum("ij,bjhw->bihw", m, x)
    off = torch.as_tensor(_YCC_OFFSET, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    ycc = (ycc + off).clamp(0.0, 1.0)
    return ycc[:, 0:1], ycc[:, 1:2], ycc[:, 2:3]


def ycbcr_to_rgb_t(y: torch.Tensor, cb: torch.Tensor, cr: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(_YCC2RGB, dtype=y.dtype, device=y.device)
    ycc = torch.cat([y, cb - 0.5, cr - 0.5], dim=1)
    return torch.einsum("ij,bjhw->bihw", m, ycc).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# gradients

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel(x: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """Per-channel Sobel magnitude of a ``B x C x H x W`` tensor, reflect-padded."""
    if x.dim() != 4:
        raise InvalidInputError(f"sobel expects B x C x H x W, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    mode = "reflect" if h > 1 and w > 1 else "replicate"
    xp = F.pad(x.reshape(b * c, 1, h, w), (1, 1, 1, 1), mode=mode)
    k = torch.stack([_SOBEL_X, _SOBEL_Y]).unsqueeze(1).to(dtype=x.dtype, device=x.device)
    g = F.conv2d(xp, k)
    gx, gy = g[:, 0], g[:, 1]
    if norm == "l1":
        mag = gx.abs() + gy.abs()
    elif norm == "l2":
        mag = torch.sqrt(gx * gx + gy * gy + 1e-12)
    else:
        raise InvalidInputError(f"unknown sobel norm {norm!r}")
    return mag.reshape(b, c, h, w)


def sobel_grad(img, norm: str = "l1") -> np.ndarray:
    """Sobel gradient magnitude (``H x W``) of a single-channel image."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise InvalidInputError("sobel_grad takes a single-channel image")
        a = a[:, :, 0]
    if a.ndim != 2:
        raise InvalidInputError(f"bad image shape {a.shape}")
    t = torch.from_numpy(a)[None, None]
    return sobel(t, norm=norm)[0, 0].numpy()


# ---------------------------------------------------------------------------
# masking


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_mask_ratio(rng, low: float = 0.25, high: float = 0.75) -> float:
    return float(_as_rng(rng).uniform(low, high))


def make_patch_mask(h: int, w: int, patch_size: int, ratio: float, rng_seed=None) -> PatchMask:
    """Mask random whole tiles until the masked-pixel fraction reaches ``ratio``.

    Tiles on the right/bottom border may be partial and count by their area.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"mask ratio must lie in (0, 1), got {ratio}")
    if patch_size < 1 or h < 1 or w < 1:
        raise InvalidInputError("patch_size, h and w must be positive")
    rng = _as_rng(rng_seed)
    ny, nx = math.ceil(h / patch_size), math.ceil(w / patch_size)
    order = rng.permutation(ny * nx)
    mask = np.zeros((h, w), dtype=np.float32)
    target = ratio * h * w
    covered = 0
    for t in order:
        ty, tx = divmod(int(t), nx)
        ys, xs = ty * patch_size, tx * patch_size
        tile = mask[ys : ys + patch_size, xs : xs + patch_size]
        tile[...] = 1.0
        covered += tile.size
        if covered >= target - 1e-9:
            break
    return PatchMask(mask, patch_size, ratio)


def apply_mask(img, mask, mode: str = "input"):
    """Zero masked pixels (``mode="input"``) or keep only masked pixels (``mode="loss"``).

    Works on numpy ``H x W x C`` images and ``... x H x W`` tensors alike.
    """
    m = mask.data if isinstance(mask, PatchMask) else mask
    if isinstance(img, torch.Tensor):
        m = torch.as_tensor(m, dtype=img.dtype, device=img.device)
        if img.shape[-2:] != m.shape[-2:]:
            raise InvalidInputError(f"mask {tuple(m.shape)} does not match image {tuple(img.shape)}")
    else:
        img = np.asarray(img)
        m = np.asarray(m, dtype=img.dtype)
        if img.shape[:2] != m.shape[:2]:
            raise InvalidInputError(f"mask {m.shape} does not match image {img.shape}")
        if img.ndim == 3 and m.ndim == 2:
            m = m[:, :, None]
    if mode == "input":
        return img * (1 - m)
    if mode == "loss":
        return img * m
    raise InvalidInputError(f"unknown mask mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic scenes

# per-class visible colours and thermal levels; class 0 is background
_PALETTE = np.array(
    [
        [0.45, 0.45, 0.42],
        [0.85, 0.20, 0.15],
        [0.15, 0.65, 0.25],
        [0.20, 0.30, 0.85],
        [0.85, 0.80, 0.15],
        [0.70, 0.25, 0.75],
        [0.15, 0.75, 0.80],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.20],
    ]
)


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "circle"
    cls: int
    # rect: y0, x0, y1, x1 (half-open, integer); circle: cy, cx, r
    geom: tuple

    def area(self) -> float:
        if self.kind == "rect":
            y0, x0, y1, x1 = self.geom
            return float((y1 - y0) * (x1 - x0))
        return math.pi * self.geom[2] ** 2

    def raster(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        if self.kind == "rect":
            y0, x0, y1, x1 = self.geom
            return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        cy, cx, r = self.geom
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def class_color(cls: int) -> np.ndarray:
    if cls < len(_PALETTE):
        return _PALETTE[cls]
    hue = (cls * 0.618034) % 1.0
    return np.array([0.5 + 0.4 * math.cos(2 * math.pi * (hue + k / 3)) for k in range(3)])


def class_temperature(cls: int, num_classes: int) -> float:
    if cls == 0:
        return 0.2
    return 0.45 + 0.5 * (cls - 1) / max(1, num_classes - 2)


def random_shapes(h: int, w: int, num_classes: int, rng, max_shapes: int = 4) -> list[Shape]:
    """Place non-overlapping rectangles and circles (1-pixel gap) covering every
    foreground class at least once when room allows."""
    rng = _as_rng(rng)
    n = int(rng.integers(2, max_shapes + 1))
    classes = list(rng.permutation(np.arange(1, num_classes)))
    while len(classes) < n:
        classes.append(int(rng.integers(1, num_classes)))
    classes = classes[:n]
    occupied = np.zeros((h, w), dtype=bool)
    lo = max(3, min(h, w) // 8)
    hi = max(lo + 1, min(h, w) // 3)
    shapes = []
    for cls in classes:
        for _ in range(50):
            if rng.random() < 0.5:
                sh, sw = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
                if sh >= h or sw >= w:
                    continue
                y0, x0 = int(rng.integers(0, h - sh + 1)), int(rng.integers(0, w - sw + 1))
                s = Shape("rect", int(cls), (y0, x0, y0 + sh, x0 + sw))
            else:
                r = float(rng.uniform(lo / 2, hi / 2))
                if 2 * r + 2 >= min(h, w):
                    continue
                cy, cx = float(rng.uniform(r + 1, h - r - 1)), float(rng.uniform(r + 1, w - r - 1))
                s = Shape("circle", int(cls), (cy, cx, r))
            pix = s.raster(h, w)
            if not pix.any() or (ndimage.binary_dilation(pix) & occupied).any():
                continue
            occupied |= pix
            shapes.append(s)
            break
    return shapes


# synthetic texture parameters (amplitudes on the [0, 1] scale, periods in pixels)
STRIPE_AMP, STRIPE_PERIOD = 0.03, (6.0, 12.0)
TEXTURE_AMP, TEXTURE_PERIOD = 0.06, (5.0, 10.0)
IR_NOISE_AMP = 0.015


def _smooth_noise(rng, h: int, w: int, sigma: float, amp: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    std = n.std()
    return amp * n / std if std > 0 else n


def render_scene(shapes: Sequence[Shape], h: int, w: int, num_classes: int, rng) -> tuple[ImagePair, LabelMap]:
    rng = _as_rng(rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=np.int64)
    light = rng.uniform(0.45, 1.0)

    # background: gentle illumination gradient plus faint stripes
    ang = rng.uniform(0, math.pi)
    ramp = (np.cos(ang) * xx / w + np.sin(ang) * yy / h) * 0.15
    vis = _PALETTE[0][None, None, :] + ramp[..., None]
    vis = vis + STRIPE_AMP * np.sin(2 * math.pi * (xx + yy) / rng.uniform(*STRIPE_PERIOD))[..., None]
    ir = np.full((h, w), class_temperature(0, num_classes)) + 0.05 * ramp

    for s in shapes:
        pix = s.raster(h, w)
        label[pix] = s.cls
        period = rng.uniform(*TEXTURE_PERIOD)
        tex = TEXTURE_AMP * np.sin(2 * math.pi * (xx * math.cos(s.cls) + yy * math.sin(s.cls)) / period)
        vis[pix] = class_color(s.cls)[None, :] + tex[pix][:, None]
        ir[pix] = class_temperature(s.cls, num_classes) + rng.uniform(-0.04, 0.04)

    vis = vis * light
    ir = ir + _smooth_noise(rng, h, w, sigma=2.0, amp=IR_NOISE_AMP)
    pair = ImagePair(np.clip(vis, 0, 1).astype(np.float32), np.clip(ir, 0, 1)[..., None].astype(np.float32))
    return pair, LabelMap(label, num_classes)


def synth_dataset(n_pairs: int, h: int, w: int, num_classes: int, rng_seed=0) -> list[tuple[ImagePair, LabelMap]]:
    """Deterministic toy scenes: coloured textured shapes (visible), per-class
    thermal levels with smooth noise (infrared), and the class raster."""
    if n_pairs < 1:
        raise InvalidInputError("n_pairs must be >= 1")
    if num_classes < 2:
        raise InvalidInputError("num_classes must be >= 2")
    out = []
    for i in range(n_pairs):
        rng = np.random.default_rng([int(rng_seed), i])
        shapes = random_shapes(h, w, num_classes, rng)
        out.append(render_scene(shapes, h, w, num_classes, rng))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugParams:
    top: int
    left: int
    flip: bool
    rot: int  # quarter turns, counter-clockwise


def draw_aug_params(rng, h: int, w: int, crop: int) -> AugParams:
    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} smaller than crop {crop}")
    rng = _as_rng(rng)
    return AugParams(
        top=int(rng.integers(0, h - crop + 1)),
        left=int(rng.integers(0, w - crop + 1)),
        flip=bool(rng.random() < 0.5),
        rot=int(rng.integers(0, 4)),
    )


def _spatial(a: np.ndarray, p: AugParams, crop: int) -> np.ndarray:
    a = a[p.top : p.top + crop, p.left : p.left + crop]
    if p.flip:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, p.rot, axes=(0, 1)))


def apply_aug(pair: ImagePair, label: LabelMap | None, params: AugParams, crop: int):
    h, w = pair.shape
    if h < crop or w < crop:
        raise InvalidInputError(f"image {h}x{w} smaller than crop {crop}")
    out = ImagePair(_spatial(pair.visible, params, crop), _spatial(pair.infrared, params, crop))
    if label is None:
        return out, None
    return out, LabelMap(_spatial(label.data, params, crop), label.num_classes, label.ignore_index)


def augment(pair: ImagePair, label: LabelMap | None, crop: int = 256, rng=None):
    """Random crop, horizontal flip and quarter-turn rotation, shared by all maps."""
    h, w = pair.shape
    params = draw_aug_params(rng, h, w, crop)
    return apply_aug(pair, label, params, crop)


# ---------------------------------------------------------------------------
# I/O


def read_image(path, channels: int | None = None) -> np.ndarray:
    with PILImage.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3:
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.float32) / 255.0
    return as_image(a, channels)


def write_image(path, img) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    a8 = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(a8).save(path)


def read_label(path, num_classes: int, ignore_index: int = IGNORE_INDEX) -> LabelMap:
    with PILImage.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=np.int64)
    return LabelMap(a, num_classes, ignore_index)


def write_label(path, label) -> None:
    a = label.data if isinstance(label, LabelMap) else np.asarray(label)
    if a.min() < 0 or a.max() > 255:
        raise InvalidInputError("label values must fit in 8 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(a.astype(np.uint8)).save(path)


def read_manifest(path) -> list[tuple[Path, Path, Path | None]]:
    """Parse ``visible<TAB>infrared<TAB>label`` lines; relative paths resolve
    against the manifest's directory. The label column may be empty or absent."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise InvalidInputError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
        vis, ir = (path.parent / c for c in cols[:2])
        lab = path.parent / cols[2] if len(cols) == 3 and cols[2] else None
        rows.append((vis, ir, lab))
    return rows


def write_manifest(path, rows) -> None:
    path = Path(path)
    lines = []
    for row in rows:
        cols = [str(Path(c).relative_to(path.parent)) if c is not None else "" for c in row]
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")


def load_samples(manifest, num_classes: int) -> list[tuple[ImagePair, LabelMap | None]]:
    out = []
    for vis, ir, lab in read_manifest(manifest):
        pair = ImagePair(read_image(vis, 3), read_image(ir, 1))
        label = read_label(lab, num_classes) if lab is not None else None
        out.append((pair, label))
    return out
