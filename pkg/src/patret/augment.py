"""Augmentation without scaling, plus guarded scale/rotation ablations.

Line drawings keep a fixed stroke width no matter how large the object
is drawn, so the default policy never resamples content: crops are not
resized back, translations pad with background, flips mirror pixels.
The two transforms known to hurt on this kind of data (random resized
crop, random rotation) exist only behind explicit ablation flags.

Train-time order is flip, then translate, then crop (rotation, when
ablated in, runs just before the crop; resized crop replaces the plain
crop).  Eval applies only center crop/pad to the target size.  Pixels
feed the network as (255 - x) / 255, so ink is ~1 and background 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from patret.dataset import BACKGROUND, DrawingImage
from patret.tensor import Tensor

__all__ = [
    "AugmentPolicy",
    "random_crop_no_resize",
    "random_translate_pad",
    "horizontal_flip",
    "rotate",
    "ablation_random_resized_crop",
    "ablation_random_rotation",
    "center_fit",
    "normalize",
    "apply_policy",
]


@dataclass
class AugmentPolicy:
    """Train-time transform parameters; defaults define AUG w/o S."""

    crop_size: int
    translate_max: int = 4
    hflip_prob: float = 0.5
    pad_value: int = BACKGROUND
    eval_size: Optional[int] = None
    ablation_random_resized_crop: bool = False
    ablation_rrc_scale: tuple = (0.2, 1.0)
    ablation_random_rotation_deg: Optional[float] = None

    def __post_init__(self):
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.translate_max < 0:
            raise ValueError("translate_max must be >= 0")
        if not 0 <= self.pad_value <= 255:
            raise ValueError("pad_value must be a byte")
        if self.eval_size is None:
            self.eval_size = self.crop_size

    def rescales_content(self) -> bool:
        return self.ablation_random_resized_crop or (
            self.ablation_random_rotation_deg is not None
        )


def random_crop_no_resize(
    img: DrawingImage, crop_size: int, rng: np.random.Generator
) -> DrawingImage:
    """Cut a crop_size square at a uniform offset; never resized back."""
    h, w = img.pixels.shape
    if crop_size > min(h, w):
        raise ValueError(f"crop_size {crop_size} exceeds image dims {w}x{h}")
    ox = int(rng.integers(0, w - crop_size + 1))
    oy = int(rng.integers(0, h - crop_size + 1))
    out = img.pixels[oy : oy + crop_size, ox : ox + crop_size].copy()
    return DrawingImage(out, img.patent_id, img.view_index)


def random_translate_pad(
    img: DrawingImage, translate_max: int, pad_value: int, rng: np.random.Generator
) -> DrawingImage:
    """Shift content by uniform (dx, dy), filling vacated pixels with pad."""
    h, w = img.pixels.shape
    if translate_max >= min(h, w):
        raise ValueError("translate_max must be smaller than image dims")
    dx = int(rng.integers(-translate_max, translate_max + 1))
    dy = int(rng.integers(-translate_max, translate_max + 1))
    out = np.full_like(img.pixels, pad_value)
    dst_x = slice(max(dx, 0), w + min(dx, 0))
    dst_y = slice(max(dy, 0), h + min(dy, 0))
    src_x = slice(max(-dx, 0), w + min(-dx, 0))
    src_y = slice(max(-dy, 0), h + min(-dy, 0))
    out[dst_y, dst_x] = img.pixels[src_y, src_x]
    return DrawingImage(out, img.patent_id, img.view_index)


def horizontal_flip(
    img: DrawingImage, prob: float, rng: np.random.Generator
) -> DrawingImage:
    """Mirror columns with the given probability: (x, y) -> (w-1-x, y)."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must be in [0, 1]")
    if rng.random() < prob:
        return DrawingImage(
            np.ascontiguousarray(img.pixels[:, ::-1]), img.patent_id, img.view_index
        )
    return img


# ---------------------------------------------------------------------------
# ablation transforms (harmful on fixed-stroke drawings; flag-guarded)


def _bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape
    src = pixels.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def rotate(img: DrawingImage, degrees: float, pad_value: int = BACKGROUND) -> DrawingImage:
    """Rotate about the image center, nearest-neighbor, pad outside.

    Exact on axis-aligned angles: at 90 degrees a square image maps
    pixel (x, y) to (width-1-y, x).
    """
    h, w = img.pixels.shape
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    sx = np.rint(c * dx + s * dy + cx).astype(int)
    sy = np.rint(-s * dx + c * dy + cy).astype(int)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full_like(img.pixels, pad_value)
    out[inside] = img.pixels[sy[inside], sx[inside]]
    return DrawingImage(out, img.patent_id, img.view_index)


def _require_flag(policy: Optional[AugmentPolicy], enabled: bool, name: str):
    if policy is None or not enabled:
        raise ValueError(
            f"{name} rescales content and must be enabled explicitly "
            "on the AugmentPolicy"
        )


def ablation_random_resized_crop(
    img: DrawingImage,
    out_size: int,
    scale_range: tuple,
    rng: np.random.Generator,
    policy: Optional[AugmentPolicy] = None,
) -> DrawingImage:
    """Crop a random sub-window (area fraction in scale_range, aspect in
    [3/4, 4/3]) and bilinear-resize it to out_size."""
    _require_flag(
        policy,
        policy is not None and policy.ablation_random_resized_crop,
        "random resized crop",
    )
    h, w = img.pixels.shape
    area = h * w
    crop = None
    for _ in range(10):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            ox = int(rng.integers(0, w - cw + 1))
            oy = int(rng.integers(0, h - ch + 1))
            crop = img.pixels[oy : oy + ch, ox : ox + cw]
            break
    if crop is None:
        side = min(h, w)
        oy, ox = (h - side) // 2, (w - side) // 2
        crop = img.pixels[oy : oy + side, ox : ox + side]
    out = _bilinear_resize(crop, out_size, out_size)
    return DrawingImage(out, img.patent_id, img.view_index)


def ablation_random_rotation(
    img: DrawingImage,
    max_deg: float,
    rng: np.random.Generator,
    policy: Optional[AugmentPolicy] = None,
) -> DrawingImage:
    """Rotate by a uniform angle in [-max_deg, max_deg] about the center."""
    _require_flag(
        policy,
        policy is not None and policy.ablation_random_rotation_deg is not None,
        "random rotation",
    )
    angle = float(rng.uniform(-max_deg, max_deg))
    return rotate(img, angle, policy.pad_value)


# ---------------------------------------------------------------------------
# composition


def center_fit(img: DrawingImage, size: int, pad_value: int = BACKGROUND) -> DrawingImage:
    """Center-crop dims larger than size; pad dims smaller. Never resizes."""
    pixels = img.pixels
    h, w = pixels.shape
    if h > size:
        top = (h - size) // 2
        pixels = pixels[top : top + size, :]
    if w > size:
        left = (w - size) // 2
        pixels = pixels[:, left : left + size]
    h, w = pixels.shape
    if h < size or w < size:
        out = np.full((size, size), pad_value, dtype=np.uint8)
        top, left = (size - h) // 2, (size - w) // 2
        out[top : top + h, left : left + w] = pixels
        pixels = out
    return DrawingImage(pixels.copy(), img.patent_id, img.view_index)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map bytes to floats with ink high: x -> (255 - x) / 255."""
    return ((255.0 - pixels.astype(np.float32)) / 255.0).astype(np.float32)


def apply_policy(
    img: DrawingImage,
    policy: AugmentPolicy,
    rng: Optional[np.random.Generator] = None,
    train: bool = True,
) -> Tensor:
    """Run the full transform chain and return a (1, size, size) input tensor."""
    if train:
        if rng is None:
            raise ValueError("train-mode augmentation needs an rng")
        out = horizontal_flip(img, policy.hflip_prob, rng)
        out = random_translate_pad(out, policy.translate_max, policy.pad_value, rng)
        if policy.ablation_random_rotation_deg is not None:
            out = ablation_random_rotation(
                out, policy.ablation_random_rotation_deg, rng, policy
            )
        if policy.ablation_random_resized_crop:
            out = ablation_random_resized_crop(
                out, policy.crop_size, policy.ablation_rrc_scale, rng, policy
            )
        else:
            out = random_crop_no_resize(out, policy.crop_size, rng)
    else:
        out = center_fit(img, policy.eval_size, policy.pad_value)
    return Tensor(normalize(out.pixels)[None, :, :])
