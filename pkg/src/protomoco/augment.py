"""Two-view stochastic augmentation.

Images are float arrays of shape C×H×W with values in [0, 1]. Every random
choice comes from an explicit ``np.random.Generator``; the order in which
draws are consumed is part of the contract and is listed on each function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from protomoco import rng as rngmod


class DegenerateCropError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    crop_area_range: tuple[float, float] = (0.5, 1.0)
    flip_probability: float = 0.5
    jitter_strength: float = 0.5
    # (strategy 1: crop -> resize -> flip, strategy 2: crop -> color -> resize)
    method_weights: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        lo, hi = self.crop_area_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_area_range must satisfy 0 < min <= max <= 1, got {self.crop_area_range}")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        if self.jitter_strength < 0:
            raise ValueError(f"jitter_strength must be non-negative, got {self.jitter_strength}")
        w = self.method_weights
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1) > 1e-9:
            raise ValueError(f"method_weights must be two non-negative reals summing to 1, got {w}")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(crop_area_range=(1.0, 1.0), flip_probability=0.0, jitter_strength=0.0)


@dataclass
class ViewPair:
    view_i: np.ndarray
    view_j: np.ndarray
    source_id: int | str


def crop_extent(height: int, width: int, area_fraction: float) -> tuple[int, int]:
    """Crop height and width covering ``area_fraction`` of the image at its aspect ratio."""
    if not 0 < area_fraction <= 1:
        raise ValueError(f"area_fraction must lie in (0, 1], got {area_fraction}")
    side = math.sqrt(area_fraction)
    ch = min(height, int(math.floor(height * side + 0.5)))
    cw = min(width, int(math.floor(width * side + 0.5)))
    if ch < 1 or cw < 1:
        raise DegenerateCropError(
            f"area fraction {area_fraction} of a {height}×{width} image is smaller than one pixel")
    return ch, cw


def random_crop(img: np.ndarray, area_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned crop at a uniformly random position.

    Draws: ``top = rng.integers(0, H - ch + 1)`` then ``left = rng.integers(0, W - cw + 1)``.
    """
    _, h, w = img.shape
    ch, cw = crop_extent(h, w, area_fraction)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return img[:, top:top + ch, left:left + cw].copy()


def _sample_grid(size_in: int, size_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if size_out == 1 or size_in == 1:
        pos = np.zeros(size_out)
    else:
        pos = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation to ``out_h``×``out_w``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}×{out_w}")
    _, h, w = img.shape
    y0, y1, fy = _sample_grid(h, out_h)
    x0, x1, fx = _sample_grid(w, out_w)
    fy = fy[:, None].astype(img.dtype)
    fx = fx[None, :].astype(img.dtype)
    top = img[:, y0][:, :, x0] + fx * (img[:, y0][:, :, x1] - img[:, y0][:, :, x0])
    bottom = img[:, y1][:, :, x0] + fx * (img[:, y1][:, :, x1] - img[:, y1][:, :, x0])
    return np.clip(top + fy * (bottom - top), 0, 1)


def horizontal_flip(img: np.ndarray, rng: np.random.Generator, p: float) -> np.ndarray:
    """Mirror columns when ``rng.random() < p`` (always one draw)."""
    if not 0 <= p <= 1:
        raise ValueError(f"flip probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return img[:, :, ::-1].copy()
    return img.copy()


def apply_color(img: np.ndarray, brightness: float, contrast: float,
                gains: np.ndarray | None = None) -> np.ndarray:
    """Brightness scale, contrast about the mean, optional per-channel gain; clamped after each."""
    out = np.clip(img * brightness, 0, 1)
    center = out.mean()
    out = np.clip((out - center) * contrast + center, 0, 1)
    if gains is not None:
        out = np.clip(out * np.asarray(gains, dtype=img.dtype)[:, None, None], 0, 1)
    return out.astype(img.dtype, copy=False)


def color_distort(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast and (RGB only) channel gains.

    With ``s = strength`` the draws are, in order: brightness
    ``U(1-0.8s, 1+0.8s)``, contrast ``U(1-0.8s, 1+0.8s)``, then for three
    channels one ``U(1-0.2s, 1+0.2s)`` vector of size 3. Lower bounds are
    floored at 0. ``strength == 0`` returns a copy without drawing.
    """
    if strength < 0:
        raise ValueError(f"strength must be non-negative, got {strength}")
    if strength == 0:
        return img.copy()
    spread = 0.8 * strength
    brightness = rng.uniform(max(0.0, 1 - spread), 1 + spread)
    contrast = rng.uniform(max(0.0, 1 - spread), 1 + spread)
    gains = None
    if img.shape[0] == 3:
        gains = rng.uniform(max(0.0, 1 - 0.2 * strength), 1 + 0.2 * strength, size=3)
    return apply_color(img, brightness, contrast, gains)


def augment_view(img: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One stochastic view of ``img`` and the strategy (1 or 2) that produced it.

    Draw order: strategy ``rng.random() < method_weights[0]`` selects 1,
    then ``area = rng.uniform(*crop_area_range)``, then the crop, then
    strategy 1 resizes and flips while strategy 2 color-distorts and resizes.
    """
    _, h, w = img.shape
    strategy = 1 if rng.random() < spec.method_weights[0] else 2
    area = rng.uniform(*spec.crop_area_range)
    patch = random_crop(img, area, rng)
    if strategy == 1:
        view = horizontal_flip(bilinear_resize(patch, h, w), rng, spec.flip_probability)
    else:
        view = bilinear_resize(color_distort(patch, spec.jitter_strength, rng), h, w)
    return view, strategy


def make_view_pair(img: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator,
                   source_id: int | str = 0) -> ViewPair:
    """Draw t then t' independently and return (t(x), t'(x))."""
    view_i, _ = augment_view(img, spec, rng)
    view_j, _ = augment_view(img, spec, rng)
    return ViewPair(view_i, view_j, source_id)


def augment_batch(images: np.ndarray, ids, spec: AugmentationSpec, seed: int,
                  epoch: int | str) -> tuple[np.ndarray, np.ndarray]:
    """View pairs for a batch; sample ``i`` draws from stream (seed, "augment", epoch, ids[i])."""
    first, second = [], []
    for img, sid in zip(images, ids):
        pair = make_view_pair(img, spec, rngmod.stream(seed, "augment", epoch, int(sid)), sid)
        first.append(pair.view_i)
        second.append(pair.view_j)
    return np.stack(first), np.stack(second)
