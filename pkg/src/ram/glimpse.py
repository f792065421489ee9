"""Multi-resolution retina: square patches of doubling width, each pooled to
``patch_width x patch_width`` and concatenated finest first.

Locations live in ``[-1, 1]^2`` with ``(-1, -1)`` the top-left pixel and
``(0, 0)`` the image center. Pixels outside the image read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigError, DimensionError


@dataclass(frozen=True)
class RetinaConfig:
    patch_width: int = 8
    num_scales: int = 1

    def __post_init__(self):
        if self.patch_width < 1 or self.num_scales < 1:
            raise ConfigError(f"invalid retina {self}")

    def scale_width(self, s):
        return self.patch_width << s

    @property
    def max_width(self):
        return self.scale_width(self.num_scales - 1)

    @property
    def size(self):
        return self.num_scales * self.patch_width ** 2


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def loc_to_pixel(l, width, height):
    """Map ``l = (x, y)`` (or an ``(B, 2)`` array) to integer ``(px, py)``."""
    l = np.clip(np.asarray(l, dtype=np.float64), -1.0, 1.0)
    px = round_half_away((l[..., 0] + 1.0) / 2.0 * (width - 1))
    py = round_half_away((l[..., 1] + 1.0) / 2.0 * (height - 1))
    return np.stack([px, py], axis=-1)


def extract_patch(image, center, width):
    """``width x width`` crop whose index ``width // 2`` lands on ``center = (px, py)``."""
    if width < 1:
        raise ConfigError(f"patch width must be >= 1, got {width}")
    H, W = image.shape
    px, py = int(center[0]), int(center[1])
    top, left = py - width // 2, px - width // 2
    out = np.zeros((width, width), dtype=image.dtype)
    r0, r1 = max(top, 0), min(top + width, H)
    c0, c1 = max(left, 0), min(left + width, W)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return out


def downsample_block_mean(patch, factor):
    """Mean over non-overlapping ``factor x factor`` blocks of the last two axes.

    Block elements are summed in row-major order and then divided, so the
    result is reproducible element for element.
    """
    n = patch.shape[-1]
    if patch.shape[-2] != n or n % factor:
        raise DimensionError(f"patch {patch.shape[-2:]} not divisible by factor {factor}")
    if factor == 1:
        return patch.copy()
    acc = np.zeros(patch.shape[:-2] + (n // factor, n // factor), dtype=patch.dtype)
    for di in range(factor):
        for dj in range(factor):
            acc += patch[..., di::factor, dj::factor]
    return acc / (factor * factor)


class BatchSensor:
    """Extracts glimpses for a batch of same-sized images.

    The images are zero-padded once so every later crop is a plain gather.
    """

    def __init__(self, images, cfg: RetinaConfig):
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        self.cfg = cfg
        self.B, self.H, self.W = images.shape
        self.pad = cfg.max_width
        p = self.pad
        self.padded = np.zeros((self.B, self.H + 2 * p, self.W + 2 * p), dtype=images.dtype)
        self.padded[:, p:p + self.H, p:p + self.W] = images

    def __call__(self, locs):
        locs = np.asarray(locs).reshape(self.B, 2)
        centers = loc_to_pixel(locs, self.W, self.H)
        rows_b = np.arange(self.B)[:, None, None]
        out = []
        for s in range(self.cfg.num_scales):
            w = self.cfg.scale_width(s)
            offs = np.arange(w) - w // 2 + self.pad
            rr = (centers[:, 1, None] + offs)[:, :, None]
            cc = (centers[:, 0, None] + offs)[:, None, :]
            patch = self.padded[rows_b, rr, cc]
            out.append(downsample_block_mean(patch, 1 << s).reshape(self.B, -1))
        return np.concatenate(out, axis=1)


def build_glimpse(image, l, cfg: RetinaConfig):
    """Glimpse vector of length ``num_scales * patch_width**2`` for one image."""
    return BatchSensor(image, cfg)(np.asarray(l, dtype=np.float64)[None])[0]


def build_glimpses(images, locs, cfg: RetinaConfig):
    return BatchSensor(images, cfg)(locs)
