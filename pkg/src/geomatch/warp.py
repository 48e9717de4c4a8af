"""Dense image resampling by inverse mapping with bilinear interpolation.

Normalized coordinates map to pixel space align-corners style:
x_pix = (x + 1) / 2 * (width - 1), so (-1, -1) is the exact top-left pixel
center and (1, 1) the bottom-right.  Samples outside [-1, 1]^2 read as zero.
The sampler core is torch so the warp is differentiable with respect to both
coordinates and image values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import DataError
from .geometry import TransformParams, as_points, map_points_torch, preimage_points


@dataclass(frozen=True)
class Image:
    """Float image in [0, 1], row-major channel-last, 1 or 3 channels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w, 1|3); got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def load_image(path) -> Image:
    """Read a PNG (8-bit), scaling values to [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"image file not found: {p}")
    with PILImage.open(p) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr)


def save_image(img: Image, path) -> None:
    """Write an 8-bit PNG (values rounded from [0, 1])."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(p)
    else:
        PILImage.fromarray(arr, mode="RGB").save(p)


def sample_bilinear_torch(img: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (N, 2) normalized coords in an (h, w, c) image.

    Differentiable in both arguments; out-of-range neighbours contribute
    zero (zero-padding convention).
    """
    h, w, _ = img.shape
    x = (coords[:, 0] + 1.0) * 0.5 * (w - 1)
    y = (coords[:, 1] + 1.0) * 0.5 * (h - 1)

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0

    flat = img.reshape(h * w, -1)
    total = torch.zeros(coords.shape[0], img.shape[2], dtype=img.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            weight = weight * inside.to(img.dtype)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
            total = total + weight[:, None] * flat[idx]
    return total


def sample_bilinear(img: Image, coords) -> np.ndarray:
    """Bilinear samples as an (N, channels) array."""
    arr = as_points(coords)
    out = sample_bilinear_torch(torch.from_numpy(img.data), torch.from_numpy(arr))
    return out.numpy()


def output_grid(out_h: int, out_w: int) -> np.ndarray:
    """Normalized coordinates of every output pixel center, row-major."""
    xs = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def warp_image(img: Image, t: TransformParams, out_h: int, out_w: int) -> Image:
    """Resample ``img`` with ``t`` as the output -> input coordinate map."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    pts = output_grid(out_h, out_w)
    coords = map_points_torch(
        t.kind, torch.from_numpy(t.values), torch.from_numpy(pts), clamp_denominator=True
    )
    values = sample_bilinear_torch(torch.from_numpy(img.data), coords)
    return Image(values.numpy().reshape(out_h, out_w, img.channels))


def render_alignment(
    src: Image, stages: Sequence[TransformParams], out_h: int, out_w: int
) -> Image:
    """Warp ``src`` so features land where the composed forward map sends them.

    ``stages`` lists transforms in application order (stage1, stage2, ...);
    each output pixel samples the source at the composed preimage.
    """
    coords = output_grid(out_h, out_w)
    for t in reversed(stages):
        coords = preimage_points(t, coords)
    values = sample_bilinear(src, coords)
    return Image(values.reshape(out_h, out_w, src.channels))
