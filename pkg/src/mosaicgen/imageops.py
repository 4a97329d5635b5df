"""Core image primitives: planar float images, blur, pyramid, resize, tiling.

Images are numpy arrays of shape (channels, height, width), float64,
nominally in [0, 1]. Values may leave that range mid-pipeline; 8-bit
quantization happens only at file I/O.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Pyramid smoothing: conventional anti-alias sigma, recorded in metric reports.
PYRAMID_SIGMA = 1.0


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (C, H, W) convention and finiteness; return as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (channels, height, width), got {arr.shape}")
    if arr.shape[0] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class BlockGrid:
    """A 2^L x 2^L partition of an image into equal blocks, row-major."""

    rows: int
    cols: int
    block_h: int
    block_w: int
    blocks: list[np.ndarray]

    def __post_init__(self):
        if len(self.blocks) != self.rows * self.cols:
            raise ValueError(
                f"grid expects {self.rows * self.cols} blocks, got {len(self.blocks)}"
            )
        for k, b in enumerate(self.blocks):
            if b.shape[1:] != (self.block_h, self.block_w):
                raise ValueError(
                    f"block {k} has shape {b.shape[1:]}, expected "
                    f"({self.block_h}, {self.block_w})"
                )


def partition_blocks(img: np.ndarray, level: int) -> BlockGrid:
    """Split an image into 2^level x 2^level non-overlapping blocks.

    Block k sits at grid position (k // 2^level, k % 2^level). Both image
    dimensions must be divisible by 2^level.
    """
    img = validate_image(img)
    if level < 0:
        raise ValueError("mosaic level must be >= 0")
    n = 2**level
    _, h, w = img.shape
    if h % n != 0:
        raise ValueError(f"height {h} not divisible by {n} (level {level})")
    if w % n != 0:
        raise ValueError(f"width {w} not divisible by {n} (level {level})")
    bh, bw = h // n, w // n
    blocks = [
        img[:, r * bh : (r + 1) * bh, c * bw : (c + 1) * bw]
        for r in range(n)
        for c in range(n)
    ]
    return BlockGrid(rows=n, cols=n, block_h=bh, block_w=bw, blocks=blocks)


def compose_grid(grid: BlockGrid) -> np.ndarray:
    """Reassemble a BlockGrid into one image; exact inverse of partition_blocks."""
    channels = grid.blocks[0].shape[0]
    out = np.empty(
        (channels, grid.rows * grid.block_h, grid.cols * grid.block_w), dtype=np.float64
    )
    for k, b in enumerate(grid.blocks):
        if b.shape != (channels, grid.block_h, grid.block_w):
            raise ValueError(f"block {k} shape {b.shape} does not match the grid")
        r, c = divmod(k, grid.cols)
        out[
            :,
            r * grid.block_h : (r + 1) * grid.block_h,
            c * grid.block_w : (c + 1) * grid.block_w,
        ] = b
    return out


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3*sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur per channel with edge-replicated boundaries.

    sigma = 0 returns the input unchanged. The kernel is normalized, so
    constant images are fixed points.
    """
    img = validate_image(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(img, k, axis=1, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=2, mode="nearest")
    return out


def gaussian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Blur-and-halve the image `levels` times; returns levels 1..levels.

    Each level blurs the previous one with sigma PYRAMID_SIGMA and keeps
    every second pixel starting at index 0.
    """
    img = validate_image(img)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    _, h, w = img.shape
    n = 2**levels
    if h % n != 0 or w % n != 0:
        raise ValueError(
            f"image {h}x{w} not divisible by 2^{levels}; pyramid would underflow"
        )
    out = []
    cur = img
    for _ in range(levels):
        cur = gaussian_blur(cur, PYRAMID_SIGMA)[:, ::2, ::2]
        out.append(cur)
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment.

    Source coordinates are (i + 0.5) * in / out - 0.5, clamped to the image,
    so a same-size resize reproduces the input exactly.
    """
    img = validate_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    _, h, w = img.shape

    def axis_weights(n_in: int, n_out: int):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h, out_h)
    xlo, xhi, fx = axis_weights(w, out_w)
    # Separable: interpolate rows, then columns.
    rows = img[:, ylo, :] * (1.0 - fy)[None, :, None] + img[:, yhi, :] * fy[None, :, None]
    out = rows[:, :, xlo] * (1.0 - fx)[None, None, :] + rows[:, :, xhi] * fx[None, None, :]
    return out


def rgb_to_luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance: Y = 0.299 R + 0.587 G + 0.114 B, shape (1, H, W)."""
    img = validate_image(img)
    if img.shape[0] != 3:
        raise ValueError(f"luma conversion needs 3 channels, got {img.shape[0]}")
    r, g, b = LUMA_WEIGHTS
    y = r * img[0] + g * img[1] + b * img[2]
    return y[None, :, :]


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB or grayscale PNG as a (C, H, W) float image in [0, 1].

    An alpha channel is stripped with a warning. 16-bit and other exotic
    modes are rejected.
    """
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("RGBA", "LA"):
            warnings.warn(f"{path}: alpha channel stripped on load", stacklevel=2)
            im = im.convert(mode[:-1])
            mode = im.mode
        if mode == "P":
            im = im.convert("RGB")
            mode = "RGB"
        if mode not in ("RGB", "L"):
            raise ValueError(f"{path}: unsupported image mode {mode!r} (need 8-bit RGB or grayscale)")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Clamp to [0, 1], quantize round-to-nearest to 8 bits, write a PNG."""
    img = validate_image(img)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if q.shape[0] == 1:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")
