"""Coherent multi-scale Gaussian noise for tile initialization.

A coarse standard-normal field is expanded so that every s x s fine block
sums exactly to its coarse value; the zero-sum residual is then rescaled to
restore unit per-pixel variance. All tiles of a mosaic share one coarse
field, so adjacent tiles see a continuous noise structure instead of
independent draws.

Two residual scalings are provided:

  "literal"    -- residual (Z - mean(Z)) / sqrt(N); conditional per-pixel
                  variance (N-1)/N^2 before normalization.
  "consistent" -- residual (Z - mean(Z)); conditional per-pixel variance
                  (N-1)/N, which the normalization step maps exactly to 1.

"consistent" is the default; "literal" is kept for fidelity testing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .imageops import partition_blocks

MODES = ("literal", "consistent")


@dataclass(frozen=True)
class CoarseLatent:
    """Coarse i.i.d. standard-normal field at reference-block granularity."""

    values: np.ndarray  # (C, H, W)
    seed: int | None = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("coarse latent must have shape (channels, H, W)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coarse latent contains non-finite values")


@dataclass(frozen=True)
class NoiseField:
    """Fine-scale noise whose s x s block sums reproduce a coarse field."""

    values: np.ndarray  # (C, s*H, s*W)
    block_size: int
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")


def sample_coarse(shape: tuple[int, int, int], seed: int) -> CoarseLatent:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    return CoarseLatent(values=rng.standard_normal(shape), seed=seed)


def _blocks_view(fine: np.ndarray, s: int) -> np.ndarray:
    """Reshape (C, s*H, s*W) to (C, H, W, s, s) without copying."""
    c, hs, ws = fine.shape
    return fine.reshape(c, hs // s, s, ws // s, s).swapaxes(2, 3)


def _flatten_blocks(blocks: np.ndarray) -> np.ndarray:
    """Inverse of _blocks_view: (C, H, W, s, s) -> (C, s*H, s*W)."""
    c, h, w, s, _ = blocks.shape
    return blocks.swapaxes(2, 3).reshape(c, h * s, w * s)


def subsample_noise(
    coarse: CoarseLatent,
    s: int,
    rng: np.random.Generator,
    mode: str = "consistent",
) -> NoiseField:
    """Expand each coarse value X into an s x s block summing exactly to X.

    Per block: W = (X/N) u + r(Z) with Z i.i.d. standard normal, N = s*s,
    and r the zero-mean residual in the selected mode. s = 1 returns the
    coarse field unchanged.
    """
    if s < 1:
        raise ValueError("scale factor must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    x = coarse.values
    if s == 1:
        return NoiseField(values=x.copy(), block_size=1, mode=mode)
    n = s * s
    c, h, w = x.shape
    z = rng.standard_normal((c, h, w, s, s))
    resid = z - z.mean(axis=(3, 4), keepdims=True)
    if mode == "literal":
        resid = resid / np.sqrt(n)
    blocks = x[:, :, :, None, None] / n + resid
    return NoiseField(values=_flatten_blocks(blocks), block_size=s, mode=mode)


def normalize_variance(field: NoiseField, coarse: CoarseLatent) -> NoiseField:
    """Rescale the zero-sum residual by 1/sqrt(1 - 1/N), keeping block sums.

    In "consistent" mode this restores unit conditional per-pixel variance.
    N = 1 has no residual to rescale; the field is returned unchanged.
    """
    s = field.block_size
    if s == 1:
        warnings.warn("block size 1 has no zero-sum residual; returning field unchanged",
                      stacklevel=2)
        return field
    n = s * s
    blocks = _blocks_view(field.values, s)
    mean = coarse.values[:, :, :, None, None] / n
    factor = 1.0 / np.sqrt(1.0 - 1.0 / n)
    out = mean + factor * (blocks - mean)
    return NoiseField(values=_flatten_blocks(out), block_size=s, mode=field.mode)


def tile_rng(master_seed: int, tile_index: int) -> np.random.Generator:
    """Independent per-tile stream; stable hash of (master_seed, tile_index)."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(1, tile_index))
    )


def init_tile_latents(
    ref_shape: tuple[int, int],
    level: int,
    s: int,
    master_seed: int,
    channels: int = 3,
    mode: str = "consistent",
) -> list[NoiseField]:
    """Per-tile diffusion-ready latents expanded from one shared coarse field.

    Samples a single coarse latent at the reference resolution, partitions it
    into 4^level blocks, and expands + normalizes each block with its own
    derived RNG stream, so generation order and parallelism cannot change the
    result.
    """
    h, w = ref_shape
    coarse = sample_coarse((channels, h, w), master_seed)
    grid = partition_blocks(coarse.values, level)
    fields = []
    for k, block in enumerate(grid.blocks):
        block_latent = CoarseLatent(values=np.ascontiguousarray(block), seed=master_seed)
        field = subsample_noise(block_latent, s, tile_rng(master_seed, k), mode)
        if s > 1:
            field = normalize_variance(field, block_latent)
        fields.append(field)
    return fields
