"""Matching-based photomosaic baseline: L2 tile search, tone and histogram transfer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .guidance import adain_align, compute_stats
from .imageops import (
    BlockGrid,
    compose_grid,
    partition_blocks,
    resize_bilinear,
    validate_image,
)

ADJUSTMENTS = ("none", "tone", "histogram")

HIST_BINS = 256


@dataclass
class TilePool:
    """Equal-sized candidate tiles with per-tile usage accounting."""

    tiles: np.ndarray  # (M, C, H, W)
    max_reuse: int | None = None
    usage_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tiles = np.asarray(self.tiles, dtype=np.float64)
        if self.tiles.ndim != 4 or self.tiles.shape[0] == 0:
            raise ValueError("pool needs a nonempty (M, C, H, W) tile stack")
        self.usage_counts = np.zeros(self.tiles.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return self.tiles.shape[0]

    @property
    def tile_shape(self) -> tuple[int, int, int]:
        return self.tiles.shape[1:]


def load_tile_pool(directory, tile_h: int, tile_w: int,
                   max_reuse: int | None = None) -> TilePool:
    """Load PNGs recursively; center-crop to the target aspect, then resize."""
    root = Path(directory)
    paths = sorted(root.rglob("*.png"))
    if not paths:
        raise ValueError(f"no PNG files found under {root}")
    tiles = []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            w, h = im.size
            scale = min(h / tile_h, w / tile_w)
            crop_h, crop_w = int(tile_h * scale), int(tile_w * scale)
            left = (w - crop_w) // 2
            top = (h - crop_h) // 2
            im = im.crop((left, top, left + crop_w, top + crop_h))
            arr = np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0
        tiles.append(resize_bilinear(arr, tile_h, tile_w))
    return TilePool(tiles=np.stack(tiles), max_reuse=max_reuse)


def match_tile(block: np.ndarray, pool: TilePool) -> int:
    """Index of the eligible tile with the smallest sum of squared differences.

    Ties break toward the lowest index; the winner's usage count is
    incremented, which matters only under a finite reuse cap.
    """
    block = validate_image(block)
    if block.shape != pool.tile_shape:
        raise ValueError(f"block shape {block.shape} != pool tile shape {pool.tile_shape}")
    d2 = ((pool.tiles - block[None]) ** 2).sum(axis=(1, 2, 3))
    if pool.max_reuse is not None:
        d2 = np.where(pool.usage_counts < pool.max_reuse, d2, np.inf)
        if not np.isfinite(d2).any():
            raise ValueError("no eligible tile remaining (reuse cap exhausted)")
    idx = int(np.argmin(d2))  # argmin returns the first minimum
    pool.usage_counts[idx] += 1
    return idx


def tone_map(tile: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Mean/std transfer of the block statistics onto the tile, clamped to [0, 1]."""
    if tile.shape != block.shape:
        raise ValueError("tile and block shapes disagree")
    out = adain_align(tile, compute_stats(block))
    return np.clip(out, 0.0, 1.0)


def histogram_match(tile: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Classic per-channel CDF matching on 256 bins.

    Each source value maps through the source CDF and then the inverse
    target CDF (lowest bin whose CDF reaches the source CDF). The source
    CDF is evaluated at the bin midpoint (half the bin's own mass), so a
    constant tile lands on the target's median bin instead of its top
    occupied bin.
    """
    tile = validate_image(tile)
    block = validate_image(block)
    if tile.shape[0] != block.shape[0]:
        raise ValueError("channel counts disagree")
    out = np.empty_like(tile)
    for c in range(tile.shape[0]):
        src = np.floor(np.clip(tile[c], 0.0, 1.0) * (HIST_BINS - 1) + 0.5).astype(np.intp)
        tgt = np.floor(np.clip(block[c], 0.0, 1.0) * (HIST_BINS - 1) + 0.5).astype(np.intp)
        src_mass = np.bincount(src.ravel(), minlength=HIST_BINS) / src.size
        tgt_cdf = np.cumsum(np.bincount(tgt.ravel(), minlength=HIST_BINS)) / tgt.size
        src_mid = np.cumsum(src_mass) - 0.5 * src_mass
        # lowest target bin whose CDF >= the source's midpoint CDF
        mapping = np.minimum(np.searchsorted(tgt_cdf, src_mid, side="left"), HIST_BINS - 1)
        out[c] = mapping[src] / (HIST_BINS - 1)
    return out


def classic_mosaic(
    ref: np.ndarray,
    pool: TilePool,
    level: int,
    adjust: str = "none",
    match_log: list[tuple[int, float]] | None = None,
) -> np.ndarray:
    """Conventional photomosaic: partition, match, adjust, recompose.

    Blocks are visited row-major (the order matters under a reuse cap) and
    resized to the pool's tile shape when the two differ, so the output is
    tile-resolution times the grid. When given, match_log collects one
    (tile index, squared distance) pair per block.
    """
    if adjust not in ADJUSTMENTS:
        raise ValueError(f"unknown adjustment {adjust!r} (choose from {ADJUSTMENTS})")
    grid = partition_blocks(ref, level)
    _, th, tw = pool.tile_shape
    out_blocks = []
    for block in grid.blocks:
        if (grid.block_h, grid.block_w) != (th, tw):
            block = resize_bilinear(block, th, tw)
        idx = match_tile(block, pool)
        if match_log is not None:
            match_log.append((idx, float(((pool.tiles[idx] - block) ** 2).sum())))
        tile = pool.tiles[idx].copy()
        if adjust == "tone":
            tile = tone_map(tile, block)
        elif adjust == "histogram":
            tile = histogram_match(tile, block)
        out_blocks.append(tile)
    return compose_grid(
        BlockGrid(rows=grid.rows, cols=grid.cols, block_h=th, block_w=tw, blocks=out_blocks)
    )
