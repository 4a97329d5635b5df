"""End-to-end generative photomosaic synthesis.

Per tile: start from a coherent noise latent, then at every denoising step
(1) predict with classifier-free guidance, (2) estimate the clean image,
(3) align its color statistics to the reference block, (4) descend the
low-frequency loss on the latent, and (5) take the deterministic DDIM step.
Tiles are independent given their derived RNG streams, so the mosaic is
bit-reproducible for any worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import (
    PARAMETERIZATIONS,
    ConditionTag,
    ExemplarDenoiser,
    ExemplarPool,
    NoiseSchedule,
    cfg_predict,
    ddim_step,
    derive_eps,
    inference_timesteps,
    make_schedule,
    predict_x0,
    to_parameterization,
)
from .guidance import (
    OBJECTIVES,
    ChannelStats,
    GuidanceState,
    adain_align,
    compute_stats,
    guidance_gradient,
    guidance_update,
    lowfreq_loss,
)
from .imageops import BlockGrid, compose_grid, partition_blocks, resize_bilinear, validate_image
from .noise import MODES, NoiseField, init_tile_latents


@dataclass
class MosaicConfig:
    """Every pipeline hyperparameter; defaults follow the reference settings."""

    level: int = 3              # grid is 2^level x 2^level
    scale: int = 4              # tile pixels per reference-block pixel
    steps: int = 50             # inference steps
    cfg_scale: float = 7.5
    w0: float = 5000.0          # initial guidance weight
    gamma: float = 0.95         # per-step weight decay
    blur_sigma: float | None = None  # None: tile_height / 8
    objective: str = "rgb-mse"
    adain_enabled: bool = True
    adain_before_guidance: bool = True
    redenoise_after_update: bool = False
    noise_mode: str = "consistent"
    parameterization: str = "v"
    master_seed: int = 0
    labels: str | list[str | None] | None = None
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    threads: int = 1

    def validate(self) -> None:
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 1 <= self.steps <= self.schedule_steps:
            raise ValueError("steps must lie in [1, schedule_steps]")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.w0 < 0:
            raise ValueError("w0 must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.blur_sigma is not None and self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.noise_mode not in MODES:
            raise ValueError(f"noise_mode must be one of {MODES}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_steps, self.beta_start, self.beta_end)

    def effective_blur_sigma(self, tile_h: int) -> float:
        return self.blur_sigma if self.blur_sigma is not None else tile_h / 8.0


@dataclass
class TileLog:
    """Per-step loss and guidance-weight trajectory for one tile."""

    losses: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    final_loss: float = float("nan")


@dataclass
class MosaicResult:
    mosaic: np.ndarray
    tiles: list[np.ndarray]
    logs: list[TileLog]
    config: MosaicConfig
    wall_time: float


def resolve_labels(labels, n_tiles: int) -> list[str | None]:
    """Broadcast a single label or validate a per-tile sequence."""
    if labels is None:
        return [None] * n_tiles
    if isinstance(labels, str):
        return [labels] * n_tiles
    labels = list(labels)
    if len(labels) != n_tiles:
        raise ValueError(f"need {n_tiles} per-tile labels, got {len(labels)}")
    return labels


def generate_tile(
    block: np.ndarray,
    init_latent: NoiseField,
    denoiser: ExemplarDenoiser,
    cond: ConditionTag,
    config: MosaicConfig,
    target_stats: ChannelStats | None = None,
    decode=None,
) -> tuple[np.ndarray, TileLog]:
    """Run the guided denoising loop for one tile.

    `block` must already be upsampled to tile resolution; `target_stats` are
    the color statistics of the native-resolution reference block (computed
    from `block` when omitted). `decode` maps the clean-image estimate to
    pixel space and defaults to the identity (pixel-space diffusion).
    """
    block = validate_image(block, "block")
    if decode is None:
        decode = lambda x: x
    if target_stats is None:
        target_stats = compute_stats(block)
    schedule = denoiser.schedule
    param = denoiser.parameterization
    ts = inference_timesteps(schedule.T, config.steps)
    sigma_eff = config.effective_blur_sigma(block.shape[1])
    state = GuidanceState(
        w=config.w0, gamma=config.gamma, blur_sigma=sigma_eff, objective=config.objective
    )
    z = init_latent.values
    if z.shape != block.shape:
        raise ValueError(f"latent shape {z.shape} != tile shape {block.shape}")
    log = TileLog()

    for step_index, (t, t_prev) in enumerate(zip(ts[:-1], ts[1:])):
        pred = cfg_predict(denoiser, z, t, cond)
        x0 = decode(predict_x0(z, pred, t, schedule, param))
        eps = derive_eps(z, x0, t, schedule)

        def apply_adain():
            nonlocal x0, eps
            x0 = adain_align(x0, target_stats)
            eps = derive_eps(z, x0, t, schedule)

        def apply_guidance():
            nonlocal x0, eps, z, state
            log.losses.append(lowfreq_loss(x0, block, sigma_eff, config.objective))
            log.weights.append(state.w)
            if state.w == 0:
                state = replace(state, w=state.gamma * state.w)
                return
            grad = guidance_gradient(
                z, (x0, eps), block, t, schedule, state,
                jacobian_mode="stop-grad", parameterization=param,
            )
            z_new, state = guidance_update(z, grad, state)
            if config.redenoise_after_update:
                pred2 = cfg_predict(denoiser, z_new, t, cond)
                x0 = decode(predict_x0(z_new, pred2, t, schedule, param))
            else:
                # keep the prediction implied by the current (aligned) estimate
                # fixed and move the estimate with the latent
                frozen = to_parameterization(z, x0, t, schedule, param)
                x0 = predict_x0(z_new, frozen, t, schedule, param)
            eps = derive_eps(z_new, x0, t, schedule)
            z = z_new

        if config.adain_enabled and config.adain_before_guidance:
            apply_adain()
            apply_guidance()
        elif config.adain_enabled:
            apply_guidance()
            apply_adain()
        else:
            apply_guidance()

        z = ddim_step(z, x0, eps, t, t_prev, schedule)
        if not np.all(np.isfinite(z)):
            raise RuntimeError(
                f"NaN in tile latent after step {step_index} (t={t} -> {t_prev})"
            )

    tile = np.clip(z, 0.0, 1.0)
    log.final_loss = lowfreq_loss(tile, block, sigma_eff, config.objective)
    return tile, log


def generate_mosaic(
    ref: np.ndarray,
    pool: ExemplarPool,
    config: MosaicConfig,
    decode=None,
) -> MosaicResult:
    """Partition the reference, expand coherent noise, and synthesize all tiles."""
    start = time.perf_counter()
    config.validate()
    ref = validate_image(ref, "reference")
    grid = partition_blocks(ref, config.level)
    n_tiles = grid.rows * grid.cols
    tile_h = grid.block_h * config.scale
    tile_w = grid.block_w * config.scale
    channels = ref.shape[0]
    if pool.image_shape != (channels, tile_h, tile_w):
        raise ValueError(
            f"pool image shape {pool.image_shape} does not match tile shape "
            f"({channels}, {tile_h}, {tile_w})"
        )
    labels = resolve_labels(config.labels, n_tiles)
    for lab in set(labels):
        pool.select(lab)  # raises on unknown labels

    schedule = config.make_schedule()
    denoiser = ExemplarDenoiser(pool, schedule, config.parameterization)
    latents = init_tile_latents(
        (ref.shape[1], ref.shape[2]),
        config.level,
        config.scale,
        config.master_seed,
        channels=channels,
        mode=config.noise_mode,
    )
    blocks_up = [resize_bilinear(b, tile_h, tile_w) for b in grid.blocks]
    stats = [compute_stats(b) for b in grid.blocks]

    def run(k: int) -> tuple[np.ndarray, TileLog]:
        cond = ConditionTag(label=labels[k], cfg_scale=config.cfg_scale)
        try:
            return generate_tile(
                blocks_up[k], latents[k], denoiser, cond, config,
                target_stats=stats[k], decode=decode,
            )
        except Exception as exc:
            raise RuntimeError(f"tile {k} failed: {exc}") from exc

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool_exec:
            results = list(pool_exec.map(run, range(n_tiles)))
    else:
        results = [run(k) for k in range(n_tiles)]

    tiles = [r[0] for r in results]
    logs = [r[1] for r in results]
    mosaic = compose_grid(
        BlockGrid(rows=grid.rows, cols=grid.cols, block_h=tile_h, block_w=tile_w, blocks=tiles)
    )
    return MosaicResult(
        mosaic=mosaic,
        tiles=tiles,
        logs=logs,
        config=config,
        wall_time=time.perf_counter() - start,
    )
