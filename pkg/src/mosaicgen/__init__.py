"""Generative photomosaic synthesis with a classical baseline and metrics."""

__version__ = "0.1.0"

from .classic import TilePool, classic_mosaic, histogram_match, match_tile, tone_map
from .diffusion import (
    ConditionTag,
    ExemplarDenoiser,
    ExemplarPool,
    NoiseSchedule,
    cfg_combine,
    ddim_sample,
    ddim_step,
    exemplar_denoise,
    make_schedule,
    predict_x0,
)
from .guidance import (
    ChannelStats,
    GuidanceState,
    adain_align,
    compute_stats,
    guidance_gradient,
    guidance_update,
    lowfreq_loss,
)
from .imageops import (
    BlockGrid,
    compose_grid,
    gaussian_blur,
    gaussian_pyramid,
    load_image,
    partition_blocks,
    resize_bilinear,
    rgb_to_luma,
    save_image,
)
from .metrics import MetricsReport, eval_report, psnr, pyramid_error, ssim
from .noise import (
    CoarseLatent,
    NoiseField,
    init_tile_latents,
    normalize_variance,
    subsample_noise,
)
from .pipeline import MosaicConfig, MosaicResult, generate_mosaic, generate_tile
