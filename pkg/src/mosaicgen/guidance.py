"""Per-step tile steering: color-statistics alignment and low-frequency guidance.

Two mechanisms run inside the denoising loop. AdaIN alignment rescales each
channel of the clean-image estimate to match the reference block's mean and
standard deviation. Low-frequency guidance nudges the latent down the
gradient of the blurred-MSE between the estimate and the (upsampled)
reference block, with an exponentially decaying step size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .diffusion import NoiseSchedule, posterior_weights
from .imageops import (
    LUMA_WEIGHTS,
    gaussian_blur,
    gaussian_kernel_1d,
    rgb_to_luma,
    validate_image,
)

ADAIN_EPS = 1e-6

OBJECTIVES = ("rgb-mse", "luma-mse")
JACOBIAN_MODES = ("stop-grad", "exact")


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and population standard deviation."""

    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)


@dataclass(frozen=True)
class GuidanceState:
    """Mutable-by-replacement loop state for the gradient steering term."""

    w: float
    gamma: float
    blur_sigma: float
    objective: str = "rgb-mse"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance weight must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("decay factor must be in (0, 1]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


def compute_stats(img: np.ndarray) -> ChannelStats:
    img = validate_image(img)
    flat = img.reshape(img.shape[0], -1)
    return ChannelStats(mean=flat.mean(axis=1), std=flat.std(axis=1))


def adain_align(tile: np.ndarray, target: ChannelStats, eps: float = ADAIN_EPS) -> np.ndarray:
    """Affinely remap each channel so its statistics match the target.

    out = mu_r + sigma_r * (tile - mu_t) / sigma_t; a channel whose std is
    at most eps becomes the constant mu_r. The stabilizer only gates the
    degenerate branch, so alignment is an exact fixed point and idempotent.
    """
    tile = validate_image(tile)
    if tile.shape[0] != target.mean.shape[0]:
        raise ValueError("channel counts disagree")
    src = compute_stats(tile)
    out = np.empty_like(tile)
    for c in range(tile.shape[0]):
        if src.std[c] <= eps:
            out[c] = target.mean[c]
        else:
            out[c] = target.mean[c] + target.std[c] * (tile[c] - src.mean[c]) / src.std[c]
    return out


def lowfreq_loss(
    tile_x0: np.ndarray,
    block: np.ndarray,
    blur_sigma: float,
    objective: str = "rgb-mse",
) -> float:
    """Mean squared error between low-pass versions of estimate and block.

    "luma-mse" compares blurred BT.601 luminance only, leaving chroma
    unconstrained.
    """
    if tile_x0.shape != block.shape:
        raise ValueError(f"shape mismatch: {tile_x0.shape} vs {block.shape}")
    if objective == "luma-mse":
        tile_x0 = rgb_to_luma(tile_x0)
        block = rgb_to_luma(block)
    elif objective != "rgb-mse":
        raise ValueError(f"unknown objective {objective!r}")
    diff = gaussian_blur(tile_x0, blur_sigma) - gaussian_blur(block, blur_sigma)
    return float(np.mean(diff**2))


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense 1-D replicate-boundary Gaussian operator; exact adjoint by transpose."""
    if sigma == 0:
        return np.eye(n)
    k = gaussian_kernel_1d(sigma)
    radius = len(k) // 2
    m = np.zeros((n, n))
    idx = np.arange(n)
    for j, kv in enumerate(k):
        np.add.at(m, (idx, np.clip(idx + (j - radius), 0, n - 1)), kv)
    return m


class BlurOperator:
    """Separable Gaussian blur as explicit per-axis matrices.

    Matches gaussian_blur numerically while exposing the exact adjoint,
    which replicate-boundary convolution needs (the operator is not
    symmetric at the edges).
    """

    def __init__(self, height: int, width: int, sigma: float):
        self.bh = _blur_matrix(height, sigma)
        self.bw = _blur_matrix(width, sigma)

    def apply(self, img: np.ndarray) -> np.ndarray:
        return self.bh @ img @ self.bw.T

    def apply_adjoint(self, img: np.ndarray) -> np.ndarray:
        return self.bh.T @ img @ self.bw


def _x0_sensitivity(t: int, schedule: NoiseSchedule, parameterization: str) -> float:
    # d x0 / d z with the raw prediction frozen: alpha_t in "v" mode,
    # 1/alpha_t in "epsilon" mode.
    if parameterization == "v":
        return float(schedule.alpha[t])
    if parameterization == "epsilon":
        return float(1.0 / schedule.alpha[t])
    raise ValueError(f"unknown parameterization {parameterization!r}")


def _loss_gradient_wrt_x0(x0: np.ndarray, block: np.ndarray, state: GuidanceState) -> np.ndarray:
    """d lowfreq_loss / d x0, exact for the replicate-boundary blur."""
    if state.objective == "luma-mse":
        d = rgb_to_luma(x0) - rgb_to_luma(block)
    else:
        d = x0 - block
    op = BlurOperator(d.shape[1], d.shape[2], state.blur_sigma)
    back = op.apply_adjoint(op.apply(d)) * (2.0 / d.size)
    if state.objective == "luma-mse":
        back = np.stack([w * back[0] for w in LUMA_WEIGHTS])
    return back


def guidance_gradient(
    z: np.ndarray,
    denoised: tuple[np.ndarray, np.ndarray],
    block: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    state: GuidanceState,
    jacobian_mode: str = "stop-grad",
    parameterization: str = "v",
    pool=None,
    label: str | None = None,
) -> np.ndarray:
    """Gradient of the low-frequency loss with respect to the latent.

    "stop-grad" treats the denoiser's raw prediction as constant in z, so the
    clean-image estimate responds affinely to the latent. "exact" pushes the
    loss gradient through the analytic Jacobian of the exemplar posterior
    (softmax-weighted exemplar covariance); it recomputes the posterior mean
    from (z, t) and exists as a correctness oracle.
    """
    x0_hat, _ = denoised
    if jacobian_mode == "stop-grad":
        back = _loss_gradient_wrt_x0(x0_hat, block, state)
        return _x0_sensitivity(t, schedule, parameterization) * back
    if jacobian_mode != "exact":
        raise ValueError(f"unknown jacobian mode {jacobian_mode!r}")
    if pool is None:
        raise ValueError("exact mode needs the exemplar pool")
    idx, w = posterior_weights(z, t, label, pool, schedule)
    sel = pool.flat[idx]
    x0_post = (w @ sel).reshape(pool.image_shape)
    back = _loss_gradient_wrt_x0(x0_post, block, state).reshape(-1)
    # Jacobian of the posterior mean: (alpha / sigma^2) * Cov_w(exemplars).
    x0f = x0_post.reshape(-1)
    cov_back = sel.T @ (w * (sel @ back)) - x0f * (x0f @ back)
    a, s = schedule.alpha[t], schedule.sigma[t]
    return ((a / s**2) * cov_back).reshape(z.shape)


def guidance_update(
    z: np.ndarray, grad: np.ndarray, state: GuidanceState
) -> tuple[np.ndarray, GuidanceState]:
    """One descent step on the latent plus the weight decay: w' = gamma * w."""
    if z.shape != grad.shape:
        raise ValueError("latent and gradient shapes disagree")
    z_new = z if state.w == 0 else z - state.w * grad
    return z_new, replace(state, w=state.gamma * state.w)
