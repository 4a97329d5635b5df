"""Noise schedule, x0 prediction, DDIM stepping, and the exact exemplar denoiser.

The denoiser contract is a callable `predict(z, t, label)` returning a
prediction in a declared parameterization ("epsilon" or "v"). The shipped
implementation is the closed-form Bayes posterior mean over a finite pool of
exemplar images, which stands in for a trained network at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageops import load_image

PARAMETERIZATIONS = ("epsilon", "v")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients; index 0 is the clean endpoint by convention."""

    T: int
    beta: np.ndarray        # (T,), beta[t-1] is the step-t variance
    alpha_bar: np.ndarray   # (T+1,), alpha_bar[0] = 1
    alpha: np.ndarray       # sqrt(alpha_bar)
    sigma: np.ndarray       # sqrt(1 - alpha_bar)

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    assert np.max(np.abs(alpha**2 + sigma**2 - 1.0)) < 1e-7
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, alpha=alpha, sigma=sigma)


def predict_x0(
    z: np.ndarray,
    pred: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    parameterization: str = "v",
) -> np.ndarray:
    """Clean-image estimate from the latent and the raw prediction.

    "v" mode:       x0 = alpha_t * z - sigma_t * pred
    "epsilon" mode: x0 = (z - sigma_t * pred) / alpha_t
    """
    schedule.check_timestep(t)
    if z.shape != pred.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs prediction {pred.shape}")
    a, s = schedule.alpha[t], schedule.sigma[t]
    if parameterization == "v":
        return a * z - s * pred
    if parameterization == "epsilon":
        return (z - s * pred) / a
    raise ValueError(f"unknown parameterization {parameterization!r}")


def derive_eps(z: np.ndarray, x0: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Noise estimate consistent with (z, x0) at level t: (z - alpha_t x0) / sigma_t."""
    schedule.check_timestep(t)
    s = schedule.sigma[t]
    if s == 0:
        raise ValueError(f"sigma is zero at t={t}; epsilon is undefined")
    return (z - schedule.alpha[t] * x0) / s


def to_parameterization(
    z: np.ndarray, x0: np.ndarray, t: int, schedule: NoiseSchedule, parameterization: str
) -> np.ndarray:
    """Express a clean-image estimate as a raw prediction in the given mode."""
    eps = derive_eps(z, x0, t, schedule)
    if parameterization == "epsilon":
        return eps
    if parameterization == "v":
        return schedule.alpha[t] * eps - schedule.sigma[t] * x0
    raise ValueError(f"unknown parameterization {parameterization!r}")


@dataclass(frozen=True)
class ConditionTag:
    """Generation condition: a pool label (None = unconditional) plus CFG scale."""

    label: str | None = None
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


class ExemplarPool:
    """A finite set of equal-sized labeled images defining the data distribution."""

    def __init__(self, images: np.ndarray, labels: list[str]):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError("pool needs a nonempty (M, C, H, W) image stack")
        if len(labels) != images.shape[0]:
            raise ValueError("one label per exemplar required")
        self.images = images
        self.labels = list(labels)
        self.flat = images.reshape(images.shape[0], -1)
        self.sq_norms = np.einsum("ij,ij->i", self.flat, self.flat)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def select(self, label: str | None) -> np.ndarray:
        """Indices matching a label; all indices when unconditional."""
        if label is None:
            return np.arange(len(self))
        idx = np.array([i for i, lab in enumerate(self.labels) if lab == label])
        if idx.size == 0:
            raise ValueError(f"no exemplar carries label {label!r}")
        return idx

    @classmethod
    def from_directory(cls, path) -> "ExemplarPool":
        """Load equal-sized PNGs; immediate subdirectory names become labels.

        Top-level PNGs (no subdirectory) get the label "default".
        """
        root = Path(path)
        if not root.is_dir():
            raise ValueError(f"pool directory {root} does not exist")
        entries: list[tuple[str, Path]] = []
        for f in sorted(root.glob("*.png")):
            entries.append(("default", f))
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            for f in sorted(sub.glob("*.png")):
                entries.append((sub.name, f))
        if not entries:
            raise ValueError(f"no PNG files found under {root}")
        images, labels = [], []
        for label, f in entries:
            images.append(load_image(f))
            labels.append(label)
        shapes = {im.shape for im in images}
        if len(shapes) > 1:
            raise ValueError(f"pool images must share one shape, found {sorted(shapes)}")
        return cls(np.stack(images), labels)


def posterior_weights(
    z: np.ndarray,
    t: int,
    label: str | None,
    pool: ExemplarPool,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax posterior over the selected exemplars given z at level t.

    Returns (indices, weights). Log-weights -||z - alpha_t e||^2 / (2 sigma_t^2)
    are max-subtracted before exponentiation; they span hundreds of units at
    small t.
    """
    schedule.check_timestep(t)
    if z.shape != pool.image_shape:
        raise ValueError(f"latent shape {z.shape} != pool image shape {pool.image_shape}")
    a, s = schedule.alpha[t], schedule.sigma[t]
    if s == 0:
        raise ValueError(f"sigma is zero at t={t}")
    idx = pool.select(label)
    zf = z.reshape(-1)
    # ||z - a e||^2 = ||z||^2 - 2 a <e, z> + a^2 ||e||^2, ||z||^2 is constant.
    cross = pool.flat[idx] @ zf
    d2 = pool.sq_norms[idx] * a**2 - 2.0 * a * cross
    logw = -d2 / (2.0 * s**2)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    return idx, w


def exemplar_denoise(
    z: np.ndarray,
    t: int,
    cond: ConditionTag,
    pool: ExemplarPool,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior-mean denoiser for the uniform prior over the pool.

    Returns (x0_hat, eps_hat) where x0_hat = E[x0 | z_t] and eps_hat is the
    consistent noise estimate.
    """
    idx, w = posterior_weights(z, t, cond.label, pool, schedule)
    x0 = (w @ pool.flat[idx]).reshape(pool.image_shape)
    return x0, derive_eps(z, x0, t, schedule)


class ExemplarDenoiser:
    """Denoiser-contract adapter around the exact exemplar posterior."""

    def __init__(self, pool: ExemplarPool, schedule: NoiseSchedule,
                 parameterization: str = "v"):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.pool = pool
        self.schedule = schedule
        self.parameterization = parameterization

    def predict(self, z: np.ndarray, t: int, label: str | None = None) -> np.ndarray:
        x0, _ = exemplar_denoise(z, t, ConditionTag(label), self.pool, self.schedule)
        return to_parameterization(z, x0, t, self.schedule, self.parameterization)


def cfg_combine(pred_cond: np.ndarray, pred_uncond: np.ndarray, g: float) -> np.ndarray:
    """Classifier-free guidance: uncond + g * (cond - uncond).

    g = 1 returns the conditional and g = 0 the unconditional prediction
    exactly (no float round trip).
    """
    if pred_cond.shape != pred_uncond.shape:
        raise ValueError("prediction shapes must match")
    if g < 0:
        raise ValueError("guidance scale must be >= 0")
    if g == 1.0:
        return pred_cond
    if g == 0.0:
        return pred_uncond
    return pred_uncond + g * (pred_cond - pred_uncond)


def cfg_predict(denoiser, z: np.ndarray, t: int, cond: ConditionTag) -> np.ndarray:
    """One guided prediction; skips the unconditional call when it cannot matter."""
    if cond.label is None or cond.cfg_scale == 1.0:
        return denoiser.predict(z, t, cond.label)
    pred_cond = denoiser.predict(z, t, cond.label)
    pred_uncond = denoiser.predict(z, t, None)
    return cfg_combine(pred_cond, pred_uncond, cond.cfg_scale)


def ddim_step(
    z: np.ndarray,
    x0_hat: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Deterministic DDIM update: alpha_{t_prev} x0 + sigma_{t_prev} eps.

    t_prev = 0 returns x0_hat (endpoint coefficients 1 and 0); t_prev = t
    reproduces z when the pair is consistent with it.
    """
    schedule.check_timestep(t)
    if not 0 <= t_prev <= t:
        raise ValueError(f"timestep must not increase: t={t}, t_prev={t_prev}")
    return schedule.alpha[t_prev] * x0_hat + schedule.sigma[t_prev] * eps_hat


def inference_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending grid T = t_0 > t_1 > ... > t_steps = 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    ts = np.unique(ts)[::-1]
    return [int(t) for t in ts]


def ddim_sample(
    init: np.ndarray,
    denoiser,
    cond: ConditionTag,
    schedule: NoiseSchedule,
    steps: int,
    return_trajectory: bool = False,
):
    """Plain guided DDIM trajectory from a noise latent; no steering terms.

    With return_trajectory, also returns [(t, z_t_before_predict), ...] for
    every denoiser call.
    """
    ts = inference_timesteps(schedule.T, steps)
    z = init
    trajectory = []
    for t, t_prev in zip(ts[:-1], ts[1:]):
        if return_trajectory:
            trajectory.append((t, z))
        pred = cfg_predict(denoiser, z, t, cond)
        x0 = predict_x0(z, pred, t, schedule, denoiser.parameterization)
        eps = derive_eps(z, x0, t, schedule)
        z = ddim_step(z, x0, eps, t, t_prev, schedule)
    if return_trajectory:
        return z, trajectory
    return z
