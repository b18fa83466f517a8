"""Forward noising schedule and deterministic DDIM inpainting.

The schedule is the linear-beta discrete one: beta_t spaced evenly over
t = 1..t_train, alpha_bar the running product of (1 - beta). Index 0 is
the identity point (alpha_bar = 1), so forward_diffuse at t = 0 returns
the input exactly.

Sampling is deterministic DDIM (no stochastic term): from the model's
noise estimate the step reconstructs the implied clean latent and
re-noises it at the previous timestep. Inpainting conditions every step
on the masked-image latent and the resized keep-mask; nothing is pasted
back afterward, the model alone decides the hole content.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .denoiser import NULL_TOKEN, decode, encode, resize_mask_to_latent
from .errors import ConfigError, ContractError, DimensionError
from .masks import MaskSpec
from .tensor import Tensor


class NoiseSchedule:
    def __init__(self, t_train=1000, beta_start=1e-4, beta_end=0.02):
        if t_train < 1:
            raise ConfigError("t_train must be positive")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError("betas must satisfy 0 < start <= end < 1")
        self.t_train = int(t_train)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        # index 0 is a convenience slot: beta[0] unused, alpha_bar[0] = 1
        self.beta = np.zeros(self.t_train + 1)
        self.beta[1:] = np.linspace(beta_start, beta_end, self.t_train)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.ones(self.t_train + 1)
        self.alpha_bar[1:] = np.cumprod(self.alpha[1:])

    def check_t(self, t, lo=0):
        t = int(t)
        if not (lo <= t <= self.t_train):
            raise ContractError(f"timestep {t} outside [{lo}, {self.t_train}]")
        return t


def forward_diffuse(z0, t, eps, schedule):
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    z0 may be a Tensor (stays differentiable) or an array. t is a single
    timestep or one per leading batch element; eps is a constant array
    of z0's shape.
    """
    is_tensor = isinstance(z0, Tensor)
    shape = z0.data.shape if is_tensor else np.asarray(z0).shape
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != shape:
        raise DimensionError(f"eps shape {eps.shape} does not match z0 {shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.ndim != 1:
        raise ContractError("t must be a scalar or a 1-D batch of timesteps")
    for ti in t_arr:
        schedule.check_t(ti)
    abar = schedule.alpha_bar[t_arr]
    if t_arr.size == 1:
        c_sig, c_eps = float(np.sqrt(abar[0])), float(np.sqrt(1.0 - abar[0]))
        if is_tensor:
            return tz.add(tz.scale(z0, c_sig), Tensor(c_eps * eps))
        return c_sig * np.asarray(z0) + c_eps * eps
    if shape[0] != t_arr.size:
        raise DimensionError("per-element t needs one entry per batch row")
    bshape = (t_arr.size,) + (1,) * (len(shape) - 1)
    c_sig = np.sqrt(abar).reshape(bshape)
    c_eps = np.sqrt(1.0 - abar).reshape(bshape)
    if is_tensor:
        sig = tz.mul(z0, Tensor(np.broadcast_to(c_sig, shape)))
        return tz.add(sig, Tensor(c_eps * eps))
    return c_sig * np.asarray(z0) + c_eps * eps


def ddim_step(z_t, eps_hat, t, t_prev, schedule):
    """One deterministic reverse step t -> t_prev (arrays in, array out)."""
    t = schedule.check_t(t, lo=1)
    t_prev = schedule.check_t(t_prev)
    if t_prev >= t:
        raise ContractError(f"t_prev {t_prev} must be below t {t}")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise DimensionError("eps_hat shape does not match z_t")
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * z0_hat + np.sqrt(1.0 - ab_p) * eps_hat


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be positive")

    def timesteps(self, schedule):
        """Strictly decreasing visit sequence ending at 0, e.g. 1000..20, 0."""
        if schedule.t_train % self.steps:
            raise ConfigError(
                f"{self.steps} steps do not divide t_train {schedule.t_train}"
            )
        k = schedule.t_train // self.steps
        return list(range(schedule.t_train, -1, -k))


def cfg_predict(model, z_t, z0m, m_lat, t, tokens, guidance):
    """Classifier-free guided estimate: null + guidance (cond - null).

    Runs the conditional and null-prompt passes as one 2-row batch.
    Inputs are single-sample arrays [L, hs, ws] / [1, hs, ws]; the
    result is a plain array.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise DimensionError("cfg_predict takes a single prompt")
    pair = lambda a: Tensor(np.stack([np.asarray(a)] * 2))
    toks = np.stack([tokens, np.full_like(tokens, NULL_TOKEN)])
    eps, _ = model.predict(pair(z_t), pair(z0m), pair(m_lat), int(t), toks)
    cond, null = eps.data[0], eps.data[1]
    return null + float(guidance) * (cond - null)


def inpaint_sample(model, image, mask, tokens, sampler, schedule=None):
    """Repaint a mask's hole. Returns a [3, H, W] image clipped to [0, 1].

    Deterministic given (weights, image, mask, tokens, sampler.seed):
    the initial latent is the only random draw.
    """
    if schedule is None:
        schedule = NoiseSchedule()
    c = model.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (c.image_channels, c.image_size, c.image_size):
        raise DimensionError(f"image shape {image.shape} does not fit the model")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    if not isinstance(mask, MaskSpec):
        raise ContractError("mask must be a MaskSpec")
    tokens = np.asarray(tokens)
    if tokens.shape != (c.prompt_len,):
        raise DimensionError(f"prompt must have {c.prompt_len} token ids")

    masked = image * mask.grid[None, :, :]
    z0m = encode(Tensor(masked), c).data
    m_lat = resize_mask_to_latent(mask, c)[None, :, :]
    rng = np.random.default_rng(sampler.seed)
    z = rng.normal(size=(c.latent_channels, c.latent_size, c.latent_size))
    seq = sampler.timesteps(schedule)
    for t, t_prev in zip(seq[:-1], seq[1:]):
        eps = cfg_predict(model, z, z0m, m_lat, t, tokens, sampler.guidance)
        z = ddim_step(z, eps, t, t_prev, schedule)
    out = decode(Tensor(z), c).data
    return np.clip(out, 0.0, 1.0)
