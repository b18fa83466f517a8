"""Training loop for the inpainting denoiser.

Each step draws a batch with replacement, noises it to per-element
uniform timesteps, hides part of the conditioning image behind a fresh
random mask, and regresses the injected noise. The conditioning prompt
is the sample's class token sequence, dropped to the null prompt at the
configured rate so guided sampling has a trained unconditional branch.

A single seeded generator drives every draw in a fixed order, so a
(seed, dataset, config) triple fully determines the loss trace and the
final weights.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .dataset import class_tokens, random_training_mask
from .denoiser import (
    NULL_TOKEN,
    Denoiser,
    DenoiserConfig,
    encode,
    resize_mask_to_latent,
    save_checkpoint,
)
from .diffusion import NoiseSchedule, forward_diffuse
from .errors import ConfigError, NumericError, TrainingError
from .tensor import Tensor


@dataclass
class TrainConfig:
    steps: int
    batch: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps, batch, and checkpoint cadence must be positive")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning rate and adam_eps must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam moments must lie in (0, 1)")
        if not (0.0 <= self.cond_dropout < 1.0):
            raise ConfigError("condition dropout must lie in [0, 1)")


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


@dataclass
class TrainResult:
    model: Denoiser
    losses: np.ndarray
    saved_steps: list


def _batch_arrays(dataset, idx, rng, config, model_cfg):
    """Images, masked images, latent masks, tokens for one step's batch."""
    size = model_cfg.image_size
    x = np.empty((len(idx), model_cfg.image_channels, size, size))
    keep = np.empty((len(idx), 1, size, size))
    m_lat = np.empty((len(idx), 1, model_cfg.latent_size, model_cfg.latent_size))
    toks = np.empty((len(idx), model_cfg.prompt_len), dtype=np.int64)
    for row, i in enumerate(idx):
        sample = dataset[i]
        mask = random_training_mask(rng, sample.bbox, (size, size))
        x[row] = sample.image
        keep[row, 0] = mask.grid
        m_lat[row, 0] = resize_mask_to_latent(mask, model_cfg)
        toks[row] = class_tokens(sample.class_id, model_cfg.prompt_len)
    drop = rng.random(len(idx)) < config.cond_dropout
    toks[drop] = NULL_TOKEN
    return x, keep, m_lat, toks


def train(dataset, config, model_cfg=None, schedule=None, out_path=None, model=None):
    """Train a denoiser (fresh by default); returns TrainResult.

    Passing model warm-starts from existing weights instead of a fresh
    zero-head initialization. With out_path set, a checkpoint lands
    there every config.checkpoint_every steps and again at the final
    step.
    """
    if not dataset:
        raise ConfigError("training needs a nonempty dataset")
    if model is not None:
        model_cfg = model.config
    if model_cfg is None:
        model_cfg = DenoiserConfig()
    if schedule is None:
        schedule = NoiseSchedule()
    for s in dataset:
        if s.image.shape != (model_cfg.image_channels, model_cfg.image_size,
                             model_cfg.image_size):
            raise ConfigError(f"sample {s.index} does not fit the model input")

    if model is None:
        model = Denoiser.fresh(model_cfg, config.seed)
    model.set_trainable(True)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    lat_shape = (config.batch, model_cfg.latent_channels,
                 model_cfg.latent_size, model_cfg.latent_size)

    losses = np.empty(config.steps)
    saved = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(dataset), size=config.batch)
        t = rng.integers(1, schedule.t_train + 1, size=config.batch)
        noise = rng.standard_normal(lat_shape)
        x, keep, m_lat, toks = _batch_arrays(dataset, idx, rng, config, model_cfg)
        try:
            # conditioning inputs carry no gradient; encode outside the graph
            z0 = encode(Tensor(x), model_cfg).data
            z0m = encode(Tensor(x * keep), model_cfg).data
            z_t = forward_diffuse(z0, t, noise, schedule)
            pred, _ = model.predict(Tensor(z_t), Tensor(z0m), Tensor(m_lat), t, toks)
            diff = tz.sub(pred, Tensor(noise))
            loss = tz.mean_all(tz.mul(diff, diff))
            tz.backward(loss)
        except NumericError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"training diverged at step {step}: loss {value}")
        losses[step - 1] = value
        opt.step()
        if out_path is not None and (
            step % config.checkpoint_every == 0 or step == config.steps
        ):
            save_checkpoint(out_path, model, step, config.seed)
            saved.append(step)

    model.set_trainable(False)
    return TrainResult(model, losses, saved)
