"""Bounded-perturbation protection against the inpainting denoiser.

The engine ascends a feature-divergence objective with sign steps while
keeping the perturbation inside an L-infinity ball, inside its stage's
region support, and inside the valid image range. The flagship
objective pushes the denoiser's self- and cross-attention projections
away from the ones the clean image produces; baseline objectives move
the noise-prediction error or the encoded latent instead.

Region orchestration: each stage optimizes one region of a partition of
the pixel grid while the denoiser sees precisely the complementary hole,
so the perturbation under construction always occupies the context that
masking would preserve. Stages run in partition order (object interiors
first, leftover background last) and their deltas compose by disjoint
support.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .denoiser import encode, resize_mask_to_latent
from .diffusion import NoiseSchedule, forward_diffuse
from .errors import AttackError, ConfigError, ContractError, DimensionError, NumericError
from .masks import MaskSpec, multi_object_regions
from .tensor import Tensor

OBJECTIVES = ("attn", "cross-only", "self-only", "noise-max", "noise-min", "latent-min")
STAGES = ("single", "two", "multi")
_TAP_OBJECTIVES = ("attn", "cross-only", "self-only")


@dataclass(eq=False)
class AttackConfig:
    eta: float = 0.06
    alpha0: float = 0.03
    iters: int = 250
    objective: str = "attn"
    stages: str = "two"
    rho: float = 1.2
    seed: int = 0
    loss_scale: float = 1.0
    target_latent: np.ndarray = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.alpha0 < 0:
            raise ConfigError("alpha0 must be >= 0")
        if self.iters < 1:
            raise ConfigError("iteration count must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.stages not in STAGES:
            raise ConfigError(f"unknown stage mode {self.stages!r}")
        if self.rho < 1.0:
            raise ConfigError("rho must be >= 1")
        if self.loss_scale <= 0:
            raise ConfigError("loss_scale must be positive")


def step_sizes(cfg):
    """Per-iteration step sizes: linear decay from alpha0, floored at
    alpha0/100 so late iterations keep moving."""
    i = np.arange(cfg.iters, dtype=np.float64)
    return np.maximum(cfg.alpha0 * (1.0 - i / cfg.iters), cfg.alpha0 / 100.0)


@dataclass
class ProtectionResult:
    delta: np.ndarray
    image_adv: np.ndarray
    traces: list
    supports: list
    config: AttackConfig
    iterations: int


# ---------------------------------------------------------------------------
# objectives


def _check_pair(taps_clean, taps_adv):
    a, b = taps_clean.layers, taps_adv.layers
    if len(a) != len(b):
        raise DimensionError("tap layer counts differ")
    for la, lb in zip(a, b):
        for name in ("self_q", "self_k", "self_v", "cross_q", "cross_k", "cross_v"):
            if getattr(la, name).data.shape != getattr(lb, name).data.shape:
                raise DimensionError(f"tap shapes differ at {la.name}.{name}")


def _frob_to_clean(adv, clean):
    # clean side enters as a constant so no gradient reaches it
    return tz.frobenius_sq(adv, Tensor(clean.data))


def loss_cross(taps_clean, taps_adv):
    """Summed squared distance of the cross-attention queries."""
    _check_pair(taps_clean, taps_adv)
    total = None
    for lc, la in zip(taps_clean.layers, taps_adv.layers):
        term = _frob_to_clean(la.cross_q, lc.cross_q)
        total = term if total is None else tz.add(total, term)
    return total


def loss_self(taps_clean, taps_adv):
    """Summed squared distance of self-attention q, k, and v."""
    _check_pair(taps_clean, taps_adv)
    total = None
    for lc, la in zip(taps_clean.layers, taps_adv.layers):
        for name in ("self_q", "self_k", "self_v"):
            term = _frob_to_clean(getattr(la, name), getattr(lc, name))
            total = term if total is None else tz.add(total, term)
    return total


def loss_attn(taps_clean, taps_adv):
    """Unweighted sum of the cross and self divergences."""
    return tz.add(loss_cross(taps_clean, taps_adv), loss_self(taps_clean, taps_adv))


class _StageInputs:
    """Constant per-stage conditioning shared by every iteration."""

    def __init__(self, model, hole_mask, tokens, eps, schedule):
        c = model.config
        size = c.image_size
        if hole_mask.shape != (size, size):
            raise DimensionError("hole mask resolution does not fit the model")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape != (c.prompt_len,):
            raise DimensionError(f"prompt must have {c.prompt_len} token ids")
        eps = np.asarray(eps, dtype=np.float64)
        lat = (1, c.latent_channels, c.latent_size, c.latent_size)
        if eps.shape != lat:
            raise DimensionError(f"stage noise must have shape {lat}")
        self.model = model
        self.config = c
        self.schedule = schedule
        self.tokens = tokens[None]
        self.eps = eps
        grid = hole_mask.grid.astype(np.float64)
        self.hole = Tensor(np.broadcast_to(grid, (1, c.image_channels, size, size)).copy())
        self.m_lat = Tensor(resize_mask_to_latent(hole_mask, c)[None, None])

    def run(self, x_t, want_taps):
        """x_t: [1, 3, H, W] image tensor -> (latent, prediction, taps)."""
        z = encode(x_t, self.config)
        z_t = forward_diffuse(z, self.schedule.t_train, self.eps, self.schedule)
        z0m = encode(tz.mul(x_t, self.hole), self.config)
        pred, taps = self.model.predict(z_t, z0m, self.m_lat,
                                        self.schedule.t_train, self.tokens,
                                        want_taps=want_taps)
        return z, pred, taps


def baseline_loss(kind, stage, x_t, z_trg=None):
    """Non-attention objectives, signed so that ascent is always correct.

    noise-max grows the prediction error, noise-min shrinks it,
    latent-min pulls the encoded image toward z_trg (zeros by default).
    """
    if kind not in ("noise-max", "noise-min", "latent-min"):
        raise ConfigError(f"unknown baseline objective {kind!r}")
    if kind == "latent-min":
        z = encode(x_t, stage.config)
        if z_trg is None:
            z_trg = np.zeros(z.data.shape)
        target = np.asarray(z_trg, dtype=np.float64)
        if target.shape != z.data.shape:
            target = target[None]
        if target.shape != z.data.shape:
            raise DimensionError("target latent shape does not fit the encoder")
        return tz.scale(tz.frobenius_sq(z, Tensor(target)), -1.0)
    _, pred, _ = stage.run(x_t, want_taps=False)
    err = tz.frobenius_sq(pred, Tensor(stage.eps))
    return err if kind == "noise-max" else tz.scale(err, -1.0)


def objective_loss(cfg, stage, x_t, clean_taps):
    if cfg.objective in _TAP_OBJECTIVES:
        _, _, taps = stage.run(x_t, want_taps=True)
        fn = {"attn": loss_attn, "cross-only": loss_cross, "self-only": loss_self}
        loss = fn[cfg.objective](clean_taps, taps)
    else:
        loss = baseline_loss(cfg.objective, stage, x_t, cfg.target_latent)
    if cfg.loss_scale != 1.0:
        loss = tz.scale(loss, cfg.loss_scale)
    return loss


# ---------------------------------------------------------------------------
# the ascent loop


def _project(delta, support3, eta, lo, hi):
    """Support zeroing, eta ball, then valid image range, in that order.

    The range step clips delta against per-pixel bounds [-x, 1-x]
    rather than clipping x + delta and re-subtracting, which keeps both
    invariants bit-exact (fl(x + fl(1 - x)) == 1 for x in [0, 1]).
    """
    delta *= support3
    np.clip(delta, -eta, eta, out=delta)
    np.minimum(delta, hi, out=delta)
    np.maximum(delta, lo, out=delta)
    return delta


def pgd_stage(model, x, x_adv_in, support, hole_mask, tokens, cfg,
              schedule=None, seed=None):
    """Optimize one region's perturbation; returns (delta, loss trace).

    x is the clean image, x_adv_in the image carrying earlier stages'
    perturbations. support is a binary [H, W] grid of pixels this stage
    may touch; hole_mask is the keep/hole mask shown to the denoiser.
    The fixed stage noise and the initial uniform delta come from one
    seeded generator, so the whole trajectory is a deterministic
    function of (weights, images, masks, cfg, seed).
    """
    if schedule is None:
        schedule = NoiseSchedule()
    c = model.config
    shape = (c.image_channels, c.image_size, c.image_size)
    x = np.asarray(x, dtype=np.float64)
    x_adv_in = np.asarray(x_adv_in, dtype=np.float64)
    if x.shape != shape or x_adv_in.shape != shape:
        raise DimensionError(f"images must have shape {shape}")
    if x.min() < 0 or x.max() > 1 or x_adv_in.min() < 0 or x_adv_in.max() > 1:
        raise ContractError("images must lie in [0, 1]")
    support = np.asarray(support)
    if support.shape != (c.image_size, c.image_size):
        raise DimensionError("support grid resolution does not fit the model")
    if not np.all(np.isin(np.unique(support), (0, 1))):
        raise ContractError("support grid must hold only 0 and 1")
    if not support.any():
        raise AttackError("stage has an empty region support")
    if not isinstance(hole_mask, MaskSpec):
        raise ContractError("hole_mask must be a MaskSpec")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    delta = rng.uniform(-cfg.eta, cfg.eta, size=shape)
    eps = rng.standard_normal((1, c.latent_channels, c.latent_size, c.latent_size))
    support3 = np.broadcast_to(support.astype(np.float64), shape)
    lo, hi = -x_adv_in, 1.0 - x_adv_in
    delta = _project(delta, support3, cfg.eta, lo, hi)

    stage = _StageInputs(model, hole_mask, tokens, eps, schedule)
    clean_taps = None
    if cfg.objective in _TAP_OBJECTIVES:
        _, _, clean_taps = stage.run(Tensor(x[None]), want_taps=True)

    alphas = step_sizes(cfg)
    trace = np.empty(cfg.iters)
    for i in range(cfg.iters):
        try:
            d_t = Tensor(delta[None], requires_grad=True)
            x_t = tz.add(Tensor(x_adv_in[None]), d_t)
            loss = objective_loss(cfg, stage, x_t, clean_taps)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss is {value}")
            tz.backward(loss)
        except NumericError as exc:
            raise AttackError(f"attack failed at iteration {i}: {exc}") from exc
        trace[i] = value
        delta += alphas[i] * np.sign(d_t.grad[0])
        delta = _project(delta, support3, cfg.eta, lo, hi)
    return delta, trace


def build_regions(stages, boxes, rho, bounds):
    """Ordered binary supports for the requested stage mode."""
    if stages == "single":
        return [np.ones(bounds, dtype=np.uint8)]
    if not boxes:
        raise ConfigError(f"{stages}-stage protection needs at least one box")
    if stages == "two" and len(boxes) != 1:
        raise ConfigError("two-stage protection takes exactly one box")
    return multi_object_regions(boxes, rho, bounds)


def protect(model, x, boxes, cfg, tokens=None, schedule=None):
    """Full protection: per-region ascent composed into one perturbation.

    Each region's stage sees the hole over everything outside that
    region, so its perturbation lives exactly in the context that
    survives the masking. Deltas land on disjoint supports and
    accumulate; the result's image is x + delta clipped to [0, 1].
    """
    c = model.config
    if tokens is None:
        tokens = np.zeros(c.prompt_len, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    bounds = (c.image_size, c.image_size)
    supports = build_regions(cfg.stages, boxes, cfg.rho, bounds)

    x_adv = x.copy()
    delta = np.zeros_like(x_adv)
    traces = []
    for k, support in enumerate(supports):
        hole_mask = MaskSpec(support)  # keep = region, hole = complement
        delta_k, trace_k = pgd_stage(model, x, x_adv, support, hole_mask,
                                     tokens, cfg, schedule, seed=[cfg.seed, k])
        # supports are disjoint: composing by addition is bit-exact
        delta += delta_k
        x_adv = x_adv + delta_k
        traces.append(trace_k)
    return ProtectionResult(delta, x_adv, traces, supports, replace(cfg),
                            cfg.iters * len(supports))
