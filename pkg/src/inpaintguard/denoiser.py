"""Noise-prediction network over a fixed patch latent space.

The latent codec is not learned: images are cut into patch x patch
blocks, each flattened block is mapped through a fixed semi-orthonormal
matrix to `latent_channels` values, and decode applies the transpose.
encode(decode(z)) is the identity on latents, so the autoencoder
contributes no reconstruction error of its own.

The denoiser takes concat(z_t, masked-image latent, resized keep-mask)
as input, a sinusoidal timestep embedding added per block, and a
prompt of token ids attended to by cross-attention. Four attention
blocks run at the two spatial levels (down 16, down 8, up 8, up 16 for
the standard 32 px configuration), each exposing its query/key/value
projections as taps so objectives and metrics can read them.

Channel-wise layer normalization (over the channel axis per spatial
position) stands in for group normalization, and the output head is
zero-initialized so an untrained model predicts zero noise.
"""

import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container, tensor as tz
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .masks import MaskSpec
from .tensor import Tensor

NULL_TOKEN = 0

_PATCH_SEED = 1301  # fixed; the projection is part of the checkpoint format


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    image_channels: int = 3
    patch: int = 2
    latent_channels: int = 4
    base_width: int = 32
    deep_width: int = 64
    heads: int = 2
    prompt_len: int = 4
    vocab: int = 8
    time_dim: int = 64
    token_dim: int = 32

    def __post_init__(self):
        if self.image_size % (2 * self.patch):
            raise ConfigError("image_size must be divisible by 2 * patch")
        if self.base_width % self.heads or self.deep_width % self.heads:
            raise ConfigError("widths must be divisible by heads")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.vocab < 1 or self.prompt_len < 1:
            raise ConfigError("vocab and prompt_len must be positive")

    @property
    def latent_size(self):
        return self.image_size // self.patch

    @property
    def input_channels(self):
        # z_t + masked-image latent + keep-mask plane
        return 2 * self.latent_channels + 1


LAYER_NAMES = ("down1", "down2", "up2", "up1")


def patch_matrix(config):
    """Fixed semi-orthonormal map, rows orthonormal: P @ P.T = I."""
    rows = config.latent_channels
    cols = config.image_channels * config.patch * config.patch
    if rows > cols:
        raise ConfigError("latent_channels exceed patch dimensionality")
    rng = np.random.default_rng(_PATCH_SEED)
    g = rng.normal(size=(rows, cols))
    basis = []
    for v in g:
        for u in basis:
            v = v - np.dot(v, u) * u
        n = np.linalg.norm(v)
        if n < 1e-8:
            raise ConfigError("degenerate patch projection draw")
        basis.append(v / n)
    return np.stack(basis)


def encode(x, config):
    """Image [B, C, H, W] (or unbatched) -> latent [B, L, H/p, W/p]. Differentiable."""
    squeeze = x.data.ndim == 3
    if squeeze:
        x = tz.reshape(x, (1,) + x.data.shape)
    b, c, h, w = x.data.shape
    p = config.patch
    if c != config.image_channels or h % p or w % p:
        raise DimensionError(f"cannot encode image of shape {x.data.shape}")
    hs, ws = h // p, w // p
    t = tz.reshape(x, (b, c, hs, p, ws, p))
    t = tz.transpose(t, (0, 2, 4, 1, 3, 5))           # [B, hs, ws, C, p, p]
    t = tz.reshape(t, (b * hs * ws, c * p * p))
    z = tz.matmul(t, Tensor(patch_matrix(config).T))  # [B hs ws, L]
    z = tz.reshape(z, (b, hs, ws, config.latent_channels))
    z = tz.transpose(z, (0, 3, 1, 2))
    return tz.reshape(z, z.data.shape[1:]) if squeeze else z


def decode(z, config):
    """Latent -> image via the transposed projection. Differentiable."""
    squeeze = z.data.ndim == 3
    if squeeze:
        z = tz.reshape(z, (1,) + z.data.shape)
    b, l, hs, ws = z.data.shape
    if l != config.latent_channels:
        raise DimensionError(f"cannot decode latent of shape {z.data.shape}")
    p, c = config.patch, config.image_channels
    t = tz.transpose(z, (0, 2, 3, 1))                 # [B, hs, ws, L]
    t = tz.reshape(t, (b * hs * ws, l))
    x = tz.matmul(t, Tensor(patch_matrix(config)))    # [B hs ws, C p p]
    x = tz.reshape(x, (b, hs, ws, c, p, p))
    x = tz.transpose(x, (0, 3, 1, 4, 2, 5))
    x = tz.reshape(x, (b, c, hs * p, ws * p))
    return tz.reshape(x, x.data.shape[1:]) if squeeze else x


def resize_mask_to_latent(mask, config):
    """Keep-mask at pixel resolution -> {0,1} plane at latent resolution.

    Each patch block averages its pixels; blocks at exactly 0.5 round to
    keep. Returns float64 [latent_size, latent_size].
    """
    if not isinstance(mask, MaskSpec):
        raise ContractError("resize_mask_to_latent takes a MaskSpec")
    g = mask.grid.astype(np.float64)
    h, w = g.shape
    p = config.patch
    if h != config.image_size or w != config.image_size:
        raise DimensionError(f"mask shape {g.shape} does not match images")
    pooled = g.reshape(h // p, p, w // p, p).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float64)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps. t: scalar or [B]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class LayerTaps:
    """Projection outputs of one attention block, token-major [T, width]."""

    name: str
    grid: tuple
    heads: int
    self_q: Tensor
    self_k: Tensor
    self_v: Tensor
    cross_q: Tensor
    cross_k: Tensor
    cross_v: Tensor


@dataclass
class AttentionTaps:
    layers: list

    def __post_init__(self):
        if len(self.layers) != len(LAYER_NAMES):
            raise ContractError("taps must carry exactly one entry per attention block")


def _init_entry(rng, shape, std=0.02):
    return Tensor(rng.normal(scale=std, size=shape))


def init_params(config, seed, zero_head=True):
    """Seeded parameter dict. The output head starts at zero unless asked not to."""
    rng = np.random.default_rng(seed)
    c = config
    params = {}

    def norm(prefix, width):
        params[f"{prefix}.g"] = Tensor(np.ones(width))
        params[f"{prefix}.b"] = Tensor(np.zeros(width))

    def conv(prefix, cin, cout, k):
        params[f"{prefix}.w"] = _init_entry(rng, (cout, cin, k, k))
        params[f"{prefix}.b"] = Tensor(np.zeros(cout))

    def block(prefix, width):
        norm(f"{prefix}.res.norm1", width)
        conv(f"{prefix}.res.conv1", width, width, 3)
        params[f"{prefix}.res.time.w"] = _init_entry(rng, (c.time_dim, width))
        params[f"{prefix}.res.time.b"] = Tensor(np.zeros(width))
        norm(f"{prefix}.res.norm2", width)
        conv(f"{prefix}.res.conv2", width, width, 3)

    def attn(prefix, width, kv_dim):
        norm(f"{prefix}.norm", width)
        params[f"{prefix}.q.w"] = _init_entry(rng, (width, width))
        params[f"{prefix}.k.w"] = _init_entry(rng, (kv_dim, width))
        params[f"{prefix}.v.w"] = _init_entry(rng, (kv_dim, width))
        params[f"{prefix}.o.w"] = _init_entry(rng, (width, width))
        params[f"{prefix}.o.b"] = Tensor(np.zeros(width))

    conv("stem", c.input_channels, c.base_width, 3)
    params["time.fc1.w"] = _init_entry(rng, (c.time_dim, c.time_dim))
    params["time.fc1.b"] = Tensor(np.zeros(c.time_dim))
    params["time.fc2.w"] = _init_entry(rng, (c.time_dim, c.time_dim))
    params["time.fc2.b"] = Tensor(np.zeros(c.time_dim))
    params["tok.table"] = _init_entry(rng, (c.vocab, c.token_dim))

    for name, width in (("down1", c.base_width), ("down2", c.deep_width),
                        ("up2", c.deep_width), ("up1", c.base_width)):
        block(name, width)
        attn(f"{name}.sa", width, width)
        attn(f"{name}.ca", width, c.token_dim)
    block("mid", c.deep_width)

    conv("down_tr", c.base_width, c.deep_width, 3)
    conv("up_tr", c.deep_width, c.base_width, 3)
    conv("up2.merge", 2 * c.deep_width, c.deep_width, 1)
    conv("up1.merge", 2 * c.base_width, c.base_width, 1)
    norm("head.norm", c.base_width)
    if zero_head:
        params["head.out.w"] = Tensor(np.zeros((c.latent_channels, c.base_width, 3, 3)))
        params["head.out.b"] = Tensor(np.zeros(c.latent_channels))
    else:
        conv("head.out", c.base_width, c.latent_channels, 3)
    return params


def _ln_channels(x, g, b):
    # layer norm over the channel axis of [B, C, H, W]
    t = tz.transpose(x, (0, 2, 3, 1))
    t = tz.layer_norm(t, g, b)
    return tz.transpose(t, (0, 3, 1, 2))


class Denoiser:
    """Bundles a config with parameters and runs the prediction pass."""

    def __init__(self, config, params):
        self.config = config
        expected = {k: v.data.shape for k, v in init_params(config, 0).items()}
        got = {k: v.data.shape for k, v in params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(
                k for k in set(got) & set(expected) if got[k] != expected[k]
            )
            raise CheckpointError(
                f"parameter set mismatch: missing={missing} extra={extra} reshaped={wrong}"
            )
        self.params = params

    @classmethod
    def fresh(cls, config, seed, zero_head=True):
        return cls(config, init_params(config, seed, zero_head=zero_head))

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = bool(flag)

    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    # -- forward ----------------------------------------------------------

    def _res_block(self, prefix, x, emb):
        p = self.params
        r = tz.conv2d(
            tz.silu(_ln_channels(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])),
            p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], 1, 1,
        )
        tproj = tz.add_bias_lastdim(
            tz.matmul(emb, p[f"{prefix}.time.w"]), p[f"{prefix}.time.b"]
        )
        r = tz.add_spatial_bias(r, tproj)
        r = tz.conv2d(
            tz.silu(_ln_channels(r, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])),
            p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], 1, 1,
        )
        return tz.add(x, r)

    def _heads_split(self, t, heads):
        b, n, c = t.data.shape
        d = c // heads
        return tz.transpose(tz.reshape(t, (b, n, heads, d)), (0, 2, 1, 3))

    def _attention(self, prefix, tok, kv):
        """Pre-norm attention over token stream [B, T, C]; returns (out, q, k, v)."""
        p = self.params
        b, n, c = tok.data.shape
        heads = self.config.heads
        d = c // heads
        x = tz.layer_norm(tok, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
        source = x if kv is None else kv
        q = tz.matmul(x, p[f"{prefix}.q.w"])
        k = tz.matmul(source, p[f"{prefix}.k.w"])
        v = tz.matmul(source, p[f"{prefix}.v.w"])
        qh = self._heads_split(q, heads)
        kh = tz.transpose(self._heads_split(k, heads), (0, 1, 3, 2))
        vh = self._heads_split(v, heads)
        maps = tz.softmax_lastdim(tz.scale(tz.matmul(qh, kh), 1.0 / math.sqrt(d)))
        mixed = tz.matmul(maps, vh)
        merged = tz.reshape(tz.transpose(mixed, (0, 2, 1, 3)), (b, n, c))
        out = tz.add_bias_lastdim(tz.matmul(merged, p[f"{prefix}.o.w"]), p[f"{prefix}.o.b"])
        return tz.add(tok, out), q, k, v

    def _attn_block(self, name, x, emb, tok_e, want_taps):
        h = self._res_block(f"{name}.res", x, emb)
        b, c, hh, ww = h.data.shape
        tok = tz.transpose(tz.reshape(h, (b, c, hh * ww)), (0, 2, 1))
        tok, sq, sk, sv = self._attention(f"{name}.sa", tok, None)
        tok, cq, ck, cv = self._attention(f"{name}.ca", tok, tok_e)
        out = tz.reshape(tz.transpose(tok, (0, 2, 1)), (b, c, hh, ww))
        taps = None
        if want_taps:
            flat = lambda t: tz.reshape(t, t.data.shape[1:])
            taps = LayerTaps(
                name=name, grid=(hh, ww), heads=self.config.heads,
                self_q=flat(sq), self_k=flat(sk), self_v=flat(sv),
                cross_q=flat(cq), cross_k=flat(ck), cross_v=flat(cv),
            )
        return out, taps

    def predict(self, z_t, z0m, m_lat, t, tokens, want_taps=False):
        """Noise estimate for a batch.

        z_t, z0m: [B, L, hs, ws] tensors; m_lat: [B, 1, hs, ws];
        t: int or [B] ints; tokens: [B, S] ids. With want_taps=True the
        batch must be a single sample and taps come back token-major.
        """
        c = self.config
        p = self.params
        hs = c.latent_size
        for name, tens, ch in (("z_t", z_t, c.latent_channels),
                               ("z0m", z0m, c.latent_channels),
                               ("m_lat", m_lat, 1)):
            if tens.data.ndim != 4 or tens.data.shape[1:] != (ch, hs, hs):
                raise DimensionError(f"{name} must be [B, {ch}, {hs}, {hs}]")
        bsz = z_t.data.shape[0]
        if z0m.data.shape[0] != bsz or m_lat.data.shape[0] != bsz:
            raise DimensionError("batch sizes disagree")
        tokens = np.atleast_2d(np.asarray(tokens))
        if tokens.shape != (bsz, c.prompt_len):
            raise DimensionError(f"tokens must be [B, {c.prompt_len}]")
        if want_taps and bsz != 1:
            raise ContractError("taps are only defined for single-sample passes")
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (bsz,))

        emb = Tensor(timestep_embedding(t_arr, c.time_dim))
        emb = tz.add_bias_lastdim(tz.matmul(emb, p["time.fc1.w"]), p["time.fc1.b"])
        emb = tz.add_bias_lastdim(tz.matmul(tz.silu(emb), p["time.fc2.w"]), p["time.fc2.b"])
        tok_e = tz.embedding(tokens, p["tok.table"])

        x = tz.concat([z_t, z0m, m_lat], axis=1)
        h0 = tz.conv2d(x, p["stem.w"], p["stem.b"], 1, 1)
        h1, t1 = self._attn_block("down1", h0, emb, tok_e, want_taps)
        hd = tz.conv2d(tz.avgpool2x2(h1), p["down_tr.w"], p["down_tr.b"], 1, 1)
        h2, t2 = self._attn_block("down2", hd, emb, tok_e, want_taps)
        hm = self._res_block("mid.res", h2, emb)
        h3 = tz.conv2d(tz.concat([hm, h2], axis=1), p["up2.merge.w"], p["up2.merge.b"], 1, 0)
        h3, t3 = self._attn_block("up2", h3, emb, tok_e, want_taps)
        hu = tz.conv2d(tz.upsample_nearest2x(h3), p["up_tr.w"], p["up_tr.b"], 1, 1)
        h4 = tz.conv2d(tz.concat([hu, h1], axis=1), p["up1.merge.w"], p["up1.merge.b"], 1, 0)
        h4, t4 = self._attn_block("up1", h4, emb, tok_e, want_taps)
        eps = tz.conv2d(
            tz.silu(_ln_channels(h4, p["head.norm.g"], p["head.norm.b"])),
            p["head.out.w"], p["head.out.b"], 1, 1,
        )
        taps = AttentionTaps([t1, t2, t3, t4]) if want_taps else None
        return eps, taps


# ---------------------------------------------------------------------------
# checkpoints

_META_NAME = "__meta__"


def save_checkpoint(path, model, step, seed):
    meta = {"config": asdict(model.config), "step": int(step), "seed": int(seed)}
    entries = {}
    for name in sorted(model.params):
        entries[name] = model.params[name].data
    entries[_META_NAME] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    container.write_file(path, entries)


def load_checkpoint(path):
    """Returns (Denoiser, meta dict). Frozen weights (requires_grad False)."""
    try:
        entries = container.read_file(path)
    except (OSError, container.ContainerError) as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if _META_NAME not in entries:
        raise CheckpointError("checkpoint is missing its metadata entry")
    try:
        meta = json.loads(bytes(entries.pop(_META_NAME)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("checkpoint metadata is not valid JSON") from exc
    cfg_dict = meta.get("config")
    allowed = {f.name for f in fields(DenoiserConfig)}
    if not isinstance(cfg_dict, dict) or set(cfg_dict) != allowed:
        raise CheckpointError("checkpoint config echo does not match this format")
    config = DenoiserConfig(**cfg_dict)
    params = {}
    for name, arr in entries.items():
        if arr.dtype != np.float64:
            raise CheckpointError(f"weight {name!r} is not float64")
        params[name] = Tensor(arr)
    try:
        model = Denoiser(config, params)
    except CheckpointError:
        raise
    return model, meta
