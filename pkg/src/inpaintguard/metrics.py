"""Protection metrics and attention visualization.

Desk-scale substitutes for perceptual suites: pixel fidelity of the
protected image (psnr), how far the denoiser's attention maps move
(attention_divergence), how much the filled region changes
(hole_deviation), plus a principal-component heatmap of an attention
block's output and a Gaussian purification transform used to probe
robustness of the protection.
"""

import math

import numpy as np

from .denoiser import LAYER_NAMES
from .errors import ConfigError, ContractError, DimensionError
from .masks import MaskSpec

BRANCHES = ("self", "cross")
HEATMAP_SIZE = 16


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    for img in (a, b):
        if img.min() < 0 or img.max() > 1:
            raise ContractError("psnr inputs must lie in [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def hole_deviation(out_a, out_b, mask):
    """Mean squared error restricted to hole pixels; empty hole gives 0."""
    a = np.asarray(out_a, dtype=np.float64)
    b = np.asarray(out_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not isinstance(mask, MaskSpec):
        raise ContractError("mask must be a MaskSpec")
    if mask.shape != a.shape[-2:]:
        raise DimensionError("mask resolution does not match the images")
    hole = mask.grid == 0
    if not hole.any():
        return 0.0
    diff = (a - b)[..., hole]
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# attention maps


def _layer_index(taps, layer):
    """Accept a 1-based index or a block name."""
    if isinstance(layer, str):
        if layer not in LAYER_NAMES:
            raise ConfigError(f"unknown attention layer {layer!r}")
        return LAYER_NAMES.index(layer)
    idx = int(layer)
    if not 1 <= idx <= len(LAYER_NAMES):
        raise ConfigError(f"layer index must be in 1..{len(LAYER_NAMES)}")
    return idx - 1


def _split_heads(mat, heads):
    n, c = mat.shape
    return mat.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _branch_maps(lt, branch):
    """Per-head attention maps [heads, T, T_kv] rebuilt from the taps."""
    if branch == "self":
        q, k = lt.self_q.data, lt.self_k.data
    elif branch == "cross":
        q, k = lt.cross_q.data, lt.cross_k.data
    else:
        raise ConfigError(f"unknown attention branch {branch!r}")
    qh = _split_heads(q, lt.heads)
    kh = _split_heads(k, lt.heads)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(qh.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def _check_tap_shapes(taps_a, taps_b):
    a, b = taps_a.layers, taps_b.layers
    if len(a) != len(b):
        raise DimensionError("tap layer counts differ")
    for la, lb in zip(a, b):
        for name in ("self_q", "self_k", "self_v", "cross_q", "cross_k", "cross_v"):
            if getattr(la, name).data.shape != getattr(lb, name).data.shape:
                raise DimensionError(f"tap shapes differ at {la.name}.{name}")


def attention_divergence(taps_a, taps_b):
    """Mean (1 - cosine) between the two passes' attention maps.

    Rows of every layer's softmax(q k^T / sqrt(d)) are compared head by
    head and pooled; the self and cross branch means are averaged.
    Symmetric, zero exactly when all maps coincide, at most 2.
    """
    _check_tap_shapes(taps_a, taps_b)
    branch_means = []
    for branch in BRANCHES:
        total, count = 0.0, 0
        for la, lb in zip(taps_a.layers, taps_b.layers):
            ma = _branch_maps(la, branch)
            ma = ma.reshape(-1, ma.shape[-1])
            mb = _branch_maps(lb, branch).reshape(ma.shape)
            # softmax rows are positive so the norms never vanish;
            # on unit rows 1 - cos equals half the squared distance,
            # which is exactly zero for identical maps
            ma /= np.linalg.norm(ma, axis=1, keepdims=True)
            mb /= np.linalg.norm(mb, axis=1, keepdims=True)
            diff = ma - mb
            total += 0.5 * float(np.sum(diff * diff))
            count += diff.shape[0]
        branch_means.append(total / count)
    return sum(branch_means) / len(branch_means)


def attention_block_output(taps, layer, branch):
    """Token-feature matrix [T, C] the chosen block's branch produced."""
    lt = taps.layers[_layer_index(taps, layer)]
    v = lt.cross_v.data if branch == "cross" else lt.self_v.data
    maps = _branch_maps(lt, branch)
    mixed = maps @ _split_heads(v, lt.heads)
    heads, n, d = mixed.shape
    return mixed.transpose(1, 0, 2).reshape(n, heads * d)


def bilinear_resize(grid, out_shape):
    """Separable bilinear resample with corner-aligned endpoints."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError("bilinear_resize expects a 2-D grid")
    h, w = grid.shape
    oh, ow = out_shape

    def axis_coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=int)
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(src.astype(int), n_in - 2)
        return src - i0, i0

    fy, y0 = axis_coords(h, oh)
    fx, x0 = axis_coords(w, ow)
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, np.minimum(x0 + 1, w - 1))]
    bl = grid[np.ix_(np.minimum(y0 + 1, h - 1), x0)]
    br = grid[np.ix_(np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1))]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def feature_pca_map(features, grid, seed=0):
    """First-PC token scores as a normalized 16 x 16 heatmap.

    features: [T, C] with T equal to the grid's cell count. Returns
    (heatmap, degenerate). Power iteration runs 100 rounds from a
    seeded start; the score vector's largest-magnitude entry is made
    positive so reruns and mirrored features agree. Zero-variance
    features short-circuit to a flat 0.5 map flagged degenerate.
    """
    a = np.asarray(features, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("features must be a [tokens, channels] matrix")
    gh, gw = grid
    if a.shape[0] != gh * gw:
        raise DimensionError("token count does not match the spatial grid")
    centered = a - a.mean(axis=0, keepdims=True)
    flat = np.full((HEATMAP_SIZE, HEATMAP_SIZE), 0.5)
    if not centered.any():
        return flat, True
    v = np.random.default_rng(seed).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(100):
        w = centered.T @ (centered @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return flat, True  # started inside the null space
        v = w / norm
    scores = centered @ v
    peak = np.argmax(np.abs(scores))
    if scores[peak] < 0:
        scores = -scores
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return flat, True
    heat = bilinear_resize(scores.reshape(gh, gw), (HEATMAP_SIZE, HEATMAP_SIZE))
    heat = (heat - heat.min()) / (heat.max() - heat.min())
    return heat, False


def attention_pca_map(taps, layer, branch, seed=0):
    """Heatmap of the chosen attention block output; see feature_pca_map."""
    if branch not in BRANCHES:
        raise ConfigError(f"unknown attention branch {branch!r}")
    lt = taps.layers[_layer_index(taps, layer)]
    return feature_pca_map(attention_block_output(taps, layer, branch), lt.grid, seed)


def heatmap_to_pgm(heat):
    """8-bit binary PGM encoding of a [0, 1] heatmap."""
    h = np.asarray(heat)
    if h.min() < 0 or h.max() > 1:
        raise ContractError("heatmap must lie in [0, 1]")
    levels = np.round(h * 255).astype(np.uint8)
    header = f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii")
    return header + levels.tobytes()


def gaussian_purify(image, sigma, seed=0):
    """Adds seeded N(0, sigma^2) pixel noise and clips back to [0, 1]."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    x = np.asarray(image, dtype=np.float64)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=x.shape)
    return np.clip(x + noise, 0.0, 1.0)
