"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the denoiser and the protection
objectives need; there is no broadcasting beyond what those call sites
use. Every operation runs in float64, validates its operand shapes,
checks its output for NaN/Inf, and records a backward closure. The
graph is rebuilt on every forward pass: each tensor keeps references to
its parents and a creation index, and `backward` walks the ancestors of
the loss in exact reverse creation order, accumulating cotangents by
addition. Leaves that do not participate in the loss simply keep a
`None` gradient, which `grad_of` reports as zeros.

Tensors are cheap wrappers around numpy arrays. The public constructor
copies its input so later mutation of the source array cannot corrupt a
recorded graph; internal op results wrap freshly allocated arrays
without copying. Tensor data must never be mutated in place once the
tensor has been used in an op.
"""

import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_counter = itertools.count()


def _check_finite(arr):
    # One reduction pass instead of isfinite + all: any NaN/Inf in the
    # array forces the sum itself to NaN or Inf.
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.sum(arr))
    if not math.isfinite(total):
        if arr.size and np.all(np.isfinite(arr)):
            return  # astronomically large but finite values; let them through
        raise NumericError("non-finite value produced")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "_id")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.shape != ():
            raise ContractError("item() requires a scalar tensor")
        return float(self.data)

    def detach(self):
        """New leaf sharing this tensor's values, cut from the graph."""
        return _wrap(self.data, (), None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operators cover the elementwise cases; everything else is a module
    # function so the op vocabulary stays explicit.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(data, parents, bw):
    """Wrap an op result without copying. `data` must be freshly owned."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr)
    out.data = arr
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents) if out.requires_grad else ()
    out._bw = bw if out.requires_grad else None
    out._id = next(_counter)
    return out


def _acc(t, g):
    # Pure `+` so contribution arrays shared between parents stay intact.
    t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Propagate d(loss)/d(node) to every ancestor of `loss`.

    `loss` must be scalar. Nodes are visited in exact reverse creation
    order, which is a valid topological order for any graph built by
    these primitives.
    """
    if loss.data.shape != ():
        raise ContractError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any differentiable leaf")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t._parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)
    loss.grad = np.ones((), dtype=np.float64)
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        if t._bw is not None and t.grad is not None:
            t._bw(t.grad)


def grad_of(t):
    """Gradient array for a leaf; exact zeros if it never reached the loss."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


def add(a, b):
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, g)

    return _wrap(a.data + b.data, (a, b), bw)


def sub(a, b):
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            _acc(a, g)
        if b.requires_grad:
            _acc(b, -g)

    return _wrap(a.data - b.data, (a, b), bw)


def mul(a, b):
    _same_shape(a, b, "mul")
    with np.errstate(over="ignore"):
        prod = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)

    return _wrap(prod, (a, b), bw)


def neg(a):
    def bw(g):
        _acc(a, -g)

    return _wrap(-a.data, (a,), bw)


def scale(a, c):
    c = float(c)
    if not math.isfinite(c):
        raise NumericError("scale factor must be finite")

    def bw(g):
        _acc(a, g * c)

    return _wrap(a.data * c, (a,), bw)


def add_scalar(a, c):
    c = float(c)
    if not math.isfinite(c):
        raise NumericError("added scalar must be finite")

    def bw(g):
        _acc(a, g)

    return _wrap(a.data + c, (a,), bw)


def silu(a):
    x = a.data
    # stable sigmoid with a single exp pass
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _acc(a, g * (s + x * s * (1.0 - s)))

    return _wrap(x * s, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes.

    Two forms only: stacked operands with identical leading axes, or a
    rank-2 right operand applied across every stacked matrix of the
    left (the linear-layer case). For [M x K] @ [K x N] the result is
    [M x N]. No other broadcasting.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul requires rank >= 2 operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul: inner dims differ {ad.shape} vs {bd.shape}"
        )
    weight_case = bd.ndim == 2 and ad.ndim > 2
    if not weight_case and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(
            f"matmul: leading dims differ {ad.shape} vs {bd.shape}"
        )

    def bw(g):
        if a.requires_grad:
            _acc(a, np.matmul(g, np.swapaxes(bd, -1, -2)))
        if b.requires_grad:
            if weight_case:
                k, n = bd.shape
                _acc(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _acc(b, np.matmul(np.swapaxes(ad, -1, -2), g))

    return _wrap(np.matmul(ad, bd), (a, b), bw)


def softmax_lastdim(a):
    x = a.data
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last axis")
    y = x - np.max(x, axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _acc(a, y * (g - dot))

    return _wrap(y, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine pair.

    gamma and beta are 1-D with length equal to the last axis. The
    normalized activations have per-vector mean 0; variance sits at
    var/(var+eps), i.e. within eps of 1 for unit-scale input.
    """
    x = a.data
    c = x.shape[-1] if x.ndim else 0
    if c == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("layer_norm affine params must match last axis")
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    with np.errstate(over="ignore"):
        var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _acc(gamma, np.sum(g * xhat, axis=tuple(range(x.ndim - 1))))
        if beta.requires_grad:
            _acc(beta, np.sum(g, axis=tuple(range(x.ndim - 1))))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            _acc(a, inv * (gx - m1 - xhat * m2))

    return _wrap(y, (a, gamma, beta), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _wrap(a.data.reshape(shape).copy(), (a,), bw)


def transpose(a, axes):
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for rank {a.data.ndim}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(a, g.transpose(inv))

    return _wrap(a.data.transpose(axes).copy(), (a,), bw)


def concat(parts, axis):
    if not parts:
        raise DimensionError("concat of zero tensors")
    axis = int(axis)
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(
            i != axis % len(ref) and s[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError("concat: shapes differ off the join axis")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _acc(p, g[tuple(sl)])

    return _wrap(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


# ---------------------------------------------------------------------------
# spatial ops; feature maps are [B, C, H, W] or [C, H, W]


def _spatial4d(x, opname):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{opname} expects a [C,H,W] or [B,C,H,W] operand")


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation with square odd kernels (k in {1, 3}).

    Output height is (H + 2 pad - k) / stride + 1, which must be
    integral. Implemented as gather + one GEMM so float64 batches stay
    fast; the backward pass reuses the gathered patches.
    """
    stride = int(stride)
    pad = int(pad)
    if stride < 1 or pad < 0:
        raise ContractError("conv2d: stride >= 1 and pad >= 0 required")
    xd, squeezed = _spatial4d(x.data, "conv2d")
    wd = w.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise DimensionError("conv2d weight must be [O, C, k, k]")
    k = wd.shape[2]
    if k not in (1, 3):
        raise DimensionError(f"conv2d supports k in {{1, 3}}, got {k}")
    bsz, cin, h, wid = xd.shape
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise DimensionError(
            f"conv2d: weight expects {wd.shape[1]} channels, input has {cin}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError("conv2d bias must be [O]")
    if (h + 2 * pad - k) % stride or (wid + 2 * pad - k) % stride:
        raise DimensionError("conv2d: output extent is not integral")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError("conv2d: empty output")

    if pad:
        xp = np.zeros((bsz, cin, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + wid] = xd
    else:
        xp = xd
    cols = np.empty((cin, k, k, bsz, ho, wo), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[
                :, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride
            ].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(cin * k * k, bsz * ho * wo)
    out2 = wd.reshape(cout, cin * k * k) @ cols2
    out = out2.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if squeezed:
        out = out[0]

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g4 = g[None] if squeezed else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(cout, bsz * ho * wo)
        if bias is not None and bias.requires_grad:
            _acc(bias, g4.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            _acc(w, (g2 @ cols2.T).reshape(cout, cin, k, k))
        if x.requires_grad:
            dcols = (wd.reshape(cout, cin * k * k).T @ g2).reshape(
                cin, k, k, bsz, ho, wo
            )
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[
                        :, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride
                    ] += dcols[:, di, dj].transpose(1, 0, 2, 3)
            dx = dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp
            _acc(x, dx[0] if squeezed else dx)

    return _wrap(out, parents, bw)


def avgpool2x2(x):
    xd, squeezed = _spatial4d(x.data, "avgpool2x2")
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError("avgpool2x2 requires even spatial extents")
    y = xd.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = g[None] if squeezed else g
        up = np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3) * 0.25
        _acc(x, up[0] if squeezed else up)

    return _wrap(y[0] if squeezed else y, (x,), bw)


def upsample_nearest2x(x):
    xd, squeezed = _spatial4d(x.data, "upsample_nearest2x")
    y = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def bw(g):
        g4 = g[None] if squeezed else g
        b, c, h2, w2 = g4.shape
        gx = g4.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        _acc(x, gx[0] if squeezed else gx)

    return _wrap(y[0] if squeezed else y, (x,), bw)


# ---------------------------------------------------------------------------
# lookups, biases, reductions


def embedding(ids, table):
    """Rows of `table` gathered by integer id array; differentiable in the table."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    vocab = table.data.shape[0]
    if table.data.ndim != 2:
        raise DimensionError("embedding table must be [V, D]")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ContractError(f"token id outside vocabulary of {vocab}")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _acc(table, gt)

    return _wrap(out.copy(), (table,), bw)


def add_bias_lastdim(x, b):
    d = x.data.shape[-1] if x.data.ndim else 0
    if b.data.shape != (d,):
        raise DimensionError("bias must match the last axis")

    def bw(g):
        if x.requires_grad:
            _acc(x, g)
        if b.requires_grad:
            _acc(b, g.sum(axis=tuple(range(g.ndim - 1))))

    return _wrap(x.data + b.data, (x, b), bw)


def add_spatial_bias(x, v):
    """Add a per-(batch, channel) bias [B, C] across spatial axes of [B, C, H, W]."""
    if x.data.ndim != 4 or v.data.shape != x.data.shape[:2]:
        raise DimensionError("add_spatial_bias expects [B,C,H,W] and [B,C]")

    def bw(g):
        if x.requires_grad:
            _acc(x, g)
        if v.requires_grad:
            _acc(v, g.sum(axis=(2, 3)))

    return _wrap(x.data + v.data[:, :, None, None], (x, v), bw)


def sum_all(a):
    def bw(g):
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _wrap(np.sum(a.data), (a,), bw)


def mean_all(a):
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")

    def bw(g):
        _acc(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _wrap(np.mean(a.data), (a,), bw)


def frobenius_sq(a, b):
    """Sum of squared differences, as one scalar tensor."""
    d = sub(a, b)
    return sum_all(mul(d, d))


# ---------------------------------------------------------------------------
# verification


def gradient_check(f, x, step=1e-5, coords=20, seed=0):
    """Max relative error between backward() and central differences.

    `f` maps a tensor to a scalar tensor. A deterministic sample of
    `coords` coordinates of `x` is probed with symmetric steps; the
    relative error at a coordinate is |analytic - numeric| divided by
    (|numeric| + 1e-12). Step sizes outside [1e-7, 1e-3] are rejected
    as either noise- or truncation-dominated.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ContractError("gradient_check step must lie in [1e-7, 1e-3]")
    base = np.array(x.data, dtype=np.float64, copy=True)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ContractError("gradient_check needs a scalar-valued f")
    backward(out)
    analytic = grad_of(leaf).reshape(-1)

    rng = np.random.default_rng(seed)
    n = base.size
    k = min(int(coords), n)
    picked = rng.choice(n, size=k, replace=False)
    flat = base.reshape(-1)
    worst = 0.0
    for i in picked:
        keep = flat[i]
        flat[i] = keep + step
        fp = f(Tensor(base)).item()
        flat[i] = keep - step
        fm = f(Tensor(base)).item()
        flat[i] = keep
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("non-finite objective during finite differences")
        numeric = (fp - fm) / (2.0 * step)
        rel = abs(analytic[i] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
