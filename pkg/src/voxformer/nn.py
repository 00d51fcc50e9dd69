"""Neural operators: 3D convolution and pooling, normalization layers, dropout,
linear/attention/encoder blocks, and the cross-entropy loss.

Layers are small ``Module`` objects holding parameter Tensors; the heavy
kernels (conv3d, maxpool3d, adaptive pooling) are single recorded graph nodes
backed by im2col + BLAS rather than per-voxel graphs.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special as _special

from .tensor import (Tensor, ShapeError, _node, add, div, gelu, matmul, mul,
                     reshape, softmax, sub, tmean, transpose, tsqrt)


# ---------------------------------------------------------------------------
# parameter initialization

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std, sampled by inverse-CDF (no rejection loop)."""
    lo, hi = _special.ndtr(-2.0), _special.ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return (_special.ndtri(u) * std).astype(dtype)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int,
                   slope: float = 0.2, dtype=np.float32) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    std = gain / math.sqrt(fan_in)
    return (rng.standard_normal(size=shape) * std).astype(dtype)


def _default_rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


# ---------------------------------------------------------------------------
# module base

class Module:
    """Minimal layer base: tracks Tensor attributes and submodules by name."""

    def __init__(self):
        self.training = True

    def named_tensors(self, prefix: str = ""):
        """All Tensor state (parameters and buffers), in attribute order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{prefix}{name}.{i}.")

    def named_parameters(self, prefix: str = ""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into this module's tensors, matched by name."""
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeError(f"state {name!r}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# linear

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W^T (+ b) over the trailing axis; W is [out, in]."""
    n_in = weight.shape[1]
    if x.shape[-1] != n_in:
        raise ShapeError(f"linear input extent {x.shape} does not match weight {weight.shape}")
    out = np.matmul(x.data, weight.data.T)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.matmul(g, weight.data))
        if weight.requires_grad:
            g2 = g.reshape(-1, weight.shape[0])
            x2 = x.data.reshape(-1, n_in)
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, weight.shape[0]).sum(axis=0))

    return _node(out, parents, backward, "linear")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = _default_rng(rng)
        self.weight = Tensor(trunc_normal(rng, (out_features, in_features), dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# 3D convolution (im2col + GEMM)

def conv3d_output_extents(extents: Sequence[int], kernel: Sequence[int],
                          stride: int, padding: int) -> tuple[int, ...]:
    out = tuple((e + 2 * padding - k) // stride + 1 for e, k in zip(extents, kernel))
    if any(o < 1 for o in out):
        raise ShapeError(f"conv3d output extent not positive: input {tuple(extents)}, "
                         f"kernel {tuple(kernel)}, stride {stride}, padding {padding} -> {out}")
    return out


def _im2col(xp: np.ndarray, kernel: tuple[int, int, int], stride: int,
            out_sp: tuple[int, int, int]) -> np.ndarray:
    n, c = xp.shape[:2]
    kd, kh, kw = kernel
    do, ho, wo = out_sp
    p = do * ho * wo
    cols = np.empty((n, c * kd * kh * kw, p), dtype=xp.dtype)
    view = cols.reshape(n, c, kd * kh * kw, p)
    s = stride
    i = 0
    for a in range(kd):
        for b in range(kh):
            for cc in range(kw):
                sl = xp[:, :, a:a + s * do:s, b:b + s * ho:s, cc:cc + s * wo:s]
                view[:, :, i, :] = sl.reshape(n, c, p)
                i += 1
    return cols


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,D,H,W] with [Cout,Cin,kd,kh,kw], zero padding."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d needs 5-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, cw, kd, kh, kw = weight.shape
    if cin != cw:
        raise ShapeError(f"conv3d channel mismatch: input has {cin}, weight expects {cw}")
    out_sp = conv3d_output_extents((d, h, w), (kd, kh, kw), stride, padding)
    pd = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (pd, pd), (pd, pd))) if pd else x.data
    cols = _im2col(xp, (kd, kh, kw), stride, out_sp)
    wm = weight.data.reshape(cout, -1)
    out = np.matmul(wm, cols)                          # [N, Cout, P]
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, *out_sp)
    parents = (x, weight) if bias is None else (x, weight, bias)
    padded_sp = xp.shape[2:]

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, cout, -1)
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)                # [N, Cin*k3, P]
            dxp = np.zeros((n, cin) + padded_sp, dtype=g.dtype)
            dv = dcols.reshape(n, cin, kd * kh * kw, *out_sp)
            s = stride
            i = 0
            do, ho, wo = out_sp
            for a in range(kd):
                for b in range(kh):
                    for cc in range(kw):
                        dxp[:, :, a:a + s * do:s, b:b + s * ho:s, cc:cc + s * wo:s] += dv[:, :, i]
                        i += 1
            if pd:
                dxp = dxp[:, :, pd:pd + d, pd:pd + h, pd:pd + w]
            x._accumulate(dxp)

    return _node(out, parents, backward, "conv3d")


class Conv3d(Module):
    """3D convolution layer; kernel may be an int (cubic) or a (kd,kh,kw) tuple."""

    def __init__(self, in_channels: int, out_channels: int, kernel=3,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 slope: float = 0.2):
        super().__init__()
        rng = _default_rng(rng)
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        if any(e < 1 for e in k):
            raise ValueError(f"kernel extents must be >= 1, got {k}")
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = in_channels * int(np.prod(k))
        self.weight = Tensor(kaiming_normal(rng, (out_channels, in_channels) + k,
                                            fan_in, slope=slope, dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# ---------------------------------------------------------------------------
# pooling

def maxpool3d_output_extents(extents: Sequence[int], kernel: int, stride: int) -> tuple[int, ...]:
    if any(e < kernel for e in extents):
        raise ShapeError(f"maxpool3d window {kernel} larger than input extents {tuple(extents)}")
    return tuple((e - kernel) // stride + 1 for e in extents)


def maxpool3d(x: Tensor, kernel: int = 3, stride: int | None = None,
              return_indices: bool = False):
    """Per-window max over [N,C,D,H,W]; stride defaults to the kernel size.

    Gradient goes to the argmax voxel; ties go to the first element of the
    window in (d,h,w) row-major order.  With ``return_indices`` the flat
    spatial index of each winner is also returned (numpy int array).
    """
    k = int(kernel)
    s = k if stride is None else int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    n, c, d, h, w = x.shape
    do, ho, wo = maxpool3d_output_extents((d, h, w), k, s)
    win = sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    wf = win.reshape(n, c, do, ho, wo, k * k * k)
    arg = wf.argmax(axis=-1)
    out = np.take_along_axis(wf, arg[..., None], axis=-1)[..., 0]

    off_d = arg // (k * k)
    off_h = (arg // k) % k
    off_w = arg % k
    dd = np.arange(do)[:, None, None] * s + off_d
    hh = np.arange(ho)[None, :, None] * s + off_h
    ww = np.arange(wo)[None, None, :] * s + off_w
    spatial_idx = (dd * h + hh) * w + ww                    # flat within (D,H,W)

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        base = (np.arange(n)[:, None, None, None, None] * c
                + np.arange(c)[None, :, None, None, None]) * (d * h * w)
        lin = (base + spatial_idx).reshape(-1)
        dx = np.bincount(lin, weights=g.reshape(-1).astype(np.float64),
                         minlength=x.size)
        x._accumulate(dx.reshape(x.shape).astype(x.dtype))

    out_t = _node(np.ascontiguousarray(out), (x,), backward, "maxpool3d")
    if return_indices:
        return out_t, spatial_idx
    return out_t


class MaxPool3d(Module):
    def __init__(self, kernel: int = 3, stride: int | None = None):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = self.kernel if stride is None else int(stride)

    def forward(self, x: Tensor) -> Tensor:
        return maxpool3d(x, self.kernel, self.stride)


def _adaptive_bounds(length: int, out: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(out)
    starts = (i * length) // out
    ends = -((-(i + 1) * length) // out)                   # ceil
    return starts, ends


def adaptive_avg_pool3d(x: Tensor, output: tuple[int, int, int]) -> Tensor:
    """Average-pool each spatial axis down to a fixed extent (input >= output)."""
    n, c, d, h, w = x.shape
    od, oh, ow = output
    for ext, o in zip((d, h, w), output):
        if ext < o:
            raise ShapeError(f"adaptive_avg_pool3d cannot expand extent {ext} to {o}")
    bounds = [_adaptive_bounds(d, od), _adaptive_bounds(h, oh), _adaptive_bounds(w, ow)]

    def pool_axis(arr: np.ndarray, axis: int, starts, ends) -> np.ndarray:
        ps = np.concatenate([np.zeros_like(arr.take([0], axis=axis)),
                             np.cumsum(arr, axis=axis)], axis=axis)
        sums = ps.take(ends, axis=axis) - ps.take(starts, axis=axis)
        shape = [1] * arr.ndim
        shape[axis] = len(starts)
        return sums / (ends - starts).reshape(shape)

    out = x.data
    for axis, (starts, ends) in zip((2, 3, 4), bounds):
        out = pool_axis(out, axis, starts, ends)

    def unpool_axis(g: np.ndarray, axis: int, starts, ends, full: int) -> np.ndarray:
        shape = list(g.shape)
        shape[axis] = full
        buf = np.zeros(shape, dtype=g.dtype)
        idx_out = [slice(None)] * g.ndim
        idx_in = [slice(None)] * g.ndim
        for i, (s0, e0) in enumerate(zip(starts, ends)):
            idx_out[axis] = slice(s0, e0)
            idx_in[axis] = slice(i, i + 1)
            buf[tuple(idx_out)] += g[tuple(idx_in)] / (e0 - s0)
        return buf

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        for axis, (starts, ends), full in zip((4, 3, 2), bounds[::-1], (w, h, d)):
            g = unpool_axis(g, axis, starts, ends, full)
        x._accumulate(g)

    return _node(np.ascontiguousarray(out.astype(x.dtype)), (x,), backward, "adaptive_avg_pool3d")


# ---------------------------------------------------------------------------
# normalization

def _affine(xhat: Tensor, gamma: Tensor | None, beta: Tensor | None,
            channel_axis: int) -> Tensor:
    if gamma is None:
        return xhat
    shape = [1] * xhat.ndim
    shape[channel_axis] = gamma.size
    out = mul(xhat, reshape(gamma, shape))
    return add(out, reshape(beta, shape))


def _normalize(x: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    mu = tmean(x, axis=axes, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=axes, keepdims=True)
    return div(xc, tsqrt(add(var, eps)))


class InstanceNorm3d(Module):
    """Per (sample, channel) normalization over (D,H,W); identical train/eval."""

    def __init__(self, num_features: int, eps: float = 1e-5, affine: bool = True,
                 dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.num_features = num_features
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True) if affine else None
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.num_features:
            raise ShapeError(f"expected {self.num_features} channels, got shape {x.shape}")
        return _affine(_normalize(x, (2, 3, 4), self.eps), self.gamma, self.beta, 1)


class BatchNorm3d(Module):
    """Per-channel normalization over (N,D,H,W) with running statistics.

    Training uses batch statistics (biased variance) and updates the running
    estimates; eval normalizes with the running estimates.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 affine: bool = True, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True) if affine else None
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True) if affine else None
        self.running_mean = Tensor(np.zeros(num_features, dtype=dtype))
        self.running_var = Tensor(np.ones(num_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.num_features:
            raise ShapeError(f"expected {self.num_features} channels, got shape {x.shape}")
        if self.training:
            out = _normalize(x, (0, 2, 3, 4), self.eps)
            n, _, d, h, w = x.shape
            count = n * d * h * w
            mean = x.data.mean(axis=(0, 2, 3, 4))
            var = x.data.var(axis=(0, 2, 3, 4))
            if count > 1:
                var = var * count / (count - 1)
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mean).astype(x.dtype)
            self.running_var.data = ((1 - m) * self.running_var.data + m * var).astype(x.dtype)
        else:
            shape = (1, self.num_features, 1, 1, 1)
            mu = Tensor(self.running_mean.data.reshape(shape))
            sd = Tensor(np.sqrt(self.running_var.data.reshape(shape) + x.dtype.type(self.eps)))
            out = div(sub(x, mu), sd)
        return _affine(out, self.gamma, self.beta, 1)


class LayerNorm(Module):
    """Normalization over the trailing (embedding) axis with affine params."""

    def __init__(self, normalized_dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.normalized_dim = normalized_dim
        self.eps = eps
        self.gamma = Tensor(np.ones(normalized_dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(normalized_dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.normalized_dim:
            raise ShapeError(f"expected trailing extent {self.normalized_dim}, got {x.shape}")
        return _affine(_normalize(x, (x.ndim - 1,), self.eps), self.gamma, self.beta, x.ndim - 1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return _affine(_normalize(x, (x.ndim - 1,), eps), gamma, beta, x.ndim - 1)


# ---------------------------------------------------------------------------
# dropout

def dropout3d(x: Tensor, p: float = 0.4, training: bool = True,
              rng: np.random.Generator | None = None) -> Tensor:
    """Zero whole channels with probability p; survivors scale by 1/(1-p).

    Inverted convention: eval mode is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = _default_rng(rng)
    n, c = x.shape[:2]
    keep = (rng.random((n, c)) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    mask = keep.reshape((n, c) + (1,) * (x.ndim - 2))
    return mul(x, Tensor(mask))


class Dropout3d(Module):
    def __init__(self, p: float = 0.4, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = _default_rng(rng)

    def forward(self, x: Tensor) -> Tensor:
        return dropout3d(x, self.p, self.training, self.rng)


# ---------------------------------------------------------------------------
# attention / encoder

class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over [N,T,E] with separate Q/K/V/out projections."""

    def __init__(self, embed_dim: int, num_heads: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if embed_dim % num_heads:
            raise ShapeError(f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")
        rng = _default_rng(rng)
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q = Linear(embed_dim, embed_dim, rng=rng, dtype=dtype)
        self.k = Linear(embed_dim, embed_dim, rng=rng, dtype=dtype)
        self.v = Linear(embed_dim, embed_dim, rng=rng, dtype=dtype)
        self.out = Linear(embed_dim, embed_dim, rng=rng, dtype=dtype)

    def _split_heads(self, t: Tensor) -> Tensor:
        n, tok, _ = t.shape
        return transpose(reshape(t, (n, tok, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.embed_dim:
            raise ShapeError(f"expected embed dim {self.embed_dim}, got {tokens.shape}")
        n, tok, e = tokens.shape
        q = self._split_heads(self.q(tokens))
        k = self._split_heads(self.k(tokens))
        v = self._split_heads(self.v(tokens))
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
        attn = softmax(scores)
        ctx = matmul(attn, v)                                  # [N, heads, T, hd]
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, tok, e))
        return self.out(merged)


class Mlp(Module):
    def __init__(self, embed_dim: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = _default_rng(rng)
        self.fc1 = Linear(embed_dim, hidden_dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden_dim, embed_dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer block: attention and MLP sublayers with residuals."""

    def __init__(self, embed_dim: int, num_heads: int, mlp_ratio: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = _default_rng(rng)
        self.norm1 = LayerNorm(embed_dim, dtype=dtype)
        self.attn = MultiHeadAttention(embed_dim, num_heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(embed_dim, dtype=dtype)
        self.mlp = Mlp(embed_dim, embed_dim * mlp_ratio, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.mlp(self.norm2(x)))


class TransformerEncoder(Module):
    """Stack of pre-norm blocks followed by a final LayerNorm; depth 0 is norm only."""

    def __init__(self, embed_dim: int, num_heads: int, depth: int,
                 mlp_ratio: int = 4, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        if depth < 0:
            raise ValueError("depth must be >= 0")
        rng = _default_rng(rng)
        self.blocks = [EncoderBlock(embed_dim, num_heads, mlp_ratio, rng=rng, dtype=dtype)
                       for _ in range(depth)]
        self.norm = LayerNorm(embed_dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of [K,N] logits against integer labels.

    Computed through log-sum-exp; the gradient is (softmax - onehot) / K.
    """
    y = np.asarray(labels)
    if y.ndim != 1 or logits.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} and labels {y.shape} do not align")
    n_classes = logits.shape[1]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes}): {y}")
    y = y.astype(np.int64)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    k = z.shape[0]
    loss = float((lse[:, 0] - z[np.arange(k), y]).mean())

    def backward(g: np.ndarray) -> None:
        if not logits.requires_grad:
            return
        gs = float(np.asarray(g).reshape(-1)[0])
        p = np.exp(z - lse)
        p[np.arange(k), y] -= 1.0
        logits._accumulate((p * (gs / k)).astype(logits.dtype))

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")

