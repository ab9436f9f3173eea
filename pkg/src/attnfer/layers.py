"""Layers with hand-written forward and backward passes.

Each layer is a :class:`Module`.  ``forward(x, train)`` caches what backward
needs; ``backward(dy)`` returns the gradient with respect to the input and
*adds* parameter gradients into ``Param.grad``.  Feature maps are N,C,H,W.

The functional kernels (``conv2d_forward`` and friends) are exposed as well so
attention blocks can reuse them without the module bookkeeping.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .activations import act_backward, act_forward, as_kind
from .errors import BadLabel, DegenerateOutput, ShapeMismatch, StaleCache

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Param:
    """A learnable array and its gradient buffer (same shape)."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        # np.zeros is lazily backed, so untouched buffers cost no memory
        self.grad = np.zeros(self.value.shape)

    @property
    def size(self):
        return self.value.size

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class. Subclasses set ``self.params`` and/or ``self.children``."""

    params: tuple = ()
    children: tuple = ()
    buffers: tuple = ()

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def parameters(self):
        out = list(self.params)
        for child in self.children:
            out.extend(child.parameters())
        return out

    def state_buffers(self):
        """Non-learnable state (BatchNorm running statistics) in registry order."""
        out = list(self.buffers)
        for child in self.children:
            out.extend(child.state_buffers())
        return out

    def modules(self):
        yield self
        for child in self.children:
            yield from child.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x, train=True):
        return self.forward(x, train)

    def _need(self, cache):
        if cache is None:
            raise StaleCache(f"{type(self).__name__}.backward called without a train-mode forward")
        return cache


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeMismatch(f"{what} expects a rank-{rank} input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: object = "same"
    use_bias: bool = True

    def __post_init__(self):
        for name in ("kernel", "stride"):
            v = getattr(self, name)
            if isinstance(v, int):
                v = (v, v)
            v = tuple(int(a) for a in v)
            if len(v) != 2 or min(v) < 1:
                raise ValueError(f"{name} must be two positive ints, got {v}")
            object.__setattr__(self, name, v)

    def pads(self):
        kh, kw = self.kernel
        if self.padding == "valid":
            return 0, 0
        if self.padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("'same' padding needs odd kernel sizes")
            return (kh - 1) // 2, (kw - 1) // 2
        ph, pw = self.padding
        return int(ph), int(pw)


def conv_output_hw(h, w, spec):
    ph, pw = spec.pads()
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1 or h + 2 * ph < kh or w + 2 * pw < kw:
        raise DegenerateOutput(f"input {h}x{w} too small for kernel {spec.kernel} / padding {(ph, pw)}")
    return ho, wo


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    # (N, C, Ho, Wo, kh, kw) -> rows (N*Ho*Wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, weight, bias, spec):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,kh,kw).

    Returns ``(y, cache)``.  Output size is ``floor((H + 2p - k) / s) + 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_rank(x, 4, "conv2d")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c or (kh, kw) != spec.kernel or o != spec.out_channels:
        raise ShapeMismatch(f"weight {weight.shape} does not fit input {x.shape} / {spec}")
    if bias is not None and bias.shape != (o,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({o},)")
    ho, wo = conv_output_hw(h, w, spec)
    ph, pw = spec.pads()
    sh, sw = spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    if kh == 1 and kw == 1:
        xs = xp[:, :, ::sh, ::sw][:, :, :ho, :wo]
        y = np.einsum("nchw,oc->nohw", xs, weight[:, :, 0, 0], optimize=True)
        cols = None
    else:
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
        y = (cols @ weight.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias[None, :, None, None]
    cache = (x.shape, xp if cols is None else None, cols, weight, spec, (ho, wo))
    return y, cache


def conv2d_backward(cache, dy):
    """Returns ``(dx, dweight, dbias)`` for the forward that produced ``cache``."""
    x_shape, xp, cols, weight, spec, (ho, wo) = cache
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    if dy.shape != (n, o, ho, wo):
        raise ShapeMismatch(f"upstream {dy.shape} != forward output {(n, o, ho, wo)}")
    ph, pw = spec.pads()
    sh, sw = spec.stride
    db = dy.sum(axis=(0, 2, 3))
    hp, wp = h + 2 * ph, w + 2 * pw
    dxp = np.zeros((n, c, hp, wp))
    if cols is None:
        xs = xp[:, :, ::sh, ::sw][:, :, :ho, :wo]
        dw = np.einsum("nohw,nchw->oc", dy, xs, optimize=True)[:, :, None, None]
        dxs = np.einsum("nohw,oc->nchw", dy, weight[:, :, 0, 0], optimize=True)
        dxp[:, :, 0 : sh * ho : sh, 0 : sw * wo : sw] = dxs
    else:
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (dy2.T @ cols).reshape(weight.shape)
        dcols = (dy2 @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(dx), dw, db


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding="same", bias=True, name="conv"):
        self.spec = ConvSpec(out_channels, kernel, stride, padding, bias)
        kh, kw = self.spec.kernel
        self.in_channels = in_channels
        self.weight = Param(f"{name}.weight", np.zeros((out_channels, in_channels, kh, kw)))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels)) if bias else None
        self.params = (self.weight,) if self.bias is None else (self.weight, self.bias)
        self._cache = None

    @property
    def fan_in(self):
        return self.in_channels * self.spec.kernel[0] * self.spec.kernel[1]

    def forward(self, x, train=True):
        b = None if self.bias is None else self.bias.value
        y, cache = conv2d_forward(x, self.weight.value, b, self.spec)
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(self._need(self._cache), dy)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------


def dense_forward(x, weight, bias):
    """``y = x @ W + b`` with ``W`` of shape (F, G)."""
    x = np.asarray(x, dtype=np.float64)
    _check_rank(x, 2, "dense")
    if weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"input {x.shape} does not fit weight {weight.shape}")
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"bias {bias.shape} does not fit weight {weight.shape}")
        y = y + bias
    return y


def dense_backward(x, weight, dy):
    """Returns ``(dx, dweight, dbias)``."""
    if dy.shape != (x.shape[0], weight.shape[1]):
        raise ShapeMismatch(f"upstream {dy.shape} != forward output {(x.shape[0], weight.shape[1])}")
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


class Dense(Module):
    def __init__(self, in_features, out_features, bias=True, name="fc"):
        self.weight = Param(f"{name}.weight", np.zeros((in_features, out_features)))
        self.bias = Param(f"{name}.bias", np.zeros(out_features)) if bias else None
        self.params = (self.weight,) if self.bias is None else (self.weight, self.bias)
        self._x = None

    @property
    def fan_in(self):
        return self.weight.shape[0]

    def forward(self, x, train=True):
        y = dense_forward(x, self.weight.value, None if self.bias is None else self.bias.value)
        self._x = np.asarray(x, dtype=np.float64) if train else None
        return y

    def backward(self, dy):
        x = self._need(self._x)
        dx, dw, db = dense_backward(x, self.weight.value, dy)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


# ---------------------------------------------------------------------------
# Activation, reshaping
# ---------------------------------------------------------------------------


class Activation(Module):
    def __init__(self, kind):
        self.kind = as_kind(kind)
        self._x = None

    def forward(self, x, train=True):
        self._x = x if train else None
        return act_forward(self.kind, x)

    def backward(self, dy):
        return act_backward(self.kind, self._need(self._x), dy)


class Flatten(Module):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=True):
        self._shape = x.shape if train else None
        return x.reshape(x.shape[0], -1).copy()

    def backward(self, dy):
        return dy.reshape(self._need(self._shape)).copy()


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def maxpool2d_forward(x, window=2, stride=None):
    """Valid max pooling. Ties resolve to the first element in row-major scan order."""
    _check_rank(x, 4, "maxpool2d")
    kh, kw = (window, window) if isinstance(window, int) else window
    stride = (kh, kw) if stride is None else stride
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise DegenerateOutput(f"input {h}x{w} smaller than pooling window {kh}x{kw}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kh * kw)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, idx, (kh, kw), (sh, sw))


def maxpool2d_backward(cache, dy):
    x_shape, idx, (kh, kw), (sh, sw) = cache
    ho, wo = idx.shape[2:]
    if dy.shape != idx.shape:
        raise ShapeMismatch(f"upstream {dy.shape} != forward output {idx.shape}")
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.where(idx == i * kw + j, dy, 0.0)
    return dx


class MaxPool2d(Module):
    def __init__(self, window=2, stride=None):
        self.window = window
        self.stride = stride
        self._cache = None

    def forward(self, x, train=True):
        y, cache = maxpool2d_forward(x, self.window, self.stride)
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        return maxpool2d_backward(self._need(self._cache), dy)


def global_avg_pool(x):
    """Per-channel spatial mean, (N,C,H,W) -> (N,C,1,1)."""
    _check_rank(x, 4, "global_avg_pool")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, dy):
    h, w = x_shape[2:]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def global_max_pool(x):
    """Per-channel spatial max, (N,C,H,W) -> (N,C,1,1), plus flat argmax for backward."""
    _check_rank(x, 4, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1), idx


def global_max_pool_backward(x_shape, idx, dy):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w))
    np.put_along_axis(dx, idx[..., None], dy.reshape(n, c, 1), axis=-1)
    return dx.reshape(x_shape)


class GlobalAvgPool(Module):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=True):
        self._shape = x.shape if train else None
        return global_avg_pool(x)

    def backward(self, dy):
        return global_avg_pool_backward(self._need(self._shape), dy)


class GlobalMaxPool(Module):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=True):
        y, idx = global_max_pool(x)
        self._cache = (x.shape, idx) if train else None
        return y

    def backward(self, dy):
        shape, idx = self._need(self._cache)
        return global_max_pool_backward(shape, idx, dy)


def channelwise_pool(x):
    """(N,C,H,W) -> (N,2,H,W): plane 0 is the channel mean, plane 1 the channel max."""
    _check_rank(x, 4, "channelwise_pool")
    idx = np.argmax(x, axis=1)
    mx = np.take_along_axis(x, idx[:, None], axis=1)
    return np.concatenate([x.mean(axis=1, keepdims=True), mx], axis=1), idx


def channelwise_pool_backward(x_shape, idx, dy):
    c = x_shape[1]
    dx = np.broadcast_to(dy[:, 0:1] / c, x_shape).copy()
    onehot = np.arange(c)[None, :, None, None] == idx[:, None]
    dx += np.where(onehot, dy[:, 1:2], 0.0)
    return dx


class ChannelPool(Module):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=True):
        y, idx = channelwise_pool(x)
        self._cache = (x.shape, idx) if train else None
        return y

    def backward(self, dy):
        shape, idx = self._need(self._cache)
        return channelwise_pool_backward(shape, idx, dy)


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


class BatchNorm2d(Module):
    """Per-channel batch norm over (N,H,W).

    Train mode normalises with the (biased) batch variance and moves the running
    statistics by ``running = 0.9 * running + 0.1 * batch``.  Infer mode uses
    the running statistics.
    """

    def __init__(self, channels, name="bn"):
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.params = (self.gamma, self.beta)
        self.buffers = (self.running_mean, self.running_var)
        self._cache = None

    def forward(self, x, train=True):
        _check_rank(x, 4, "batchnorm2d")
        if x.shape[1] != self.gamma.size:
            raise ShapeMismatch(f"batchnorm expects {self.gamma.size} channels, got {x.shape[1]}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if not train:
            self._cache = None
            inv = 1.0 / np.sqrt(self.running_var + BN_EPS)
            return (x - self.running_mean[None, :, None, None]) * (inv[None, :, None, None] * g) + b
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        self.running_mean *= BN_MOMENTUM
        self.running_mean += (1.0 - BN_MOMENTUM) * mu
        self.running_var *= BN_MOMENTUM
        self.running_var += (1.0 - BN_MOMENTUM) * var
        self._cache = (xhat, inv)
        return xhat * g + b

    def backward(self, dy):
        xhat, inv = self._need(self._cache)
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.value[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


# ---------------------------------------------------------------------------
# Containers and loss
# ---------------------------------------------------------------------------


class Sequential(Module):
    def __init__(self, *layers):
        self.children = tuple(layers)

    def forward(self, x, train=True):
        for layer in self.children:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.children):
            dy = layer.backward(dy)
        return dy


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_rank(logits, 2, "softmax_xent")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise BadLabel(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
