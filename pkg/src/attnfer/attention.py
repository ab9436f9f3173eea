"""Squeeze-and-excitation, efficient channel attention and CBAM blocks.

All blocks map an (N,C,H,W) feature map to a gated map of the same shape.
After a forward pass the gate(s) are available on the block for inspection:
``block.gate`` for SE/ECA, ``block.channel_gate`` / ``block.spatial_gate``
for CBAM.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationKind, act_backward, act_forward, as_kind, sigmoid
from .errors import BadChannelCount, BadKernel, BadReduction, ConfigError, ShapeMismatch
from .layers import (
    Conv2d,
    Dense,
    Module,
    Param,
    channelwise_pool,
    channelwise_pool_backward,
    global_max_pool,
    global_max_pool_backward,
)

KINDS = ("none", "se", "eca", "cbam")


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "none"
    r: int = 16
    eca_gamma: float = 2.0
    eca_b: float = 1.0
    eca_fixed_k: int | None = None
    spatial_kernel: int = 7
    mlp_activation: ActivationKind = field(default_factory=lambda: ActivationKind("elu"))

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "mlp_activation", as_kind(self.mlp_activation))
        if int(self.r) < 1:
            raise BadReduction(f"reduction ratio must be >= 1, got {self.r}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise BadKernel(f"spatial kernel must be odd, got {self.spatial_kernel}")
        if self.eca_fixed_k is not None and (self.eca_fixed_k < 1 or self.eca_fixed_k % 2 == 0):
            raise BadKernel(f"ECA kernel must be odd, got {self.eca_fixed_k}")
        if not self.eca_gamma > 0:
            raise ConfigError("eca_gamma must be positive")

    def eca_k(self, channels):
        if self.eca_fixed_k is not None:
            return self.eca_fixed_k
        return eca_kernel_size(channels, self.eca_gamma, self.eca_b)


def eca_kernel_size(channels, gamma=2.0, b=1.0):
    """Adaptive 1D kernel width: floor ``|log2(C)/gamma + b/gamma|``, bumped to the next odd."""
    if channels < 1:
        raise BadChannelCount(f"channel count must be >= 1, got {channels}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    t = int(math.floor(abs(math.log2(channels) / gamma + b / gamma)))
    k = t if t % 2 == 1 else t + 1
    return max(k, 1)


def _hidden(channels, r):
    if channels % r:
        raise BadReduction(f"reduction ratio {r} does not divide {channels} channels")
    return channels // r


def attention_param_count(kind, channels, cfg=None):
    """Closed-form number of learnable scalars a block adds at a site with ``channels``."""
    cfg = cfg or AttentionConfig(kind)
    kind = str(kind).lower()
    if kind == "none":
        return 0
    if kind == "eca":
        return cfg.eca_k(channels)
    hidden = _hidden(channels, cfg.r)
    mlp = channels * hidden + hidden + hidden * channels + channels
    if kind == "se":
        return mlp
    if kind == "cbam":
        s = cfg.spatial_kernel
        return mlp + 2 * s * s + 1
    raise ConfigError(f"unknown attention kind {kind!r}")


class _MLP:
    """Two dense layers with a hidden activation; shared by SE and CBAM channel gates."""

    def __init__(self, channels, r, act, name):
        hidden = _hidden(channels, r)
        self.fc1 = Dense(channels, hidden, name=f"{name}.fc1")
        self.fc2 = Dense(hidden, channels, name=f"{name}.fc2")
        self.act = act

    def forward(self, s):
        h = s @ self.fc1.weight.value + self.fc1.bias.value
        a = act_forward(self.act, h)
        return a @ self.fc2.weight.value + self.fc2.bias.value, (s, h, a)

    def backward(self, cache, dz):
        s, h, a = cache
        self.fc2.weight.grad += a.T @ dz
        self.fc2.bias.grad += dz.sum(axis=0)
        dh = act_backward(self.act, h, dz @ self.fc2.weight.value.T)
        self.fc1.weight.grad += s.T @ dh
        self.fc1.bias.grad += dh.sum(axis=0)
        return dh @ self.fc1.weight.value.T


def _check_channels(x, channels, what):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatch(f"{what} built for {channels} channels got input {x.shape}")


class SEBlock(Module):
    """Squeeze (global average pool) then excite (C -> C/r -> C MLP, sigmoid)."""

    def __init__(self, channels, cfg, name="se"):
        self.channels = channels
        self.mlp = _MLP(channels, cfg.r, cfg.mlp_activation, name)
        self.children = (self.mlp.fc1, self.mlp.fc2)
        self.gate = None
        self._cache = None

    def forward(self, x, train=True):
        _check_channels(x, self.channels, "SE block")
        n, c = x.shape[:2]
        s = x.mean(axis=(2, 3))
        z, mlp_cache = self.mlp.forward(s)
        g = sigmoid(z)
        self.gate = g.reshape(n, c, 1, 1)
        self._cache = (x, g, mlp_cache) if train else None
        return x * self.gate

    def backward(self, dy):
        x, g, mlp_cache = self._need(self._cache)
        n, c, h, w = x.shape
        dg = (dy * x).sum(axis=(2, 3))
        ds = self.mlp.backward(mlp_cache, dg * g * (1.0 - g))
        return dy * g.reshape(n, c, 1, 1) + (ds / (h * w))[:, :, None, None]


class ECABlock(Module):
    """Global average pool, 1D convolution across channels (zero padded, no bias), sigmoid.

    With ``k`` taps ``w``: ``z[c] = sum_j w[j] * s[c + j - (k - 1) / 2]``.
    """

    def __init__(self, channels, cfg, name="eca"):
        k = cfg.eca_k(channels)
        if k % 2 == 0 or k < 1:
            raise BadKernel(f"ECA kernel must be odd, got {k}")
        if k > 2 * channels - 1:
            raise BadKernel(f"ECA kernel {k} too wide for {channels} channels")
        self.channels = channels
        self.k = k
        self.weight = Param(f"{name}.weight", np.zeros(k))
        self.params = (self.weight,)
        self.gate = None
        self._cache = None

    def _conv(self, s):
        k, pad = self.k, (self.k - 1) // 2
        sp = np.pad(s, ((0, 0), (pad, pad)))
        c = s.shape[1]
        z = np.zeros_like(s)
        for j in range(k):
            z += self.weight.value[j] * sp[:, j : j + c]
        return z, sp

    def forward(self, x, train=True):
        _check_channels(x, self.channels, "ECA block")
        n, c = x.shape[:2]
        s = x.mean(axis=(2, 3))
        z, sp = self._conv(s)
        g = sigmoid(z)
        self.gate = g.reshape(n, c, 1, 1)
        self._cache = (x, g, sp) if train else None
        return x * self.gate

    def backward(self, dy):
        x, g, sp = self._need(self._cache)
        n, c, h, w = x.shape
        dz = (dy * x).sum(axis=(2, 3)) * g * (1.0 - g)
        k, pad = self.k, (self.k - 1) // 2
        dsp = np.zeros_like(sp)
        for j in range(k):
            self.weight.grad[j] += (dz * sp[:, j : j + c]).sum()
            dsp[:, j : j + c] += self.weight.value[j] * dz
        ds = dsp[:, pad : pad + c]
        return dy * g.reshape(n, c, 1, 1) + (ds / (h * w))[:, :, None, None]


class CBAMChannelGate(Module):
    """``sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))`` with one MLP shared by both branches.

    ``forward`` returns the (N,C,1,1) gate, not the gated map.
    """

    def __init__(self, channels, cfg, name="cbam.channel"):
        self.channels = channels
        self.mlp = _MLP(channels, cfg.r, cfg.mlp_activation, name)
        self.children = (self.mlp.fc1, self.mlp.fc2)
        self._cache = None

    def forward(self, x, train=True):
        _check_channels(x, self.channels, "CBAM channel gate")
        n, c = x.shape[:2]
        avg = x.mean(axis=(2, 3))
        mx, idx = global_max_pool(x)
        za, ca = self.mlp.forward(avg)
        zm, cm = self.mlp.forward(mx.reshape(n, c))
        g = sigmoid(za + zm)
        self._cache = (x.shape, idx, g, ca, cm) if train else None
        return g.reshape(n, c, 1, 1)

    def backward(self, dgate):
        shape, idx, g, ca, cm = self._need(self._cache)
        n, c, h, w = shape
        dz = dgate.reshape(n, c) * g * (1.0 - g)
        d_avg = self.mlp.backward(ca, dz)
        d_max = self.mlp.backward(cm, dz)
        dx = np.broadcast_to((d_avg / (h * w))[:, :, None, None], shape).copy()
        dx += global_max_pool_backward(shape, idx, d_max.reshape(n, c, 1, 1))
        return dx


class CBAMSpatialGate(Module):
    """``sigmoid(conv_kxk([mean_c(x), max_c(x)]))`` giving an (N,1,H,W) gate.

    ``forward`` returns the gate, not the gated map.
    """

    def __init__(self, cfg, name="cbam.spatial"):
        self.conv = Conv2d(2, 1, cfg.spatial_kernel, padding="same", bias=True, name=f"{name}.conv")
        self.children = (self.conv,)
        self.descriptor = None
        self._cache = None

    def forward(self, x, train=True):
        if x.ndim != 4:
            raise ShapeMismatch(f"CBAM spatial gate expects N,C,H,W input, got {x.shape}")
        desc, idx = channelwise_pool(x)
        self.descriptor = desc
        g = sigmoid(self.conv.forward(desc, train))
        self._cache = (x.shape, idx, g) if train else None
        return g

    def backward(self, dgate):
        shape, idx, g = self._need(self._cache)
        ddesc = self.conv.backward(dgate * g * (1.0 - g))
        return channelwise_pool_backward(shape, idx, ddesc)


class CBAMBlock(Module):
    """Channel gate then spatial gate: ``x1 = x * Mc(x)``, ``y = x1 * Ms(x1)``."""

    def __init__(self, channels, cfg, name="cbam"):
        self.channel = CBAMChannelGate(channels, cfg, f"{name}.channel")
        self.spatial = CBAMSpatialGate(cfg, f"{name}.spatial")
        self.children = (self.channel, self.spatial)
        self.channel_gate = None
        self.spatial_gate = None
        self._cache = None

    def forward(self, x, train=True):
        mc = self.channel.forward(x, train)
        x1 = x * mc
        ms = self.spatial.forward(x1, train)
        self.channel_gate, self.spatial_gate = mc, ms
        self._cache = (x, mc, x1, ms) if train else None
        return x1 * ms

    @property
    def gate(self):
        return self.channel_gate, self.spatial_gate

    def backward(self, dy):
        x, mc, x1, ms = self._need(self._cache)
        dx1 = dy * ms + self.spatial.backward((dy * x1).sum(axis=1, keepdims=True))
        return dx1 * mc + self.channel.backward((dx1 * x).sum(axis=(2, 3), keepdims=True))


def build_attention(cfg, channels, name="att"):
    """Block for ``cfg`` at a site with ``channels`` channels, or ``None`` for kind ``none``."""
    if cfg.kind == "none":
        return None
    if cfg.kind == "se":
        return SEBlock(channels, cfg, name)
    if cfg.kind == "eca":
        return ECABlock(channels, cfg, name)
    return CBAMBlock(channels, cfg, name)
