"""VGG-16/19 and ResNet / ResNetV2 (50/101/152) builders with attention sites.

Attention placement:

* VGG ``m1``: after the activation following every conv.
  ``m2``: one block on the final feature map (after the last pool, before flatten).
  ``m3``: after conv layers 11 and 14 (1-based conv indices); an index past the
  last conv maps to the head boundary, so VGG-16 gets conv 11 + head boundary.
* ResNet: on each bottleneck's residual branch output, right before the
  identity/projection shortcut is added.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationKind, as_kind
from .attention import AttentionConfig, build_attention
from .config import parse_kv_text
from .errors import BadDepth, ConfigError, ShapeMismatch, StaleCache
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    Module,
    Sequential,
)
from .rng import Stream

FAMILIES = ("vgg", "resnet", "resnetv2")

VGG_CONFIGS = {
    16: (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"),
    19: (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"),
}
RESNET_STAGES = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
M3_CONV_SITES = (11, 14)


@dataclass(frozen=True)
class ModelSpec:
    family: str = "vgg"
    depth: int | None = 16
    input_shape: tuple = (3, 80, 80)
    classes: int = 7
    activation: ActivationKind = field(default_factory=ActivationKind)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    integration: str = "m2"
    fc_widths: tuple = (4096, 4096)
    # custom VGG conv layout (ints are conv widths, "M" a 2x2 max pool); overrides depth
    vgg_config: tuple | None = None

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "activation", as_kind(self.activation))
        object.__setattr__(self, "integration", self.integration.lower())
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if self.vgg_config is not None:
            object.__setattr__(self, "vgg_config", tuple(v if v == "M" else int(v) for v in self.vgg_config))
        if self.integration not in ("m1", "m2", "m3"):
            raise ConfigError(f"unknown VGG integration {self.integration!r}")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if fam == "vgg":
            if self.vgg_config is None and self.depth not in VGG_CONFIGS:
                raise BadDepth(f"VGG depth must be one of {sorted(VGG_CONFIGS)}, got {self.depth}")
        elif self.depth not in RESNET_STAGES:
            raise BadDepth(f"ResNet depth must be one of {sorted(RESNET_STAGES)}, got {self.depth}")

    def to_mapping(self):
        a = self.attention
        return {
            "family": self.family,
            "depth": "custom" if self.depth is None else str(self.depth),
            "input": "x".join(str(v) for v in self.input_shape),
            "classes": str(self.classes),
            "activation": self.activation.tag,
            "elu_alpha": repr(float(self.activation.elu_alpha)),
            "attention": a.kind,
            "r": str(a.r),
            "eca_gamma": repr(float(a.eca_gamma)),
            "eca_b": repr(float(a.eca_b)),
            "eca_k": "adaptive" if a.eca_fixed_k is None else str(a.eca_fixed_k),
            "spatial_kernel": str(a.spatial_kernel),
            "mlp_activation": a.mlp_activation.tag,
            "integration": self.integration,
            "fc_widths": ",".join(str(v) for v in self.fc_widths),
            "vgg_config": "default" if self.vgg_config is None else ",".join(str(v) for v in self.vgg_config),
        }

    def to_text(self):
        """Canonical ``key = value`` text, keys sorted; used in checkpoints."""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_mapping().items()))

    @classmethod
    def from_mapping(cls, m):
        """Inverse of :meth:`to_mapping`; missing keys take defaults."""
        m = dict(m)
        unknown = set(m) - set(SPEC_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        try:
            act_tag = m.get("activation", "elu")
            alpha = float(m.get("elu_alpha", 1.0))
            act = ActivationKind(act_tag, alpha)
            mlp_tag = m.get("mlp_activation", act_tag)
            mlp = ActivationKind(mlp_tag, alpha)
            eca_k = m.get("eca_k", "adaptive")
            att = AttentionConfig(
                kind=m.get("attention", "none"),
                r=int(m.get("r", 16)),
                eca_gamma=float(m.get("eca_gamma", 2.0)),
                eca_b=float(m.get("eca_b", 1.0)),
                eca_fixed_k=None if eca_k == "adaptive" else int(eca_k),
                spatial_kernel=int(m.get("spatial_kernel", 7)),
                mlp_activation=mlp,
            )
            depth = m.get("depth", "16")
            vgg_config = m.get("vgg_config", "default")
            return cls(
                family=m.get("family", "vgg"),
                depth=None if depth == "custom" else int(depth),
                input_shape=tuple(int(v) for v in m.get("input", "3x80x80").lower().split("x")),
                classes=int(m.get("classes", 7)),
                activation=act,
                attention=att,
                integration=m.get("integration", "m2"),
                fc_widths=tuple(int(v) for v in m.get("fc_widths", "4096,4096").split(",") if v.strip()),
                vgg_config=None if vgg_config == "default" else tuple(
                    "M" if v.strip().upper() == "M" else int(v) for v in vgg_config.split(",") if v.strip()
                ),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, (ConfigError, BadDepth)):
                raise
            raise ConfigError(str(exc)) from exc

    def spec_hash(self):
        return hashlib.sha256(self.to_text().encode()).digest()


SPEC_KEYS = tuple(ModelSpec().to_mapping())


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


class Model(Module):
    """A built network: spec, layer graph, flat parameter registry, attention sites."""

    def __init__(self, spec, net, attachments):
        self.spec = spec
        self.net = net
        self.children = (net,)
        self.attachments = list(attachments)
        self.registry = self.parameters()
        self._cached = False

    def forward(self, x, mode="infer"):
        if isinstance(mode, bool):
            mode = "train" if mode else "infer"
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise ShapeMismatch(f"model expects (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")
        train = mode == "train"
        out = self.net.forward(x, train)
        self._cached = train
        return out

    def backward(self, grad_logits):
        if not self._cached:
            raise StaleCache("model backward requires a preceding train-mode forward")
        self._cached = False
        return self.net.backward(grad_logits)

    def residual_blocks(self):
        return [m for m in self.modules() if isinstance(m, Bottleneck)]

    def set_residuals(self, enabled):
        """Test hook: turn every residual addition on or off."""
        for block in self.residual_blocks():
            block.use_skip = enabled


def count_params(model):
    """Learnable scalars: weights, biases and BatchNorm affine terms (running stats excluded)."""
    return sum(p.size for p in model.parameters())


def model_forward(model, x, mode="infer"):
    return model.forward(x, mode)


def model_backward(model, grad_logits):
    return model.backward(grad_logits)


# ---------------------------------------------------------------------------
# VGG
# ---------------------------------------------------------------------------


def build_vgg(spec):
    if spec.family != "vgg":
        raise ConfigError(f"build_vgg needs family 'vgg', got {spec.family!r}")
    config = spec.vgg_config if spec.vgg_config is not None else VGG_CONFIGS[spec.depth]
    n_convs = sum(1 for v in config if v != "M")
    att_cfg = spec.attention
    act = spec.activation

    head_sites = 0
    conv_sites = set()
    if spec.integration == "m1":
        conv_sites = set(range(1, n_convs + 1))
    elif spec.integration == "m2":
        head_sites = 1
    else:
        conv_sites = {i for i in M3_CONV_SITES if i <= n_convs}
        head_sites = len(M3_CONV_SITES) - len(conv_sites)
        if head_sites > 1:
            raise ConfigError(f"method m3 needs at least {M3_CONV_SITES[0]} conv layers, config has {n_convs}")

    layers, attachments = [], []
    c, h, w = spec.input_shape
    conv_i = 0
    for v in config:
        if v == "M":
            layers.append(MaxPool2d(2))
            h, w = h // 2, w // 2
            continue
        conv_i += 1
        layers.append(Conv2d(c, v, 3, padding="same", bias=True, name=f"conv{conv_i}"))
        layers.append(Activation(act))
        c = v
        if conv_i in conv_sites:
            block = build_attention(att_cfg, c, f"att.conv{conv_i}")
            if block is not None:
                layers.append(block)
                attachments.append((f"conv{conv_i}", block))
    if h < 1 or w < 1:
        raise ShapeMismatch(f"input {spec.input_shape} too small for the pooling stages")
    if head_sites:
        block = build_attention(att_cfg, c, "att.head")
        if block is not None:
            layers.append(block)
            attachments.append(("head", block))
    layers.append(Flatten())
    width = c * h * w
    for i, fc in enumerate(spec.fc_widths, 1):
        layers.append(Dense(width, fc, name=f"fc{i}"))
        layers.append(Activation(act))
        width = fc
    layers.append(Dense(width, spec.classes, name="classifier"))
    return Model(spec, Sequential(*layers), attachments)


# ---------------------------------------------------------------------------
# ResNet
# ---------------------------------------------------------------------------


class Bottleneck(Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand x4, optional attention, shortcut.

    ``preact=False`` (v1): conv-BN-act ordering, activation after the addition.
    ``preact=True`` (v2): BN-act-conv ordering; the projection shortcut reads the
    pre-activated input and nothing follows the addition.
    """

    expansion = 4

    def __init__(self, in_ch, mid, stride, act, att_cfg, preact, name):
        out = mid * self.expansion
        self.preact = preact
        self.use_skip = True
        if preact:
            self.pre = Sequential(BatchNorm2d(in_ch, f"{name}.bn0"), Activation(act))
            self.branch = Sequential(
                Conv2d(in_ch, mid, 1, padding="valid", bias=False, name=f"{name}.conv1"),
                BatchNorm2d(mid, f"{name}.bn1"),
                Activation(act),
                Conv2d(mid, mid, 3, stride, padding=(1, 1), bias=False, name=f"{name}.conv2"),
                BatchNorm2d(mid, f"{name}.bn2"),
                Activation(act),
                Conv2d(mid, out, 1, padding="valid", bias=True, name=f"{name}.conv3"),
            )
        else:
            self.pre = None
            self.branch = Sequential(
                Conv2d(in_ch, mid, 1, padding="valid", bias=False, name=f"{name}.conv1"),
                BatchNorm2d(mid, f"{name}.bn1"),
                Activation(act),
                Conv2d(mid, mid, 3, stride, padding=(1, 1), bias=False, name=f"{name}.conv2"),
                BatchNorm2d(mid, f"{name}.bn2"),
                Activation(act),
                Conv2d(mid, out, 1, padding="valid", bias=False, name=f"{name}.conv3"),
                BatchNorm2d(out, f"{name}.bn3"),
            )
        self.attention = build_attention(att_cfg, out, f"{name}.att")
        if stride != 1 or in_ch != out:
            proj = Conv2d(in_ch, out, 1, stride, padding="valid", bias=preact, name=f"{name}.proj")
            self.shortcut = proj if preact else Sequential(proj, BatchNorm2d(out, f"{name}.proj_bn"))
        else:
            self.shortcut = None
        self.post = None if preact else Activation(act)
        self.children = tuple(
            m for m in (self.pre, self.branch, self.attention, self.shortcut, self.post) if m is not None
        )

    def forward(self, x, train=True):
        p = self.pre.forward(x, train) if self.pre is not None else x
        b = self.branch.forward(p, train)
        if self.attention is not None:
            b = self.attention.forward(b, train)
        if self.use_skip:
            b = b + (self.shortcut.forward(p, train) if self.shortcut is not None else x)
        return self.post.forward(b, train) if self.post is not None else b

    def backward(self, dy):
        if self.post is not None:
            dy = self.post.backward(dy)
        db = dy
        if self.attention is not None:
            db = self.attention.backward(db)
        dp = self.branch.backward(db)
        dx = np.zeros_like(dp)
        if self.use_skip:
            if self.shortcut is not None:
                dp = dp + self.shortcut.backward(dy)
            else:
                dx = dx + dy
        if self.pre is not None:
            dp = self.pre.backward(dp)
        return dx + dp


def build_resnet(spec):
    if spec.family not in ("resnet", "resnetv2"):
        raise ConfigError(f"build_resnet needs a resnet family, got {spec.family!r}")
    preact = spec.family == "resnetv2"
    act = spec.activation
    c = spec.input_shape[0]
    layers = [Conv2d(c, 64, 7, 2, padding=(3, 3), bias=preact, name="stem.conv")]
    if not preact:
        layers += [BatchNorm2d(64, "stem.bn"), Activation(act)]
    layers.append(MaxPool2d(3, 2))
    attachments = []
    in_ch = 64
    for stage, (n_blocks, mid) in enumerate(zip(RESNET_STAGES[spec.depth], (64, 128, 256, 512)), 1):
        for i in range(n_blocks):
            stride = 2 if (i == 0 and stage > 1) else 1
            name = f"stage{stage}.block{i + 1}"
            block = Bottleneck(in_ch, mid, stride, act, spec.attention, preact, name)
            layers.append(block)
            if block.attention is not None:
                attachments.append((name, block.attention))
            in_ch = mid * Bottleneck.expansion
    if preact:
        layers += [BatchNorm2d(in_ch, "final.bn"), Activation(act)]
    layers += [GlobalAvgPool(), Flatten(), Dense(in_ch, spec.classes, name="classifier")]
    return Model(spec, Sequential(*layers), attachments)


def build_model(spec):
    return build_vgg(spec) if spec.family == "vgg" else build_resnet(spec)


# ---------------------------------------------------------------------------
# Initialisation and checkpoints
# ---------------------------------------------------------------------------


def _fan_in(shape):
    return int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])


def init_params(model, seed):
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases, BN gamma=1 beta=0.

    Parameter ``i`` of the registry draws from the splitmix stream ``(seed, i)``.
    BatchNorm running statistics are reset to mean 0, variance 1.
    """
    for i, p in enumerate(model.parameters()):
        kind = p.name.rsplit(".", 1)[-1]
        if kind == "weight":
            std = np.sqrt(2.0 / _fan_in(p.shape))
            p.value[...] = (Stream(seed, i).normal(p.size) * std).reshape(p.shape)
        elif kind == "gamma":
            p.value[...] = 1.0
        else:
            p.value[...] = 0.0
        p.zero_grad()
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0


MAGIC = b"ATNG"
FORMAT_VERSION = 1


class CheckpointError(ConfigError):
    pass


def save_checkpoint(model, path):
    """Write ``ATNG`` | u32 format | u32 text length | spec text | sha256(text) |
    u64 #param scalars | u64 #buffer scalars | float64 LE parameters (registry
    order) then BatchNorm running statistics."""
    text = model.spec.to_text().encode()
    params = [p.value.ravel() for p in model.parameters()]
    buffers = [b.ravel() for b in model.state_buffers()]
    n_p = sum(a.size for a in params)
    n_b = sum(a.size for a in buffers)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(text)))
        fh.write(text)
        fh.write(hashlib.sha256(text).digest())
        fh.write(struct.pack("<QQ", n_p, n_b))
        for a in params + buffers:
            fh.write(a.astype("<f8").tobytes())


def read_checkpoint_spec(path):
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh):
    if fh.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n_text = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {version}")
    text = fh.read(n_text)
    digest = fh.read(32)
    if hashlib.sha256(text).digest() != digest:
        raise CheckpointError("spec text does not match its stored hash")
    spec = ModelSpec.from_mapping(parse_kv_text(text.decode()))
    n_p, n_b = struct.unpack("<QQ", fh.read(16))
    return spec, digest, n_p, n_b


def load_checkpoint(path, model=None):
    """Load into ``model`` (must have the same spec) or into a freshly built model."""
    with open(path, "rb") as fh:
        spec, digest, n_p, n_b = _read_header(fh)
        if model is None:
            model = build_model(spec)
        elif model.spec.spec_hash() != digest:
            raise CheckpointError("checkpoint spec does not match the target model")
        params = model.parameters()
        buffers = model.state_buffers()
        if n_p != sum(p.size for p in params) or n_b != sum(b.size for b in buffers):
            raise CheckpointError("checkpoint size does not match the model")
        data = np.frombuffer(fh.read(8 * (n_p + n_b)), dtype="<f8")
        if data.size != n_p + n_b:
            raise CheckpointError("truncated checkpoint")
    off = 0
    for p in params:
        p.value[...] = data[off : off + p.size].reshape(p.shape)
        off += p.size
    for b in buffers:
        b[...] = data[off : off + b.size].reshape(b.shape)
        off += b.size
    return model
