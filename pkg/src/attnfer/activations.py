"""ReLU, ELU, SELU and sigmoid with exact derivatives.

Derivatives at exactly zero take the right-hand limit: 1 for ReLU and ELU,
``SELU_SCALE`` for SELU.  (The ELU right limit is 1, which equals the left
limit ``alpha`` only when ``alpha == 1``.)
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .tensor import check_finite

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

KINDS = ("relu", "elu", "selu", "sigmoid")


@dataclass(frozen=True)
class ActivationKind:
    tag: str = "elu"
    elu_alpha: float = 1.0

    def __post_init__(self):
        tag = self.tag.lower()
        if tag not in KINDS:
            raise ConfigError(f"unknown activation {self.tag!r}; expected one of {KINDS}")
        object.__setattr__(self, "tag", tag)
        if not self.elu_alpha > 0:
            raise ConfigError("elu_alpha must be positive")

    @property
    def kinks(self):
        """Points where the derivative is discontinuous (used by gradient checks)."""
        if self.tag == "relu" or (self.tag == "elu" and self.elu_alpha != 1.0) or self.tag == "selu":
            return (0.0,)
        return ()


def as_kind(kind):
    if isinstance(kind, ActivationKind):
        return kind
    return ActivationKind(str(kind))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _elu(x, alpha):
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def act_forward(kind, x):
    kind = as_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind.tag == "relu":
        out = np.maximum(x, 0.0)
    elif kind.tag == "elu":
        out = _elu(x, kind.elu_alpha)
    elif kind.tag == "selu":
        out = SELU_SCALE * _elu(x, SELU_ALPHA)
    else:
        out = sigmoid(x)
    return check_finite(out, f"{kind.tag} output")


def act_backward(kind, x, upstream):
    """``upstream * f'(x)`` elementwise."""
    kind = as_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ShapeMismatch(f"x {x.shape} vs upstream {upstream.shape}")
    neg = x < 0
    if kind.tag == "relu":
        d = np.where(neg, 0.0, 1.0)
    elif kind.tag == "elu":
        d = np.where(neg, kind.elu_alpha * np.exp(np.minimum(x, 0.0)), 1.0)
    elif kind.tag == "selu":
        d = SELU_SCALE * np.where(neg, SELU_ALPHA * np.exp(np.minimum(x, 0.0)), 1.0)
    else:
        s = sigmoid(x)
        d = s * (1.0 - s)
    return upstream * d


def mean_activation(kind, samples):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    return float(np.mean(act_forward(kind, samples)))
