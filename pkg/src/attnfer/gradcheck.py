"""Central finite-difference oracle for every backward pass in the package.

A *unit* is anything with ``forward(x, train)``, ``backward(dy)`` and
``parameters()``.  Its scalar loss proxy is ``sum(R * forward(x))`` for a fixed
standard-normal projection ``R`` drawn per seed; ``R`` of all ones would be the
plain output sum, which is degenerate for e.g. batch norm (its output sum does
not depend on the input).
"""

from dataclasses import dataclass

import numpy as np

from .activations import ActivationKind
from .attention import AttentionConfig, CBAMBlock, CBAMChannelGate, CBAMSpatialGate, ECABlock, SEBlock
from .errors import NonFinite
from .layers import (
    Activation,
    BatchNorm2d,
    ChannelPool,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    GlobalMaxPool,
    MaxPool2d,
    Module,
    Sequential,
    softmax_xent,
)
from .models import Bottleneck
from .rng import Stream

KINK_STEP = 1e-4
# one-sided slopes at step KINK_STEP disagreeing by more than this (relative) mark a kink
ONE_SIDED_TOL = 1e-2


def finite_diff(f, x, i, eps):
    """``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` for flat index ``i``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    xp = np.array(x, dtype=np.float64)
    xm = xp.copy()
    xp.flat[i] += eps
    xm.flat[i] -= eps
    fp, fm = float(f(xp)), float(f(xm))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFinite(f"function diverged at index {i}")
    return (fp - fm) / (2.0 * eps)


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    worst_index: int
    n_checked: int
    passed: bool
    tolerance: float = 1e-5
    n_skipped: int = 0
    worst_tensor: str = ""
    reason: str = ""

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        text = (
            f"{status} max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
            f"tol={self.tolerance:.0e} checked={self.n_checked} skipped={self.n_skipped}"
        )
        if self.worst_tensor:
            text += f" worst={self.worst_tensor}[{self.worst_index}]"
        if self.reason:
            text += f" ({self.reason})"
        return text


def _forward(unit, x):
    return np.array(unit.forward(x, True), dtype=np.float64)


def check_gradients(unit, x, tol=1e-5, eps=1e-6, seeds=5, max_coords=200, seed=0):
    """Compare ``unit``'s analytic gradients (input and every parameter) with finite differences.

    For each of ``seeds`` seeds a new projection and a new subsample of at most
    ``max_coords`` coordinates per tensor are drawn.  The step is
    ``eps * max(1, |v|)``.  Each coordinate is also differenced with step 1e-4.
    It is skipped and counted instead of compared when the two central
    estimates disagree by more than ``tol / 2`` relative, or when the left and
    right one-sided slopes at step 1e-4 disagree by more than 1%.  Either means
    the coordinate sits within 1e-4 of a kink (activation origin, pooling tie)
    or its gradient is too small to resolve above roundoff.  The skip test never looks at the analytic
    gradient, so a wrong backward cannot hide behind it.  Relative error uses
    the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    if max_coords <= 0 or seeds <= 0:
        return GradReport(np.inf, np.inf, -1, 0, False, tol, reason="empty subsample: nothing was checked")
    params = unit.parameters()
    worst = (0.0, 0.0, -1, "")
    n_checked = n_skipped = 0
    for s in range(seeds):
        stream = Stream(seed, 1000 + s)
        y0 = _forward(unit, x)
        proj = stream.normal(y0.size).reshape(y0.shape)
        f0 = float(np.sum(proj * y0))
        for p in params:
            p.zero_grad()
        _forward(unit, x)
        dx = np.asarray(unit.backward(proj.copy()), dtype=np.float64)
        analytic = [("input", x, dx)] + [(p.name, p.value, p.grad.copy()) for p in params]

        for name, target, grad in analytic:
            for i in stream.choice(target.size, max_coords):
                v = target.flat[i]
                outs = {}
                for step in (eps, KINK_STEP):
                    h = step * max(1.0, abs(v))
                    target.flat[i] = v + h
                    fp = float(np.sum(proj * _forward(unit, x)))
                    target.flat[i] = v - h
                    fm = float(np.sum(proj * _forward(unit, x)))
                    target.flat[i] = v
                    outs[step] = (fp, fm, h)
                num = (outs[eps][0] - outs[eps][1]) / (2.0 * outs[eps][2])
                fp, fm, h = outs[KINK_STEP]
                coarse = (fp - fm) / (2.0 * h)
                right, left = (fp - f0) / h, (f0 - fm) / h
                if not all(np.isfinite((num, coarse, right, left))):
                    raise NonFinite(f"{name}[{i}]: forward diverged")
                scale = max(abs(num), abs(coarse), 1e-8)
                kink = abs(right - left) > ONE_SIDED_TOL * max(abs(right), abs(left), 1e-8)
                if kink or abs(num - coarse) > 0.5 * tol * scale:
                    n_skipped += 1
                    continue
                a = float(grad.flat[i])
                abs_err = abs(a - num)
                rel_err = abs_err / max(abs(a), abs(num), 1e-8)
                n_checked += 1
                if rel_err > worst[0] or worst[2] < 0:
                    worst = (rel_err, max(abs_err, worst[1]), int(i), name)
                else:
                    worst = (worst[0], max(abs_err, worst[1]), worst[2], worst[3])
    for p in params:
        p.zero_grad()
    if n_checked == 0:
        return GradReport(np.inf, np.inf, -1, 0, False, tol, n_skipped, reason="every coordinate was skipped")
    rel, ab, idx, name = worst
    return GradReport(rel, ab, idx, n_checked, rel <= tol, tol, n_skipped, name)


class FaultyBackward(Module):
    """Wraps a unit and scales every gradient it produces by ``scale`` (fault injection)."""

    def __init__(self, unit, scale=1.01):
        self.unit = unit
        self.scale = scale
        self.children = (unit,)

    def forward(self, x, train=True):
        return self.unit.forward(x, train)

    def backward(self, dy):
        before = [p.grad.copy() for p in self.parameters()]
        dx = self.unit.backward(dy)
        for p, b in zip(self.parameters(), before):
            p.grad[...] = b + self.scale * (p.grad - b)
        return self.scale * dx


class XentUnit(Module):
    """Mean softmax cross-entropy as a unit; output has shape (1,)."""

    def __init__(self, labels):
        self.labels = np.asarray(labels)
        self._grad = None

    def forward(self, x, train=True):
        loss, grad = softmax_xent(x, self.labels)
        self._grad = grad
        return np.array([loss])

    def backward(self, dy):
        return self._grad * float(np.asarray(dy).ravel()[0])


class LossUnit(Module):
    """``network`` followed by softmax cross-entropy on fixed labels."""

    def __init__(self, network, labels):
        self.network = network
        self.loss = XentUnit(labels)
        self.children = (network,)

    def forward(self, x, train=True):
        return self.loss.forward(self.network.forward(x, train))

    def backward(self, dy):
        return self.network.backward(self.loss.backward(dy))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-5
MODEL_TOL = 1e-4


def randomize(unit, stream, scale=0.5):
    """Random non-degenerate parameters (gamma near 1, everything else normal)."""
    for p in unit.parameters():
        z = stream.normal(p.size).reshape(p.shape)
        if p.name.endswith("gamma"):
            p.value[...] = 1.0 + 0.1 * z
        else:
            p.value[...] = scale * z
    return unit


def _x(stream, *shape):
    return stream.normal(int(np.prod(shape))).reshape(shape)


def layer_cases(seed):
    st = Stream(seed, 1)
    cases = [
        ("conv3x3_same", randomize(Conv2d(3, 4, 3, name="conv"), st), _x(st, 1, 3, 8, 8), LINEAR_TOL),
        ("conv3x3_stride2", randomize(Conv2d(3, 5, 3, 2, padding=(1, 1), name="conv"), st), _x(st, 2, 3, 7, 7), LINEAR_TOL),
        ("conv1x1_stride2", randomize(Conv2d(4, 3, 1, 2, padding="valid", bias=False, name="conv"), st), _x(st, 2, 4, 5, 5), LINEAR_TOL),
        ("dense", randomize(Dense(6, 5, name="fc"), st), _x(st, 4, 6), LINEAR_TOL),
        ("global_avg_pool", GlobalAvgPool(), _x(st, 2, 3, 4, 5), LINEAR_TOL),
        ("flatten", Flatten(), _x(st, 2, 3, 2, 2), LINEAR_TOL),
        ("maxpool2", MaxPool2d(2), _x(st, 2, 3, 6, 6), NONLINEAR_TOL),
        ("maxpool3s2", MaxPool2d(3, 2), _x(st, 1, 2, 7, 7), NONLINEAR_TOL),
        ("global_max_pool", GlobalMaxPool(), _x(st, 2, 3, 4, 4), NONLINEAR_TOL),
        ("channel_pool", ChannelPool(), _x(st, 2, 4, 3, 3), NONLINEAR_TOL),
        ("batchnorm_train", randomize(BatchNorm2d(3, "bn"), st), _x(st, 4, 3, 3, 3), NONLINEAR_TOL),
        ("softmax_xent", XentUnit(st.choice(7, 3)), _x(st, 3, 7), NONLINEAR_TOL),
    ]
    for tag in ("relu", "elu", "selu", "sigmoid"):
        cases.append((f"act_{tag}", Activation(tag), _x(st, 3, 10), NONLINEAR_TOL))
    return cases


def attention_cases(seed):
    st = Stream(seed, 2)
    elu = AttentionConfig("se", r=2)
    relu = AttentionConfig("se", r=4, mlp_activation=ActivationKind("relu"))
    cbam = AttentionConfig("cbam", r=2, spatial_kernel=3)
    cbam7 = AttentionConfig("cbam", r=4)
    return [
        ("se_elu", randomize(SEBlock(8, elu), st), _x(st, 2, 8, 4, 4), NONLINEAR_TOL),
        ("se_relu", randomize(SEBlock(8, relu), st), _x(st, 2, 8, 3, 3), NONLINEAR_TOL),
        ("eca_adaptive", randomize(ECABlock(16, AttentionConfig("eca")), st), _x(st, 2, 16, 3, 3), NONLINEAR_TOL),
        ("eca_k5", randomize(ECABlock(6, AttentionConfig("eca", eca_fixed_k=5)), st), _x(st, 2, 6, 3, 3), NONLINEAR_TOL),
        ("cbam_channel", randomize(CBAMChannelGate(8, cbam), st), _x(st, 2, 8, 4, 4), NONLINEAR_TOL),
        ("cbam_spatial", randomize(CBAMSpatialGate(cbam7), st), _x(st, 2, 3, 6, 6), NONLINEAR_TOL),
        ("cbam_block", randomize(CBAMBlock(8, cbam), st), _x(st, 2, 8, 4, 4), NONLINEAR_TOL),
    ]


def model_cases(seed):
    st = Stream(seed, 3)
    elu = ActivationKind("elu")
    se = AttentionConfig("se", r=2)
    tiny = Sequential(
        Conv2d(2, 4, 3, name="conv1"),
        Activation(elu),
        MaxPool2d(2),
        Conv2d(4, 4, 3, name="conv2"),
        Activation(elu),
        SEBlock(4, se, "att"),
        Flatten(),
        Dense(4 * 3 * 3, 5, name="classifier"),
    )
    labels = st.choice(5, 3)
    cases = [("tiny_vgg_se", randomize(LossUnit(tiny, labels), st, 0.3), _x(st, 3, 2, 6, 6), MODEL_TOL)]
    for preact in (False, True):
        for kind in ("se", "eca", "cbam"):
            cfg = AttentionConfig(kind, r=2, spatial_kernel=3)
            block = Bottleneck(4, 2, 2, elu, cfg, preact, "block")
            name = f"bottleneck_{'v2' if preact else 'v1'}_{kind}"
            cases.append((name, randomize(block, st, 0.4), _x(st, 3, 4, 5, 5), MODEL_TOL))
    return cases


SUITES = {"layers": layer_cases, "attention": attention_cases, "model": model_cases}


def run_suite(scope, seed=0, seeds=5, max_coords=200, fault=None):
    """Gradient-check every case in ``scope``; ``fault`` wraps each unit in :class:`FaultyBackward`."""
    results = []
    for name, unit, x, tol in SUITES[scope](seed):
        if fault is not None:
            unit = FaultyBackward(unit, fault)
        report = check_gradients(unit, x, tol=tol, seeds=seeds, max_coords=max_coords, seed=seed)
        results.append((name, report))
    return results
