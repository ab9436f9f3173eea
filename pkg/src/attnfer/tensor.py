"""Checked construction and the few elementwise/reduction primitives.

The working tensor type is a C-contiguous float64 ``numpy.ndarray`` in N,C,H,W
layout for feature maps.  The helpers here enforce the contracts the rest of
the package relies on: finite values, explicit broadcasting rules and fresh
(never aliased) results.
"""

import numpy as np

from .errors import BadAxis, NonFinite, ShapeMismatch

DTYPE = np.float64


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return x


def tensor_new(shape, data):
    """Build a read-only float64 array of ``shape`` from a flat copy of ``data``."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"shape entries must be positive, got {shape}")
    flat = np.array(data, dtype=DTYPE).ravel()
    if int(np.prod(shape)) != flat.size:
        raise ShapeMismatch(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    check_finite(flat)
    out = flat.reshape(shape)
    out.flags.writeable = False
    return out


def _broadcastable(a_shape, b_shape):
    if len(a_shape) != len(b_shape):
        return False
    return all(bs == as_ or bs == 1 for as_, bs in zip(a_shape, b_shape))


def ew_binary(op, a, b):
    """Elementwise ``add`` or ``mul``.

    ``b`` must have the same shape as ``a`` or the same rank with size-1 axes,
    which repeat along ``a`` (the gate-times-feature-map case).
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"cannot broadcast {b.shape} onto {a.shape}")
    if op == "add":
        out = a + b
    elif op == "mul":
        out = a * b
    else:
        raise ValueError(f"unknown op {op!r}")
    return check_finite(out, f"{op} result")


def reduce(op, x, axes):
    """``mean`` or ``max`` over ``axes``; reduced axes are kept with size 1."""
    x = np.asarray(x, dtype=DTYPE)
    axes = tuple(sorted(set(int(a) for a in axes)))
    for ax in axes:
        if not 0 <= ax < x.ndim:
            raise BadAxis(f"axis {ax} out of range for rank {x.ndim}")
    if op == "mean":
        count = 1
        for ax in axes:
            count *= x.shape[ax]
        return np.sum(x, axis=axes, keepdims=True) / count
    if op == "max":
        return np.max(x, axis=axes, keepdims=True)
    raise ValueError(f"unknown op {op!r}")
