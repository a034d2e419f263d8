"""Activation tensors and the per-channel reductions the normalizers share.

Activations are plain ``float64`` numpy arrays laid out as ``(N, C, H, W)``
or ``(N, C, L)`` with ``L = H * W``.  Dense activations ``(N, C)`` are treated
as ``(N, C, 1)``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ChannelMoments:
    mean: np.ndarray
    var: np.ndarray
    count: int


def as_tensor(x):
    """Return ``x`` as a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"activation tensor must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("activation tensor contains NaN or Inf")
    return arr


def flatten_spatial(x):
    """Collapse ``(N, C, H, W)`` to ``(N, C, H*W)``; ``(n,c,h,w)`` lands at ``(n,c,h*W+w)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"flatten_spatial expects a rank-4 tensor, got rank {x.ndim}")
    n, c, h, w = x.shape
    return np.ascontiguousarray(x).reshape(n, c, h * w)


def to_ncl(x):
    """View any supported activation layout as ``(N, C, L)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim == 3:
        return x
    if x.ndim == 4:
        return flatten_spatial(x)
    raise ShapeError(f"expected rank 2, 3 or 4 activations, got rank {x.ndim}")


def channel_vectors(x):
    """Rows of channel values, one per ``(n, l)`` position: shape ``(N*L, C)``."""
    x = to_ncl(x)
    n, c, l = x.shape
    return x.transpose(0, 2, 1).reshape(n * l, c)


def from_channel_vectors(rows, shape):
    """Inverse of :func:`channel_vectors` for an ``(N, C, L)`` shape."""
    n, c, l = shape
    return np.ascontiguousarray(rows.reshape(n, l, c).transpose(0, 2, 1))


def channel_moments(x):
    """Per-channel mean and population variance over every ``(n, l)`` position."""
    x = to_ncl(x)
    n, c, l = x.shape
    m = n * l
    if m < 1 or c < 1:
        raise ShapeError(f"cannot take moments of empty tensor with shape {x.shape}")
    mean = x.sum(axis=(0, 2)) / m
    centered = x - mean[None, :, None]
    var = (centered * centered).sum(axis=(0, 2)) / m
    return ChannelMoments(mean=mean, var=var, count=m)


def weighted_channel_moments(x, w):
    """Moments under normalized position weights.

    ``w`` is either ``(N, L)`` (shared by all channels) or ``(N, C, L)``.  Each
    channel's weights must be non-negative and sum to one.
    """
    x = to_ncl(x)
    w = np.asarray(w, dtype=np.float64)
    n, c, l = x.shape
    if w.shape == (n, l):
        w = w[:, None, :]
    elif w.shape == (n,) and l == 1:
        w = w[:, None, None]
    elif w.shape != (n, c, l):
        raise ShapeError(f"weights of shape {w.shape} do not fit activations {x.shape}")
    if np.any(w < 0):
        raise DomainError("position weights must be non-negative")
    totals = np.broadcast_to(w.sum(axis=(0, 2)), (c,))
    if np.any(np.abs(totals - 1.0) > WEIGHT_SUM_TOL):
        raise DomainError(f"position weights must sum to 1 per channel, got {totals}")
    mean = (w * x).sum(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (w * centered * centered).sum(axis=(0, 2))
    return ChannelMoments(mean=mean, var=var, count=n * l)


def elementwise_affine(x, scale, shift):
    """``out[n, c, l] = (x[n, c, l] + shift[c]) * scale[c]`` on any layout."""
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    shift = np.asarray(shift, dtype=np.float64).reshape(-1)
    if x.ndim < 2:
        raise ShapeError(f"expected a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have length {c}, got {scale.shape} and {shift.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return (x + shift.reshape(bshape)) * scale.reshape(bshape)
