"""Bilinear backward warping of feature maps by a flow field.

Flow convention: ``flow[:, 0]`` is the horizontal displacement and
``flow[:, 1]`` the vertical one, in pixels of the grid being warped. The
output at pixel p samples the source at ``p + flow[p]``. Samples outside the
grid read zero.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _record, avg_pool, count_macs, scale


def downscale_flow(flow: Tensor, stride: int) -> Tensor:
    """Average-pool a full-resolution flow by ``stride`` and express it in feature cells."""
    if flow.data.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"downscale_flow: flow must be (n, 2, h, w), got {flow.shape}")
    h, w = flow.shape[2:]
    if h % stride or w % stride:
        raise ShapeError(f"downscale_flow: flow dims {(h, w)} not divisible by stride {stride}")
    if stride == 1:
        return flow
    return scale(avg_pool(flow, stride), 1.0 / stride)


def _corners(flow: np.ndarray):
    """Integer corner coordinates and fractional offsets of each sample.

    The cell for a sample at coordinate u is [ceil(u) - 1, ceil(u)], so on
    integer coordinates the left/upper cell is used.
    """
    n, _, h, w = flow.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    sx = xs[None] + flow[:, 0]
    sy = ys[None] + flow[:, 1]
    x0 = np.ceil(sx) - 1.0
    y0 = np.ceil(sy) - 1.0
    return x0.astype(np.int64), y0.astype(np.int64), sx - x0, sy - y0


def _neighbours(x0, y0, h, w):
    """Yield (flat index, validity mask, dx, dy) for the four corners in a fixed order."""
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            yield idx, valid, dx, dy


def _taps(features: np.ndarray, flow: np.ndarray):
    """Per-corner (index, mask, dx, dy, wx, wy, sampled values) for a warp."""
    n, c, h, w = features.shape
    f = features.reshape(n, c, h * w)
    x0, y0, fx, fy = _corners(flow)
    x0, y0 = x0.reshape(n, -1), y0.reshape(n, -1)
    fx, fy = fx.reshape(n, -1), fy.reshape(n, -1)
    batch = np.arange(n)[:, None, None]
    chans = np.arange(c)[None, :, None]
    taps = []
    for idx, valid, dx, dy in _neighbours(x0, y0, h, w):
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        vals = np.where(valid[:, None], f[batch, chans, idx[:, None, :]], 0.0)
        taps.append((idx, valid, dx, dy, wx, wy, vals))
    return taps


def warp(features: Tensor, flow: Tensor) -> Tensor:
    """Sample ``features`` at ``p + flow[p]`` with bilinear weights and zero padding."""
    if features.data.ndim != 4 or flow.data.ndim != 4:
        raise ShapeError(f"warp: expected 4-D tensors, got {features.shape} and {flow.shape}")
    n, c, h, w = features.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"warp: flow shape {flow.shape} does not match features {features.shape} (expected {(n, 2, h, w)})")
    count_macs(4 * n * c * h * w)
    taps = _taps(features.data, flow.data)
    out = np.zeros((n, c, h * w))
    for _, _, _, _, wx, wy, vals in taps:
        out += (wx * wy)[:, None] * vals
    result = Tensor(out.reshape(n, c, h, w))
    return _record(result, (features, flow), lambda g: warp_backward(g, features, flow, taps))


def warp_backward(upstream: np.ndarray, features: Tensor, flow: Tensor, taps=None):
    """Gradients of ``sum(upstream * warp(features, flow))`` w.r.t. features and flow."""
    n, c, h, w = features.shape
    g = upstream.reshape(n, c, h * w)
    if taps is None:
        taps = _taps(features.data, flow.data)
    grad_f = np.zeros(n * c * h * w)
    grad_flow = np.zeros((n, 2, h * w))
    base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
    for idx, valid, dx, dy, wx, wy, vals in taps:
        contrib = g * ((wx * wy) * valid)[:, None]
        flat = (base + idx[:, None, :]).ravel()
        grad_f += np.bincount(flat, weights=contrib.ravel(), minlength=grad_f.size)
        gv = (g * vals).sum(axis=1)
        # d(wx)/d(sx) is -1 for the left corner and +1 for the right one; same for y
        grad_flow[:, 0] += gv * (1.0 if dx else -1.0) * wy
        grad_flow[:, 1] += gv * (1.0 if dy else -1.0) * wx
    return grad_f.reshape(n, c, h, w), grad_flow.reshape(n, 2, h, w)
