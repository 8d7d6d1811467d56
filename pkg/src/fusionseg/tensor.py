"""Dense 4-D tensors in double precision with tape-based reverse-mode gradients.

Operations record themselves onto the active :class:`Graph` only when one of
their inputs requires a gradient, so inference outside a graph costs nothing
beyond the forward arithmetic.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""


class MacCounter:
    """Tally multiply-accumulates executed by operators inside the block."""

    _active: "MacCounter | None" = None

    def __init__(self):
        self.total = 0
        self._previous = None

    def __enter__(self) -> "MacCounter":
        self._previous = MacCounter._active
        MacCounter._active = self
        return self

    def __exit__(self, *exc) -> None:
        MacCounter._active = self._previous


def count_macs(n: int) -> None:
    if MacCounter._active is not None:
        MacCounter._active.total += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named-by-owner weight with an accumulated gradient buffer."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Execution-ordered tape of recorded operations.

    Use as a context manager; operations executed inside the block are
    recorded (when differentiable inputs are involved)::

        with Graph() as g:
            loss = cross_entropy_loss(net(x), labels)
        g.backward(loss)
    """

    _active: "Graph | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous = None

    def __enter__(self) -> "Graph":
        self._previous = Graph._active
        Graph._active = self
        return self

    def __exit__(self, *exc) -> None:
        Graph._active = self._previous
        self._previous = None

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(output: Tensor, inputs: tuple, fn) -> Tensor:
    graph = Graph._active
    if graph is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        graph.nodes.append(_Node(inputs, output, fn))
    return output


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Trainable parameters accumulate (they are zeroed by the optimizer);
    plain leaf tensors with ``requires_grad`` get a fresh ``.grad`` array.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in graph.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.pop(key)
        if isinstance(leaf, Parameter):
            if leaf.trainable:
                leaf.grad += g
        else:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _check4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural operators
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum with numpy broadcasting; gradients are reduced back to each shape."""
    out = Tensor(a.data + b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), back)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def scale(x: Tensor, alpha: float) -> Tensor:
    out = Tensor(x.data * alpha)
    return _record(out, (x,), lambda g: (g * alpha,))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), back)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def concat_channel(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "a")
    _check4(b, "b")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channel: (n, h, w) differ: {(na, ha, wa)} vs {(nb, hb, wb)}"
        )
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channel(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "x")
    out = Tensor(x.data[:, start:stop].copy())

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), back)


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the two spatial axes by ``p`` on each side."""
    _check4(x, "x")
    h, w = x.shape[2:]
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge"))

    def back(g):
        g = g.copy()
        # fold the replicated border back onto the edge rows, then columns
        g[:, :, p] += g[:, :, :p].sum(axis=2)
        g[:, :, p + h - 1] += g[:, :, p + h:].sum(axis=2)
        g = g[:, :, p:p + h]
        g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
        g[:, :, :, p + w - 1] += g[:, :, :, p + w:].sum(axis=3)
        return (g[:, :, :, p:p + w],)

    return _record(out, (x,), back)


def avg_pool(x: Tensor, s: int) -> Tensor:
    _check4(x, "x")
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"avg_pool: spatial dims {(h, w)} not divisible by {s}")
    count_macs(n * c * h * w)
    out = Tensor(x.data.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5)))

    def back(g):
        g = np.repeat(np.repeat(g, s, axis=2), s, axis=3)
        return (g / (s * s),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. weight (c_out, c_in, k, k), bias (1, c_out, 1, 1)."""
    _check4(x, "x")
    _check4(weight, "weight")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride={stride} / pad={pad}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if c != c_in:
        raise ShapeError(f"conv2d: input has c={c} channels but weight expects c_in={c_in}")
    if bias is not None and bias.data.size != c_out:
        raise ShapeError(f"conv2d: bias has {bias.data.size} entries, expected c_out={c_out}")
    oh, ow = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {(h, w)} too small for k={k}, pad={pad}")

    count_macs(n * c_out * c_in * k * k * oh * ow)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :oh, :ow]
        y = np.einsum("nchw,oc->nohw", cols, weight.data[:, :, 0, 0], optimize=True)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        # cols: (n, c, oh, ow, k, k)
        y = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, c_out, 1, 1)
    out = Tensor(np.ascontiguousarray(y))

    def back(g):
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
            gcols = np.einsum("nohw,oc->nchw", g, weight.data[:, :, 0, 0], optimize=True)
            gxp = np.zeros_like(xp)
            gxp[:, :, :stride * oh:stride, :stride * ow:stride] = gcols
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, oh, ow, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = None if bias is None else g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, back)


def conv_transpose_channelwise(x: Tensor, weight: Tensor, stride: int) -> Tensor:
    """Per-channel transposed convolution with kernel size ``2 * stride``.

    weight has shape (c, 1, 2s, 2s). The full output is (h + 1) * s by
    (w + 1) * s; input cell (y, x) writes the kernel at (y * s, x * s).
    """
    _check4(x, "x")
    n, c, h, w = x.shape
    s = stride
    K = weight.shape[2]
    if weight.shape != (c, 1, 2 * s, 2 * s):
        raise ShapeError(f"conv_transpose_channelwise: weight {weight.shape} != {(c, 1, 2 * s, 2 * s)}")
    count_macs(n * c * h * w * K * K)
    kern = weight.data[:, 0].reshape(c, 2, s, 2, s)  # (c, a, r, b, q)
    full = np.zeros((n, c, h + 1, s, w + 1, s))
    for a in (0, 1):
        for b in (0, 1):
            full[:, :, a:a + h, :, b:b + w, :] += \
                x.data[:, :, :, None, :, None] * kern[None, :, a, :, b, :][:, :, None, :, None, :]
    out = Tensor(full.reshape(n, c, (h + 1) * s, (w + 1) * s))

    def back(g):
        g6 = g.reshape(n, c, h + 1, s, w + 1, s)
        gx = np.zeros_like(x.data)
        gk = np.zeros((c, 2, s, 2, s))
        for a in (0, 1):
            for b in (0, 1):
                blk = g6[:, :, a:a + h, :, b:b + w, :]  # (n, c, h, s, w, s)
                gx += np.einsum("ncyrxq,crq->ncyx", blk, kern[:, a, :, b, :], optimize=True)
                gk[:, a, :, b, :] += np.einsum("ncyrxq,ncyx->crq", blk, x.data, optimize=True)
        return gx, gk.reshape(c, 1, K, K)

    return _record(out, (x, weight), back)


def crop(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    _check4(x, "x")
    out = Tensor(x.data[:, :, top:top + h, left:left + w].copy())

    def back(g):
        full = np.zeros_like(x.data)
        full[:, :, top:top + h, left:left + w] = g
        return (full,)

    return _record(out, (x,), back)


def bilinear_kernel(factor: int) -> np.ndarray:
    """(2f, 2f) tent kernel; with stride f it reproduces half-pixel bilinear resizing."""
    k = 2 * factor
    center = factor - 0.5
    t = 1.0 - np.abs(np.arange(k) - center) / factor
    return np.outer(t, t)


def upsample_scores(x: Tensor, weight: Tensor, factor: int,
                    target_h: int, target_w: int) -> Tensor:
    """Learned per-channel upsampling followed by a center crop.

    For ``factor > 1`` the input is edge-replicated by one cell, passed
    through a stride-``factor`` transposed convolution with a ``2*factor``
    kernel, and cropped. With the bilinear kernel this is exactly a
    half-pixel-centred bilinear resize with clamped borders. For
    ``factor == 1`` the weight is a 1x1 per-channel gain.
    """
    _check4(x, "x")
    if factor < 1:
        raise ValueError(f"upsample_scores: factor must be >= 1, got {factor}")
    h, w = x.shape[2:]
    for name, dim, tgt in (("target_h", h, target_h), ("target_w", w, target_w)):
        lo, hi = factor * (dim - 1) + 1, factor * dim + factor
        if not lo <= tgt <= hi:
            raise ShapeError(f"upsample_scores: {name}={tgt} outside reachable range [{lo}, {hi}] for input dim {dim}")
    if factor == 1:
        if weight.shape[1:] != (1, 1, 1):
            raise ShapeError(f"upsample_scores: factor 1 needs a (c,1,1,1) weight, got {weight.shape}")
        count_macs(x.data.size)
        y = multiply(x, _as_gain(weight))
        return crop(y, 0, 0, target_h, target_w) if (target_h, target_w) != (h, w) else y
    full = conv_transpose_channelwise(pad_edge(x, 1), weight, factor)
    # drop the padded cell's contribution and centre the crop on the unpadded extent
    top = factor + ((h + 1) * factor - target_h) // 2
    left = factor + ((w + 1) * factor - target_w) // 2
    return crop(full, top, left, target_h, target_w)


def _as_gain(weight: Tensor) -> Tensor:
    # reshape (c,1,1,1) -> (1,c,1,1) while keeping the gradient path
    out = Tensor(weight.data.reshape(1, -1, 1, 1))
    return _record(out, (weight,), lambda g: (g.reshape(weight.shape),))


# ---------------------------------------------------------------------------
# classification head
# ---------------------------------------------------------------------------

def softmax_channel(x: Tensor) -> Tensor:
    _check4(x, "x")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), back)


def argmax_channel(x: Tensor) -> np.ndarray:
    """Per-pixel class index, shape (n, h, w); ties go to the lowest channel."""
    _check4(x, "x")
    return np.argmax(x.data, axis=1)


def log_softmax_channel(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(scores: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean pixel cross-entropy over non-ignored pixels.

    ``labels`` has shape (n, h, w) or (h, w) for n == 1. With no valid
    pixels the loss is 0 and the gradient is zero.
    """
    _check4(scores, "scores")
    n, c, h, w = scores.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy_loss: labels {labels.shape} vs scores spatial {(n, h, w)}")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"cross_entropy_loss: label {int(labels[bad][0])} outside [0, {c}) and != ignore_label {ignore_label}")
    count = int(valid.sum())
    safe = np.where(valid, labels, 0)
    logp = log_softmax_channel(scores.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0
    out = Tensor(loss)

    def back(g):
        if not count:
            return (np.zeros_like(scores.data),)
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None] / count
        return (grad * g,)

    return _record(out, (scores,), back)
