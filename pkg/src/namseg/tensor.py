"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of primitives the classifier needs are provided:
conv2d, relu, maxpool2, gap, fc, softmax_xent, concat, plus elementwise
add and scalar multiply. Every op accepts a single sample or a leading
batch axis; shapes are given in the docstrings. All computation is
float64 and deterministic.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GeometryError, StateError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float64 array, optionally a node in an autodiff graph.

    `data` is a contiguous row-major ndarray. Tensors produced by ops are
    treated as immutable; parameters are mutated only by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- arithmetic (same-shape add, scalar multiply) -------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.broadcast_to(float(other), self.shape))
        if self.shape != other.shape:
            raise DimensionError(f"add shapes differ: {self.shape} vs {other.shape}")
        out = _node(self.data + other.data, (self, other))
        if out._parents:
            def backward(g):
                return g, g
            out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, scalar):
        s = float(scalar)
        out = _node(self.data * s, (self,))
        if out._parents:
            out._backward = lambda g: (g * s,)
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))


def _node(data, parents) -> Tensor:
    """Make an op output, linked to `parents` when recording is on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
    return out


def backward(loss: Tensor):
    """Run reverse-mode autodiff from a scalar loss.

    Accumulates `.grad` (an ndarray) on every tensor in the recorded
    graph, parameters included. Raises StateError if `loss` carries no
    recorded forward graph.
    """
    if not loss._parents:
        raise StateError("backward before forward: no recorded graph on this tensor")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g


# -- shape plumbing ------------------------------------------------------

def _with_batch(a: np.ndarray, rank: int):
    """View `a` with a leading batch axis; report whether one was added."""
    if a.ndim == rank:
        return a[None], True
    if a.ndim == rank + 1:
        return a, False
    raise DimensionError(f"expected {rank}-d or {rank + 1}-d input, got shape {a.shape}")


# -- layer primitives ----------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with bias.

    x: (C_in,H,W) or (N,C_in,H,W); kernel: (C_out,C_in,kH,kW); bias: (C_out,).
    Output spatial size (H + 2*pad - kH)/stride + 1 must be integral.
    """
    xb, squeeze = _with_batch(x.data, 3)
    cout, cin, kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise GeometryError(f"kernel sides must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise GeometryError(f"invalid stride={stride} pad={pad}")
    n, c, h, w = xb.shape
    if c != cin:
        raise DimensionError(f"input channels {c} != kernel in-channels {cin}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"bias shape {bias.data.shape} != ({cout},)")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise GeometryError(f"non-integral output size for input {h}x{w}, "
                            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise GeometryError(f"empty output {ho}x{wo}")

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    cols_t = _im2col_t(xp, kh, kw, stride, ho, wo)   # (cin*kh*kw, n*ho*wo)
    wmat = kernel.data.reshape(cout, -1)
    y_t = wmat @ cols_t + bias.data[:, None]
    y = np.ascontiguousarray(y_t.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    out = _node(y[0] if squeeze else y, (x, kernel, bias))
    if out._parents:
        def backward_fn(g):
            gb = g[None] if squeeze else g
            gmat_t = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(cout, -1)
            dw = (gmat_t @ cols_t.T).reshape(kernel.data.shape)
            db = gmat_t.sum(axis=1)
            dcols_t = (wmat.T @ gmat_t).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols_t[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            return (dx[0] if squeeze else dx), dw, db
        out._backward = backward_fn
    return out


def _im2col_t(xp, kh, kw, stride, ho, wo):
    """Patch matrix (cin*kh*kw, n*ho*wo); this layout keeps the copy's
    innermost axis stride-1 in the source."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(v.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at exactly 0 is 0."""
    out = _node(np.maximum(x.data, 0.0), (x,))
    if out._parents:
        mask = x.data > 0
        out._backward = lambda g: (g * mask,)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (C,H,W) or (N,C,H,W); H, W even."""
    xb, squeeze = _with_batch(x.data, 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2 needs even sides, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = xb.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)            # first max wins: deterministic ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    out = _node(y[0] if squeeze else y, (x,))
    if out._parents:
        def backward_fn(g):
            gb = g[None] if squeeze else g
            dwin = np.zeros((n, c, h2, w2, 4))
            np.put_along_axis(dwin, idx[..., None], gb[..., None], axis=-1)
            dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (dx[0] if squeeze else dx),
        out._backward = backward_fn
    return out


def gap(x: Tensor) -> Tensor:
    """Global average pooling: (K,H,W) -> (K,) or (N,K,H,W) -> (N,K).

    Implements the spatial mean; the downstream FC layer absorbs the
    1/(H*W) constant relative to a sum-pooling convention.
    """
    xb, squeeze = _with_batch(x.data, 3)
    n, k, h, w = xb.shape
    y = xb.mean(axis=(2, 3))
    out = _node(y[0] if squeeze else y, (x,))
    if out._parents:
        def backward_fn(g):
            gb = g[None] if squeeze else g
            dx = np.broadcast_to(gb[:, :, None, None] / (h * w), xb.shape).copy()
            return (dx[0] if squeeze else dx),
        out._backward = backward_fn
    return out


def fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map weight @ x + bias; x: (K,) or (N,K), weight: (M,K), bias: (M,)."""
    xb, squeeze = _with_batch(x.data, 1)
    m, k = weight.data.shape
    if xb.shape[1] != k:
        raise DimensionError(f"fc features {xb.shape[1]} != weight columns {k}")
    if bias.data.shape != (m,):
        raise DimensionError(f"fc bias shape {bias.data.shape} != ({m},)")
    y = xb @ weight.data.T + bias.data
    out = _node(y[0] if squeeze else y, (x, weight, bias))
    if out._parents:
        def backward_fn(g):
            gb = g[None] if squeeze else g
            dx = gb @ weight.data
            dw = gb.T @ xb
            db = gb.sum(axis=0)
            return (dx[0] if squeeze else dx), dw, db
        out._backward = backward_fn
    return out


def softmax_xent(logits: Tensor, label) -> Tensor:
    """Cross-entropy -log softmax(logits)[label], max-shifted for stability.

    logits: (M,) with int label, or (N,M) with an int array of labels
    (returns the mean loss). Output is a scalar tensor.
    """
    lb, squeeze = _with_batch(logits.data, 1)
    n, m = lb.shape
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if squeeze and labels.shape != (1,):
        raise DimensionError(f"expected one label for 1-d logits, got {labels.shape}")
    if not squeeze and labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= m:
        raise IndexError(f"label out of range [0, {m})")

    shifted = lb - lb.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, labels]
    out = _node(losses.mean(), (logits,))
    if out._parents:
        def backward_fn(g):
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, labels] -= 1.0
            d = g.item() * p / n
            return (d[0] if squeeze else d),
        out._backward = backward_fn
    return out


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate feature vectors along the last axis ((K,) or (N,K))."""
    if not tensors:
        raise DimensionError("concat of empty list")
    datas = [t.data for t in tensors]
    ndims = {d.ndim for d in datas}
    if len(ndims) != 1:
        raise DimensionError("concat inputs must share rank")
    y = np.concatenate(datas, axis=-1)
    out = _node(y, tuple(tensors))
    if out._parents:
        sizes = [d.shape[-1] for d in datas]
        splits = np.cumsum(sizes)[:-1]
        out._backward = lambda g: tuple(np.split(g, splits, axis=-1))
    return out
