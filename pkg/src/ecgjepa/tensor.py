"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Provides exactly the operations the transformer model and trainer need:
matmul, non-overlapping conv1d, layer_norm, softmax, gelu, L1/BCE losses,
plus the shape plumbing (reshape/transpose/concat/narrow/gather) required
to assemble attention blocks. Values live in numpy arrays; the computation
graph is held implicitly by each Tensor's parent references, and
``backward`` replays it once in reverse topological order.

Dtype is taken from the inputs: build float64 tensors for gradient-check
test mode, float32 for training. Gradients accumulate across repeated
``backward`` calls; reset is explicit via ``zero_grads``.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "TokenizationError",
    "as_tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "conv1d",
    "layer_norm",
    "softmax",
    "gelu",
    "sigmoid",
    "l1_loss",
    "bce_with_logits",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "broadcast_to",
    "gather_tokens",
    "dropout",
    "backward",
    "zero_grads",
]


class TokenizationError(ValueError):
    """Input length incompatible with the non-overlapping patch layout."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``grad`` is populated (same shape as ``data``) once the tensor was
    reachable from a ``backward`` call; tensors never touched by a backward
    pass keep ``grad = None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A gradient-free view of the same values (stop-gradient)."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap a scalar/array as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def parameter(data) -> Tensor:
    """A learnable leaf tensor (requires_grad=True, owns its buffer)."""
    return Tensor(np.array(data), requires_grad=True)


def _result(data, parents, vjp) -> Tensor:
    # Graph edges are only recorded when some parent needs gradients, so
    # e.g. the EMA-teacher forward pass builds no graph at all.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands of ndim >= 2."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.data.ndim} and {b.data.ndim}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(out, (a, b), vjp)


def conv1d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Strided 1-d convolution producing non-overlapping patches.

    ``x`` is [channels, T] or [batch, channels, T]; ``kernel`` is
    [out_dim, channels, w]. Requires stride == w and T divisible by w (the
    tokenizer contract), so each output position is a linear map of one
    length-w window across all channels. No bias.
    """
    out_dim, channels, w = kernel.data.shape
    if stride != w:
        raise TokenizationError(f"stride {stride} must equal kernel width {w} (non-overlapping)")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != channels:
        raise TokenizationError(f"input shape {x.data.shape} incompatible with kernel {kernel.data.shape}")
    batch, _, t = xd.shape
    if t % w != 0:
        raise TokenizationError(f"length {t} not divisible by patch size {w}")
    n = t // w

    kmat = kernel.data.reshape(out_dim, channels * w)
    # [B, C, n, w] -> [B, n, C*w]
    windows = xd.reshape(batch, channels, n, w).transpose(0, 2, 1, 3).reshape(batch, n, channels * w)
    out = (windows @ kmat.T).transpose(0, 2, 1)  # [B, out_dim, n]
    if squeeze:
        out = out[0]

    def vjp(g):
        gb = g[None] if squeeze else g
        gt = gb.transpose(0, 2, 1)  # [B, n, out_dim]
        gx = (gt @ kmat).reshape(batch, n, channels, w).transpose(0, 2, 1, 3).reshape(batch, channels, t)
        gk = gt.reshape(-1, out_dim).T @ windows.reshape(-1, channels * w)
        if squeeze:
            gx = gx[0]
        return gx, gk.reshape(out_dim, channels, w)

    return _result(out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# normalization and activations


def layer_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale. No bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data

    def vjp(g):
        gscale = _unbroadcast(g * xhat, scale.data.shape)
        ghat = g * scale.data
        gx = inv * (
            ghat
            - ghat.mean(axis=-1, keepdims=True)
            - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gscale

    return _result(out, (x, scale), vjp)


def softmax(x: Tensor) -> Tensor:
    """Last-axis softmax, computed with max-subtraction for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _fast_tanh(u: np.ndarray) -> np.ndarray:
    # tanh via the SIMD-vectorized exp (numpy's tanh falls back to a scalar
    # libm loop); clipping saturates exactly where tanh does.
    u = np.clip(u, -20.0, 20.0)
    return 1.0 - 2.0 / (np.exp(2.0 * u) + 1.0)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh approximation:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
    """
    xd = x.data
    t = _fast_tanh(_GELU_C * (xd + _GELU_A * xd * xd * xd))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference over all elements.

    The target is treated as a constant (stop-gradient): gradients flow
    only into ``pred``.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.data.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out = np.abs(diff).mean()

    def vjp(g):
        return (g * np.sign(diff) / diff.size,)

    return _result(np.asarray(out), (pred,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from logits, stable in both tails."""
    tgt = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.data.shape != tgt.shape:
        raise ValueError(f"bce shape mismatch: {logits.data.shape} vs {tgt.shape}")
    x = logits.data
    out = (np.maximum(x, 0.0) - x * tgt + np.log1p(np.exp(-np.abs(x)))).mean()

    def vjp(g):
        return (g * (_sigmoid_np(x) - tgt) / x.size,)

    return _result(np.asarray(out), (logits,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _result(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _result(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _result(out, (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(out, (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def vjp(g):
        return (_unbroadcast(g, x.data.shape),)

    return _result(out, (x,), vjp)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select per-element token rows: out[b, i, :] = x[b, idx[b, i], :]."""
    idx = np.asarray(idx)
    if idx.ndim != 2 or x.data.ndim != 3:
        raise ValueError("gather_tokens expects x[B,T,D] and idx[B,K]")
    batch_ix = np.arange(x.data.shape[0])[:, None]
    out = x.data[batch_ix, idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch_ix, idx), g)
        return (gx,)

    return _result(out, (x,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout; identity when p == 0 or train is False."""
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * keep

    def vjp(g):
        return (g * keep,)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable tensor
    with requires_grad. The graph is walked exactly once per call; repeated
    calls without ``zero_grads`` keep accumulating.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    """Explicit gradient reset (tensors may be an iterable or dict)."""
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = None
