"""Reverse-mode differentiable tensor engine, sized for this toolkit.

Float64 numpy buffers with a recorded tape: each produced tensor keeps a
closure that routes its upstream gradient to its parents. Exactly the layers
the autoencoder needs are provided (1-D same-padded convolution, affine
maps, softmax attention, the losses) plus an Adam optimizer and a central
finite-difference gradient checker that serves as the engine's contract.

Not a general framework: no GPU, no broadcasting beyond what the layers
use, single logical writer for parameter buffers.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A gradient or loss value left the finite range."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        """Add a gradient that may alias another buffer (copies on first use)."""
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        """Add a gradient whose buffer the caller hands over exclusively."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __truediv__(self, other):
        return div(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _push(t: Tensor, g: np.ndarray, shared: np.ndarray) -> None:
    """Accumulate into t; skips the defensive copy when g is a fresh buffer.

    ``shared`` is the upstream gradient the closure received: anything that
    still *is* that object (or a view) must be copied, anything newly
    computed can be handed over.
    """
    if g is shared or g.base is not None or not g.flags.owndata:
        t._accumulate(g)
    else:
        t._accumulate_owned(g)


# -- elementwise and shape ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g, a.data.shape), g)
        if b.requires_grad:
            _push(b, _unbroadcast(g, b.data.shape), g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g, a.data.shape), g)
        if b.requires_grad:
            _push(b, _unbroadcast(-g, b.data.shape), g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g * b.data, a.data.shape), g)
        if b.requires_grad:
            _push(b, _unbroadcast(g * a.data, b.data.shape), g)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _push(a, _unbroadcast(g / b.data, a.data.shape), g)
        if b.requires_grad:
            _push(b, _unbroadcast(-g * a.data / b.data**2, b.data.shape), g)

    return _make(a.data / b.data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def backward(g):
        if a.requires_grad:
            _push(a, g * p * a.data ** (p - 1.0), g)

    return _make(a.data**p, (a,), backward)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate_owned(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows by integer index; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            a._accumulate_owned(da)

    return _make(a.data[idx], (a,), backward)


# -- activations --------------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(g * (a.data > 0.0))  # subgradient at 0 is 0

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))  # stable on both sides
    pos = 1.0 / (1.0 + e)
    out_data = np.where(x >= 0, pos, 1.0 - pos)

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out_data, out=out_data)
    out_data /= out_data.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            gx = g - inner
            gx *= out_data
            a._accumulate_owned(gx)

    return _make(out_data, (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """np.matmul semantics for >= 2-D operands, batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _push(a, _unbroadcast(ga, a.data.shape), g)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _push(b, _unbroadcast(gb, b.data.shape), g)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Affine map on the trailing axis: x[..., d_in] -> x @ w + b."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(f"linear: input width {x.data.shape[-1]} != {d_in}")

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accumulate_owned((g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            w._accumulate_owned(x.data.reshape(-1, d_in).T @ g2)
        if b.requires_grad:
            b._accumulate_owned(g2.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def conv1d(x, w, b) -> Tensor:
    """Same-padded 1-D cross-correlation along the last axis.

    x: (C_in, T) or (B, C_in, T); w: (C_out, C_in, K) with K odd; b: (C_out,).
    Output length equals T (zero padding of K//2 on both sides).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    c_out, c_in, k = w.data.shape
    if k % 2 != 1:
        raise ValueError(f"conv1d kernel length must be odd, got {k}")
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ValueError(f"conv1d: input shape {x.data.shape} incompatible with kernel {w.data.shape}")
    if b.data.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {b.data.shape} != ({c_out},)")
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)  # (B, C_in, T, K)
    out_data = np.tensordot(win, w.data, axes=([1, 3], [1, 2]))  # (B, T, C_out)
    out_data = out_data.transpose(0, 2, 1) + b.data[:, None]

    def backward(g):
        if squeeze:
            g = g[None]
        if b.requires_grad:
            b._accumulate_owned(g.sum(axis=(0, 2)))
        if w.requires_grad:
            w._accumulate_owned(np.tensordot(g, win, axes=([0, 2], [0, 2])))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad)))
            gwin = sliding_window_view(gp, k, axis=2)  # (B, C_out, T, K)
            wflip = w.data[:, :, ::-1]
            gx = np.tensordot(gwin, wflip, axes=([1, 3], [0, 2])).transpose(0, 2, 1)
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data[0] if squeeze else out_data, (x, w, b), backward)


def multi_head_attention(tokens, w_q, w_k, w_v, w_o, b_o, return_weights=False):
    """Scaled dot-product self-attention with per-head projections.

    tokens: (T, d) or (B, T, d); w_q/w_k/w_v: per-head lists of (d, d_k)
    matrices; w_o: (H*d_k, d). The concatenated heads pass through the output
    projection and a ReLU. With ``return_weights`` the (B, H, T, T)
    attention distributions come back alongside the output.

    Heads are stacked and evaluated in one batch; each head still owns its
    projection matrices.
    """
    tokens = _as_tensor(tokens)
    squeeze = tokens.data.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.data.shape)
    n_b, seq_len, d = tokens.data.shape
    n_heads = len(w_q)
    d_k = w_q[0].data.shape[1]

    wq, wk, wv = stack(w_q), stack(w_k), stack(w_v)  # (H, d, d_k)
    tok4 = reshape(tokens, (n_b, 1, seq_len, d))
    # fold the 1/sqrt(d_k) score scale into q: cheaper than scaling T x T scores
    q = mul(matmul(tok4, wq), 1.0 / math.sqrt(d_k))  # (B, H, T, d_k)
    key = matmul(tok4, wk)
    v = matmul(tok4, wv)
    scores = matmul(q, transpose(key, (0, 1, 3, 2)))
    attn = softmax(scores, axis=-1)
    heads = matmul(attn, v)  # (B, H, T, d_k)
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (n_b, seq_len, n_heads * d_k))
    out = relu(linear(merged, w_o, b_o))
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    if return_weights:
        return out, attn
    return out


# -- losses --------------------------------------------------------------------


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse: shape mismatch {a.data.shape} vs {b.data.shape}")
    return tmean(power(sub(a, b), 2.0))


def cosine_distance(a, b) -> Tensor:
    """1 - cos(a, b) for 1-D vectors; in [0, 2]. Zero-norm input is an error."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError("cosine_distance expects two equal-length vectors")
    if np.linalg.norm(a.data) == 0.0 or np.linalg.norm(b.data) == 0.0:
        raise ValueError("cosine_distance undefined for zero-norm vectors")
    dot = tsum(mul(a, b))
    denom = mul(sqrt(tsum(power(a, 2.0))), sqrt(tsum(power(b, 2.0))))
    return sub(1.0, div(dot, denom))


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers and step counter for a parameter list."""

    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 2e-5) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on the parameter buffers."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params/grads/state lengths differ")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- verification -----------------------------------------------------------------


def grad_check(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` rebuilds the scalar loss from the current parameter buffers on
    every call. Relative error per element is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
            worst = max(worst, rel)
    return worst


# -- initialization ----------------------------------------------------------------


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
