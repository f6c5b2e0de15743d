"""Minimal dense reverse-mode automatic differentiation on numpy arrays.

Every value is a :class:`Tensor` wrapping a float64 array.  Primitive
operations record their parents and a closure mapping the output gradient to
input gradients; :func:`backward` walks the resulting graph in reverse
topological order.  Gradients accumulate into ``Tensor.grad`` of leaves that
require them, so two calls to :func:`backward` without
:meth:`ParamStore.zero_grad` add up.

Primitives also report multiply-accumulate style work units to an optional
:class:`OpCounter`, which the benchmark harness uses for noise-free scaling
exponents.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Work counters
# ---------------------------------------------------------------------------


class OpCounter:
    """Accumulates work units per primitive category."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, category: str, n: int) -> None:
        self.counts[category] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __repr__(self):
        return f"OpCounter({dict(self.counts)})"


_counters: list[OpCounter] = []


@contextlib.contextmanager
def counting():
    """Context manager collecting work units of all primitives run inside."""
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def count(category: str, n: int) -> None:
    for c in _counters:
        c.add(category, n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array with an optional link into the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _node(data, parents, backward_fn):
    """Build an op output; drops the graph link if no parent needs a gradient."""
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def relu(x) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), lambda g: (g * (x.data > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when not training."""
    x = as_tensor(x)
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)
    return _node(out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    advanced = isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    )

    def bw(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (x,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0 else
                reshape(t, t.shape + (1,)) for t in tensors]
    return concat(expanded, axis=axis)


def pad_left(x, n: int, axis: int = -2) -> Tensor:
    """Zero-pad ``n`` positions at the start of ``axis``."""
    x = as_tensor(x)
    if n <= 0:
        return x
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (n, 0)
    out = np.pad(x.data, widths)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(n, None)
    sl = tuple(sl)
    return _node(out, (x,), lambda g: (g[sl],))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra primitives
# ---------------------------------------------------------------------------


def affine(x, W, b=None, rowwise: bool = False) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``.

    With ``rowwise`` the product uses a non-BLAS contraction whose result for
    a row does not depend on how many other rows are in the batch (BLAS picks
    different kernels by shape, which perturbs the last bits).
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} does not match W {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = np.einsum("ij,jk->ik", x2, W.data, optimize=False) if rowwise else x2 @ W.data
    if b is not None:
        out += b.data
    count("affine", x2.shape[0] * W.shape[0] * W.shape[1])
    out = out.reshape(lead + (W.shape[1],))
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(out, parents, bw)


def causal_windows(x, length: int, category: str = "window") -> Tensor:
    """Stack the trailing ``length`` positions at every time step.

    ``x`` has shape (..., T, C); the result has shape (..., T, length * C)
    with position ``t`` holding ``x[t-length+1 .. t]`` (oldest first), zero
    padded on the left.
    """
    x = as_tensor(x)
    if length < 1:
        raise ShapeError("window length must be >= 1")
    T, C = x.shape[-2], x.shape[-1]
    widths = [(0, 0)] * (x.ndim - 2) + [(length - 1, 0), (0, 0)]
    xp = np.pad(x.data, widths)
    # (..., T, C, length) -> (..., T, length, C)
    win = np.lib.stride_tricks.sliding_window_view(xp, length, axis=-2)
    win = np.swapaxes(win, -1, -2)
    out = win.reshape(x.shape[:-2] + (T, length * C))
    count(category, int(np.prod(x.shape[:-2], dtype=np.int64)) * T * length * C)

    def bw(g):
        g = g.reshape(x.shape[:-2] + (T, length, C))
        gp = np.zeros(xp.shape)
        for k in range(length):
            gp[..., k:k + T, :] += g[..., k, :]
        return (gp[..., length - 1:, :],)

    return _node(out, (x,), bw)


def dilated_causal_conv1d(x, kernel, dilation: int = 1, bias=None) -> Tensor:
    """Causal 1-D convolution with left zero padding.

    ``x``: (..., T, Cin); ``kernel``: (K, Cin, Cout).  Output position ``t`` is
    ``sum_k x[t - (K-1-k)*dilation] @ kernel[k]`` so it never reads the future.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1:
        raise ShapeError("dilation must be >= 1")
    if kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv: x {x.shape} incompatible with kernel {kernel.shape}")
    K, Cin, Cout = kernel.shape
    T = x.shape[-2]
    lead = x.shape[:-2]
    xd = x.data
    # tap k reads x[t - shift_k]; positions before the start are zero
    shifts = [(K - 1 - k) * dilation for k in range(K)]
    out = xd @ kernel.data[K - 1] if shifts[-1] == 0 else np.zeros(lead + (T, Cout))
    for k in range(K):
        s = shifts[k]
        if s == 0 and k == K - 1:
            continue
        if s < T:
            out[..., s:, :] += xd[..., :T - s, :] @ kernel.data[k]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    count("conv", int(np.prod(lead, dtype=np.int64)) * T * K * Cin * Cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros(xd.shape)
            for k in range(K):
                s = shifts[k]
                if s < T:
                    gx[..., :T - s, :] += g[..., s:, :] @ kernel.data[k].T
        gk = None
        if kernel.requires_grad:
            gk = np.zeros(kernel.shape)
            for k in range(K):
                s = shifts[k]
                if s < T:
                    gk[k] = xd[..., :T - s, :].reshape(-1, Cin).T @ g[..., s:, :].reshape(-1, Cout)
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, Cout).sum(axis=0)

    return _node(out, parents, bw)


def recurrent_cell_step(x_t, h_prev, params) -> Tensor:
    """Elman cell ``tanh(x W_x + h U + b)``; ``params = (W_x, U, b)``.

    ``x_t`` may carry extra leading axes (batch, interleaved chains).
    """
    Wx, U, b = (as_tensor(p) for p in params)
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    if x_t.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != U.shape[0]:
        raise ShapeError("recurrent_cell_step: operand shapes do not match parameters")
    if x_t.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"recurrent_cell_step: {x_t.shape} vs {h_prev.shape}")
    out = np.tanh(x_t.data @ Wx.data + h_prev.data @ U.data + b.data)
    rows = int(np.prod(x_t.shape[:-1], dtype=np.int64))
    count("recurrent", rows * (Wx.shape[0] + U.shape[0]) * U.shape[1])

    def bw(g):
        gz = g * (1.0 - out * out)
        gz2 = gz.reshape(-1, gz.shape[-1])
        return (
            gz @ Wx.data.T,
            gz @ U.data.T,
            x_t.data.reshape(-1, Wx.shape[0]).T @ gz2,
            h_prev.data.reshape(-1, U.shape[0]).T @ gz2,
            gz2.sum(axis=0),
        )

    return _node(out, (x_t, h_prev, Wx, U, b), bw)


def lstm_cell_step(x_t, state_prev, params):
    """LSTM cell composed from primitives.

    ``state_prev = (h, c)``; ``params = (W_x, U, b)`` with gate blocks ordered
    input, forget, candidate, output.  Returns ``(h, c)``.
    """
    h_prev, c_prev = state_prev
    Wx, U, b = params
    n = as_tensor(U).shape[0]
    z = add(affine(x_t, Wx, b), affine(h_prev, U))
    count("lstm", int(np.prod(z.shape[:-1], dtype=np.int64)) * (as_tensor(Wx).shape[0] + n) * 4 * n)
    i = sigmoid(z[..., 0 * n:1 * n])
    f = sigmoid(z[..., 1 * n:2 * n])
    cand = tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:4 * n])
    c = add(mul(f, c_prev), mul(i, cand))
    h = mul(o, tanh(c))
    return h, c


def scaled_dot_attention(Q, K, V, causal_mask=None, dropout_p: float = 0.0,
                         rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Softmax attention ``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    ``causal_mask`` is a boolean (Tq, Tk) array, True where attention is
    allowed.  Rows with no allowed key produce zeros.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    d = Q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    S = (Q.data @ np.swapaxes(K.data, -1, -2)) * scale
    if causal_mask is not None:
        causal_mask = np.asarray(causal_mask, dtype=bool)
        if causal_mask.shape != S.shape[-2:]:
            raise ShapeError(f"mask {causal_mask.shape} does not match scores {S.shape[-2:]}")
        S = np.where(causal_mask, S, -np.inf)
    smax = S.max(axis=-1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    E = np.exp(S - smax)
    denom = E.sum(axis=-1, keepdims=True)
    P = E / np.where(denom > 0, denom, 1.0)
    if training and dropout_p > 0.0 and rng is not None:
        keep = (rng.random(P.shape) >= dropout_p) / (1.0 - dropout_p)
    else:
        keep = None
    Pd = P * keep if keep is not None else P
    out = Pd @ V.data
    lead = int(np.prod(S.shape[:-2], dtype=np.int64))
    count("attention", lead * S.shape[-2] * S.shape[-1] * (d + V.shape[-1]))

    def bw(g):
        gV = np.swapaxes(Pd, -1, -2) @ g
        gPd = g @ np.swapaxes(V.data, -1, -2)
        gP = gPd * keep if keep is not None else gPd
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * scale
        gQ = gS @ K.data
        gK = np.swapaxes(gS, -1, -2) @ Q.data
        return _unbroadcast(gQ, Q.shape), _unbroadcast(gK, K.shape), _unbroadcast(gV, V.shape)

    return _node(out, (Q, K, V), bw)


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------


def pinball_elem(y, yhat, q) -> Tensor:
    """Elementwise quantile loss ``max(q (y - yhat), (q - 1)(y - yhat))``.

    ``y`` and ``q`` are treated as constants; only ``yhat`` is differentiated.
    """
    yhat = as_tensor(yhat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    shape = _check_broadcast(Tensor(y), yhat)
    _check_broadcast(Tensor(np.empty(shape)), Tensor(q))
    diff = y - yhat.data
    out = np.maximum(q * diff, (q - 1.0) * diff)
    dyhat = np.where(diff > 0, -q, np.where(diff < 0, 1.0 - q, 0.0))
    return _node(out, (yhat,), lambda g: (_unbroadcast(g * dyhat, yhat.shape),))


def masked_mean(x, mask) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` (broadcastable) is True."""
    x = as_tensor(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    n = int(m.sum())
    if n == 0:
        raise ContractError("masked_mean over an empty mask")
    w = m / n
    out = np.array((x.data * w).sum())
    return _node(out, (x,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a loss, in topological order (parents first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients are added to ``.grad`` of every leaf requiring them.  When a
    ``store`` is given, its parameters that the loss does not reach get a
    zero gradient slot.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        for p in store.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


CHECKPOINT_HEADER = "# forkseq-checkpoint v1"


class ParamStore(dict):
    """Ordered mapping ``name -> Tensor`` of trainable leaves."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def create(self, name: str, shape, init: str = "glorot", fan_in: int | None = None) -> Tensor:
        if name in self:
            raise ContractError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "glorot":
            fi = fan_in if fan_in is not None else (int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0])
            fo = shape[-1]
            lim = math.sqrt(6.0 / (fi + fo))
            data = self.rng.uniform(-lim, lim, size=shape)
        elif init == "normal":
            data = self.rng.normal(0.0, 0.1, size=shape)
        else:
            raise ContractError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = np.zeros_like(p.data)

    def n_params(self) -> int:
        return sum(p.size for p in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.values()]) if self else np.zeros(0)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in self.values()
        ]) if self else np.zeros(0)

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.values():
            n = p.size
            p.data = np.array(vec[i:i + n], dtype=DTYPE).reshape(p.shape)
            i += n

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed)
        for k, p in self.items():
            other[k] = Tensor(p.data.copy(), requires_grad=True, name=k)
        return other

    def save(self, path) -> None:
        """Write ``name,shape,values`` rows under a version header.

        Shapes are ``x``-joined integers; values are space separated
        round-trip ``repr`` floats so a reload is bit exact.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CHECKPOINT_HEADER + "\n")
            fh.write(f"# seed={self.seed}\n")
            fh.write("name,shape,values\n")
            for name, p in self.items():
                shape = "x".join(str(s) for s in p.shape) or "scalar"
                vals = " ".join(repr(float(v)) for v in p.data.ravel())
                fh.write(f"{name},{shape},{vals}\n")

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != CHECKPOINT_HEADER:
            raise ContractError(f"{path}: not a forkseq checkpoint")
        seed = 0
        body = []
        for line in lines[1:]:
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            elif line.startswith("#") or line == "name,shape,values" or not line:
                continue
            else:
                body.append(line)
        store = cls(seed)
        for line in body:
            name, shape, vals = line.split(",", 2)
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            data = np.array([float(v) for v in vals.split()], dtype=DTYPE).reshape(dims)
            store[name] = Tensor(data, requires_grad=True, name=name)
        return store


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, epsilon: float = 1e-5,
               n_coords: int | None = None, seed: int = 0, kink_tol: float = 1e-3,
               names: Iterable[str] | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  With ``n_coords`` set, that
    many coordinates are sampled uniformly (without replacement) across the
    selected parameters.  Coordinates whose two one-sided differences disagree
    by more than ``kink_tol`` straddle a non-differentiable point (a relu
    kink) and are skipped.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-7, 1e-3]")
    selected = list(names) if names is not None else list(store.keys())
    store.zero_grad()
    loss = f(store)
    backward(loss, store)
    f0 = loss.item()
    coords = [(n, i) for n in selected for i in range(store[n].size)]
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for name, i in coords:
        p = store[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(store).item()
        flat[i] = orig - epsilon
        fm = f(store).item()
        flat[i] = orig
        right = (fp - f0) / epsilon
        left = (f0 - fm) / epsilon
        if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
            continue
        numeric = (fp - fm) / (2.0 * epsilon)
        analytic = p.grad.reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
