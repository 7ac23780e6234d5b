"""Minimal reverse-mode differentiable tensor substrate.

Dense f64 tensors with a tape built from per-op backward closures, plus the
handful of structured ops the coordination engine needs: a GRU cell,
single-query cross-attention, width-3 1-D convolution and one round of
mean-aggregated graph message passing.  Everything is numpy under the hood;
forward evaluation is deterministic and bit-stable for identical inputs.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ValueError):
    """Raised on NaN/Inf inputs to ops that require finite values."""


class EmptyVocabularyError(ValueError):
    """Raised when attention is asked to attend over zero rows."""


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (rollout fast path)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense f64 array plus optional gradient bookkeeping.

    ``data`` is the value buffer (row-major numpy array), ``grad`` is
    populated by :func:`backward` and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out broadcasted axes so the gradient matches the parent's shape.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          backward: Callable[[Tensor], None] | None) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._op = op
        out._backward = backward and (lambda: backward(out))
    return out


# -- elementwise and linear algebra -------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _node(data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _node(data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), "div", bw)


def matmul(a, b) -> Tensor:
    """Matrix product with gradients to both operands.

    Accepts 1-D operands with the usual numpy promotion rules; inner
    dimensions must agree.
    """
    a, b = _wrap(a), _wrap(b)
    ash, bsh = a.data.shape, b.data.shape
    a_inner = ash[-1] if ash else None
    b_inner = bsh[-2] if len(bsh) >= 2 else (bsh[0] if bsh else None)
    if a_inner is None or b_inner is None or a_inner != b_inner:
        raise ShapeError(f"matmul shape mismatch: {ash} x {bsh}")
    data = a.data @ b.data

    def bw(out: Tensor) -> None:
        g = out.grad
        a2 = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
        b2 = b.data if b.data.ndim == 2 else b.data.reshape(-1, 1)
        if a.data.ndim == 1 and b.data.ndim == 1:
            g2 = np.asarray(g).reshape(1, 1)
        elif a.data.ndim == 1:
            g2 = np.asarray(g).reshape(1, -1)
        elif b.data.ndim == 1:
            g2 = np.asarray(g).reshape(-1, 1)
        else:
            g2 = g
        if a.requires_grad:
            a._accumulate((g2 @ b2.T).reshape(a.data.shape))
        if b.requires_grad:
            b._accumulate((a2.T @ g2).reshape(b.data.shape))

    return _node(data, (a, b), "matmul", bw)


def transpose(a) -> Tensor:
    a = _wrap(a)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad.T)

    return _node(a.data.T, (a,), "transpose", bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad.reshape(old))

    return _node(a.data.reshape(shape), (a,), "reshape", bw)


def take(a, idx) -> Tensor:
    """Indexing/gather; gradients scatter-add back to the source."""
    a = _wrap(a)
    data = a.data[idx]

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    return _node(data, (a,), "take", bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(out: Tensor) -> None:
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + s)
                p._accumulate(out.grad[tuple(sl)])
            offset += s

    return _node(data, tuple(parts), "concat", bw)


def stack(parts: Sequence) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.stack([p.data for p in parts])

    def bw(out: Tensor) -> None:
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(out.grad[i])

    return _node(data, tuple(parts), "stack", bw)


def tsum(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis=axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), "sum", bw)


def tmean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    return mul(tsum(a), 1.0 / n)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * data)

    return _node(data, (a,), "exp", bw)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _node(data, (a,), "log", bw)


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - data * data))

    return _node(data, (a,), "tanh", bw)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # Stable piecewise evaluation.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * data * (1.0 - data))

    return _node(data, (a,), "sigmoid", bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    return _node(data, (a,), "relu", bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    data = np.where(a.data > 0.0, a.data, slope * a.data)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * np.where(a.data > 0.0, 1.0, slope))

    return _node(data, (a,), "leaky_relu", bw)


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    data = np.logaddexp(0.0, x)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(out.grad * s)

    return _node(data, (a,), "softplus", bw)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = _wrap(a)
    data = np.maximum(a.data, floor)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > floor))

    return _node(data, (a,), "clip_min", bw)


def softmax(a) -> Tensor:
    """Shift-invariant softmax along the last axis.

    Rejects non-finite inputs; outputs are positive and sum to one along
    the normalized axis.
    """
    a = _wrap(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN/Inf")
    if a.data.size == 0:
        raise ShapeError("softmax on empty tensor")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True)
            a._accumulate(data * (g - dot))

    return _node(data, (a,), "softmax", bw)


def cross_entropy(logits, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    p = softmax(logits)
    return -log(clip_min(take(p, label), 1e-12))


# -- structured ops ------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def gru_step(h, x, params: dict) -> Tensor:
    """One gated-recurrent-unit update (fused op with a manual backward).

    ``h`` is the previous hidden state (d,) or (B, d); ``x`` the input
    (k,) or (B, k).  ``params`` holds Wz/Uz/bz, Wr/Ur/br, Wc/Uc/bc with
    W* of shape (k, d) and U* of shape (d, d).  The new state is the
    convex blend (1-z)*candidate + z*h, so entries stay in (-1, 1) for
    hidden states that start there.
    """
    h, x = _wrap(h), _wrap(x)
    d = h.data.shape[-1]
    k = x.data.shape[-1]
    for name, want in (("Wz", (k, d)), ("Uz", (d, d)), ("bz", (d,)),
                       ("Wr", (k, d)), ("Ur", (d, d)), ("br", (d,)),
                       ("Wc", (k, d)), ("Uc", (d, d)), ("bc", (d,))):
        got = params[name].data.shape
        if got != want:
            raise ShapeError(f"gru_step param {name}: expected {want}, got {got}")
    hv, xv = h.data, x.data
    p = {name: t.data for name, t in params.items()}
    z = _sigmoid_np(xv @ p["Wz"] + hv @ p["Uz"] + p["bz"])
    r = _sigmoid_np(xv @ p["Wr"] + hv @ p["Ur"] + p["br"])
    rh = r * hv
    c = np.tanh(xv @ p["Wc"] + rh @ p["Uc"] + p["bc"])
    out_data = (1.0 - z) * c + z * hv
    ordered = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc")
    parents = (h, x) + tuple(params[n] for n in ordered)

    def bw(out: Tensor) -> None:
        g = out.grad
        h2 = hv if hv.ndim == 2 else hv.reshape(1, -1)
        x2 = xv if xv.ndim == 2 else xv.reshape(1, -1)
        g2 = g if g.ndim == 2 else g.reshape(1, -1)
        z2 = z if z.ndim == 2 else z.reshape(1, -1)
        r2 = r if r.ndim == 2 else r.reshape(1, -1)
        c2 = c if c.ndim == 2 else c.reshape(1, -1)
        rh2 = rh if rh.ndim == 2 else rh.reshape(1, -1)
        dh = g2 * z2
        dz_pre = g2 * (h2 - c2) * z2 * (1.0 - z2)
        dc_pre = g2 * (1.0 - z2) * (1.0 - c2 * c2)
        drh = dc_pre @ p["Uc"].T
        dr_pre = drh * h2 * r2 * (1.0 - r2)
        dh = dh + drh * r2 + dz_pre @ p["Uz"].T + dr_pre @ p["Ur"].T
        dx = dz_pre @ p["Wz"].T + dr_pre @ p["Wr"].T + dc_pre @ p["Wc"].T
        if h.requires_grad:
            h._accumulate(dh.reshape(hv.shape))
        if x.requires_grad:
            x._accumulate(dx.reshape(xv.shape))
        grads = {"Wz": x2.T @ dz_pre, "Uz": h2.T @ dz_pre, "bz": dz_pre.sum(axis=0),
                 "Wr": x2.T @ dr_pre, "Ur": h2.T @ dr_pre, "br": dr_pre.sum(axis=0),
                 "Wc": x2.T @ dc_pre, "Uc": rh2.T @ dc_pre, "bc": dc_pre.sum(axis=0)}
        for name in ordered:
            t = params[name]
            if t.requires_grad:
                t._accumulate(grads[name])

    return _node(out_data, parents, "gru_step", bw)


def cross_attention(q, keys, vals) -> Tensor:
    """Single-query scaled dot-product attention over (keys, vals) rows."""
    q, keys, vals = _wrap(q), _wrap(keys), _wrap(vals)
    if keys.data.ndim != 2 or keys.data.shape[0] == 0:
        raise EmptyVocabularyError("cross_attention requires at least one key row")
    d = q.data.shape[-1]
    if keys.data.shape[1] != d:
        raise ShapeError(f"cross_attention: query dim {d} vs key dim {keys.data.shape[1]}")
    scores = mul(matmul(keys, q), 1.0 / math.sqrt(d))
    w = softmax(scores)
    return matmul(w, vals)


def conv1d_width3(x, w, b) -> Tensor:
    """Width-3 1-D convolution with zero padding (same length output)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    n = x.data.shape[0]
    if w.data.shape != (3,):
        raise ShapeError(f"conv1d_width3 kernel must have shape (3,), got {w.data.shape}")
    zero = Tensor(np.zeros(1))
    xp = concat([zero, x, zero])
    y = add(add(mul(take(xp, slice(0, n)), take(w, 0)),
                mul(take(xp, slice(1, n + 1)), take(w, 1))),
            mul(take(xp, slice(2, n + 2)), take(w, 2)))
    return add(y, b)


def graph_message_pass(node_feats, edges: Iterable[tuple[int, int]], params: dict) -> Tensor:
    """One round of mean-aggregated directed message passing.

    For each node v the incoming messages from edges (u, v) are averaged
    (zero vector if v has no in-neighbors), then combined as
    ``tanh(X @ W_self + M @ W_msg + b)``.
    """
    node_feats = _wrap(node_feats)
    if node_feats.data.ndim != 2:
        raise ShapeError(f"graph_message_pass expects (n, d) features, got {node_feats.data.shape}")
    n = node_feats.data.shape[0]
    agg = np.zeros((n, n))
    indeg = np.zeros(n)
    for (u, v) in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise IndexError(f"edge ({u}, {v}) out of range for {n} nodes")
        agg[v, u] += 1.0
        indeg[v] += 1.0
    nz = indeg > 0
    agg[nz] /= indeg[nz, None]
    msgs = matmul(Tensor(agg), node_feats)
    return tanh(add(add(matmul(node_feats, params["W_self"]),
                        matmul(msgs, params["W_msg"])), params["b"]))


# -- tape ----------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Ordered op records of the tape reachable from one output tensor."""

    nodes: list[tuple[str, tuple[int, ...], Tensor]]
    order_index: dict[int, int]

    def is_topological(self) -> bool:
        for idx, (_, parent_ids, _tensor) in enumerate(self.nodes):
            for pid in parent_ids:
                if pid in self.order_index and self.order_index[pid] >= idx:
                    return False
        return True


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def trace_graph(root: Tensor) -> ComputeGraph:
    order = _toposort(root)
    index = {id(t): i for i, t in enumerate(order)}
    nodes = [(t._op, tuple(id(p) for p in t._parents), t) for t in order]
    return ComputeGraph(nodes=nodes, order_index=index)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Tensors passed via ``params`` that the loss
    does not reach are given an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for t in order:
        if t.requires_grad:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward()
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- gradient checking ----------------------------------------------------

def numeric_gradient(f: Callable[[], float], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``tensor``."""
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(make_loss: Callable[[], Tensor], tensors: Sequence[Tensor],
                    eps: float = 1e-5) -> float:
    """Compare tape gradients of ``make_loss()`` against finite differences.

    Returns the worst relative error across all checked tensors.
    """
    loss = make_loss()
    backward(loss, params=tensors)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        numeric = numeric_gradient(lambda: float(make_loss().data), t, eps=eps)
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst
