"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule onto an implicit
tape (the graph of Tensor parents). `backward(loss)` replays that tape in
reverse topological order and accumulates gradients into every tensor
created with requires_grad=True. The tape is rebuilt on every forward
pass and consumed by backward.

All values are checked for NaN/Inf at creation; a NonFiniteError names
the operation that produced the first non-finite tensor.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf values."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    # convenience operators; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Create an op result, recording the tape edge only when it can need grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      _parents=parents, _backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, "sub", (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(a.data * c, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _make(a.data.T, "transpose", (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate_grad(piece)

    return _make(out_data, "concat", tuple(parts), backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    a = _as_tensor(a)
    index = tuple(slice(None) if d != axis else slice(start, stop)
                  for d in range(a.ndim))

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[index] = g
            a.accumulate_grad(buf)

    return _make(a.data[index], "narrow", (a,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx]; backward scatter-adds into the source rows."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a.accumulate_grad(buf)

    return _make(a.data[idx], "gather_rows", (a,), backward)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            else:
                a.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out_data, "sum", (a,), backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy() / n)
            else:
                a.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / n)

    return _make(out_data, "mean", (a,), backward)


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * a.data)

    return _make(a.data ** 2, "square", (a,), backward)


def texp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _make(out_data, "exp", (a,), backward)


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), "log", (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """max(x, slope*x). Subgradient at 0 is defined as `slope`."""
    a = _as_tensor(a)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = a.data > 0
    out_data = np.where(pos, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(pos, 1.0, slope))

    return _make(out_data, "leaky_relu", (a,), backward)


def elu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    expm1 = np.expm1(np.minimum(a.data, 0.0))
    out_data = np.where(pos, a.data, expm1)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.where(pos, 1.0, expm1 + 1.0))

    return _make(out_data, "elu", (a,), backward)


# ---------------------------------------------------------------------------
# segment ops (edge lists grouped by destination node)
# ---------------------------------------------------------------------------

def segment_softmax(scores: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax within each segment, max-shifted for stability.

    Segments may appear in any order but every id in [0, num_segments)
    must occur at least once: an empty segment has no well-defined
    softmax and is rejected.
    """
    scores = _as_tensor(scores)
    if scores.ndim != 1:
        raise ValueError("segment_softmax expects a 1-D score vector")
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape != scores.shape:
        raise ValueError("segment ids must align with scores")
    counts = np.bincount(seg, minlength=num_segments)
    if (counts == 0).any():
        raise ValueError("segment_softmax: empty segment")

    high = np.full(num_segments, -np.inf)
    np.maximum.at(high, seg, scores.data)
    e = np.exp(scores.data - high[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    out_data = e / denom[seg]

    def backward(g):
        if scores.requires_grad:
            weighted = out_data * g
            seg_total = np.zeros(num_segments)
            np.add.at(seg_total, seg, weighted)
            scores.accumulate_grad(weighted - out_data * seg_total[seg])

    return _make(out_data, "segment_softmax", (scores,), backward)


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of a (1-D or 2-D) into num_segments buckets."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    out_shape = (num_segments,) + a.shape[1:]
    out_data = np.zeros(out_shape)
    np.add.at(out_data, seg, a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[seg])

    return _make(out_data, "segment_sum", (a,), backward)


# ---------------------------------------------------------------------------
# regularization / loss helpers
# ---------------------------------------------------------------------------

def dropout(a: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout: zero with prob `rate`, scale survivors by 1/(1-rate)."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(a.data * mask, "dropout", (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("log_softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        if a.requires_grad:
            soft = np.exp(out_data)
            a.accumulate_grad(g - soft * g.sum(axis=1, keepdims=True))

    return _make(out_data, "log_softmax_rows", (a,), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Run the reverse pass from a scalar loss.

    Gradients accumulate into `.grad` of every requires_grad tensor that
    the loss depends on. The recorded graph is consumed: the same forward
    pass cannot be differentiated twice.
    """
    if loss.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative postorder so deep graphs cannot hit the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, child = stack[-1]
        if child == 0:
            visited.add(id(node))
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            parent = node._parents[child]
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, 0))
        else:
            stack.pop()
            order.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # consume the tape: free saved closures and parent links
        node._parents = ()
        node._backward = None


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Backward pass returning gradients aligned with `params`."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params]


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    The verification oracle: f must be deterministic (no dropout, fixed rng).
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
