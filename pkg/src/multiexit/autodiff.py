"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output records its parents and a backward closure, so the
graph built during one forward pass is the tape consumed by :func:`backward`.

Two nodes deliberately do not report the true derivative of their forward
map:

* :func:`rescale_gradient` is the identity going forward and multiplies the
  incoming gradient by ``s`` going backward.
* :func:`stop_gradient` is the identity going forward and passes nothing
  back.

:func:`check_gradients` compares the tape against central differences with
both of these made transparent (see :func:`exact_derivatives`), which is the
only way a finite-difference oracle can say anything about the remaining
nodes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

# Smallest argument passed to log; keeps log and its derivative finite.
_LOG_FLOOR = 1e-300

_state = {"grad_enabled": True, "exact": False}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def exact_derivatives() -> Iterator[None]:
    """Make ``scale_grad`` and ``stop_grad`` nodes pass gradients unchanged.

    Only meant for gradient checking: with this active, backward computes the
    true derivative of the forward function.
    """
    prev = _state["exact"]
    _state["exact"] = True
    try:
        yield
    finally:
        _state["exact"] = prev


class Tensor:
    """A float64 array with an optional gradient slot.

    ``grad`` is filled by :func:`backward`. Leaf tensors accumulate into it
    across calls (clear with :meth:`zero_grad`); intermediate tensors have it
    overwritten on every backward pass that reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "grad_scale", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.grad_scale: float | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.grad_scale = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), "mul",
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    safe = np.maximum(a.data, _LOG_FLOOR)
    return _make(np.log(safe), (a,), "log", lambda g: (g / safe,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), "sum",
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(a.data.sum(axis=axis), (a,), "sum",
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[r] = a[r, index[r]]``."""
    rows = np.arange(a.shape[0])
    index = np.asarray(index)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), "pick", grad_fn)


# ---------------------------------------------------------------------------
# gradient-shaping nodes


def rescale_gradient(x: Tensor, s: float) -> Tensor:
    """Identity on the forward pass; scales the backward gradient by ``s``."""
    s = float(s)
    if not math.isfinite(s):
        raise ValueError(f"gradient scale must be finite, got {s}")
    out = _make(x.data, (x,), "scale_grad",
                lambda g: (g if _state["exact"] else g * s,))
    out.grad_scale = s
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on the forward pass; blocks the gradient on the backward pass."""
    return _make(x.data, (x,), "stop_grad", lambda g: (g if _state["exact"] else None,))


# ---------------------------------------------------------------------------
# softmax family and losses


def _check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0 or not math.isfinite(T):
        raise ValueError(f"temperature must be positive and finite, got {T}")
    return T


def log_softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise log-softmax of ``logits / T`` (rank 2)."""
    T = _check_temperature(T)
    z = logits.data / T
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def grad_fn(g):
        return ((g - probs * g.sum(axis=1, keepdims=True)) / T,)

    return _make(out, (logits,), "log_softmax", grad_fn)


def softmax_with_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / T``; rows sum to one."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"expected rank-2 logits, got shape {logits.shape}")
    return exp(log_softmax(logits, T))


def _check_labels(labels, logits: Tensor) -> np.ndarray:
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return labels.astype(np.intp)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"expected rank-2 logits, got shape {logits.shape}")
    labels = _check_labels(labels, logits)
    return neg(mean(pick(log_softmax(logits), labels)))


def kl_divergence_loss(teacher_logits: Tensor, student_logits: Tensor, T: float) -> Tensor:
    """Batch mean of KL(p_teacher || p_student) on temperature-``T`` softmaxes.

    The teacher side is gradient-stopped.
    """
    teacher_logits, student_logits = as_tensor(teacher_logits), as_tensor(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"teacher/student shape mismatch: {teacher_logits.shape} vs {student_logits.shape}")
    log_p_t = log_softmax(stop_gradient(teacher_logits), T)
    log_p_s = log_softmax(student_logits, T)
    p_t = np.exp(log_p_t.data)
    return mean(tsum(mul(p_t, add(log_p_t, neg(log_p_s))), axis=1))


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor upstream of the scalar ``loss``.

    Gradients arriving from several consumers are summed. Leaves that
    require a gradient but receive none (for example behind a
    :func:`stop_gradient`) end up with a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    n_params_checked: int

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_err < rel_tol


def check_gradients(
    model_forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    rel_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients with central differences, scalar by scalar.

    ``model_forward`` must rebuild the graph from ``params`` on every call and
    return a scalar loss. Gradient-shaping nodes are made transparent during
    the analytic pass, so the comparison covers every other node on the tape.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, rel_floor)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    with exact_derivatives():
        backward(model_forward())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_abs = max_rel = 0.0
    n = 0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                f_plus = model_forward().item()
                flat[idx] = orig - eps
                f_minus = model_forward().item()
                flat[idx] = orig
                num = (f_plus - f_minus) / (2 * eps)
                ana = a.reshape(-1)[idx]
                err = abs(ana - num)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(ana), abs(num), rel_floor))
                n += 1
    return GradCheckReport(max_abs, max_rel, n)
