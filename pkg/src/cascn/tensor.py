"""Taped reverse-mode automatic differentiation over dense numpy arrays.

Layout convention: 4-D activations are batch x channels x height x width.
Recording is explicit: operations executed inside a ``with Tape():`` block
append one node each, in execution order, so the node list is always
topologically sorted. ``backward(tape, loss)`` walks the list once in
reverse and returns a gradient map for every tensor that requires
gradients. Outside a tape, every op is a plain numpy computation.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError

_state = threading.local()


def _tapes() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _scopes() -> list:
    stack = getattr(_state, "scopes", None)
    if stack is None:
        stack = []
        _state.scopes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


def current_scope() -> str:
    return ".".join(_scopes())


class scope:
    """Label the ops recorded inside the block, e.g. for NaN diagnostics."""

    def __init__(self, label: str):
        self.label = label

    def __enter__(self):
        _scopes().append(self.label)
        return self

    def __exit__(self, *exc):
        _scopes().pop()
        return False


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op output is scanned for NaN/Inf."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Dense n-d float array plus a requires_grad flag.

    Treated as immutable once created: ops return new tensors and never
    write into an input's buffer.
    """

    __slots__ = ("data", "requires_grad")

    # make `ndarray <op> Tensor` defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise algebra (same-shape tensors or python/numpy scalars) --

    def __neg__(self):
        return record("neg", (self,), -self.data, lambda g: (-g,))

    def __add__(self, other):
        return _binary("add", self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _binary("sub", _as_tensor(other, self.dtype), self, np.subtract,
                       lambda g, a, b: (g, -g))

    def __mul__(self, other):
        return _binary("mul", self, other, np.multiply,
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, np.divide,
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _binary("div", _as_tensor(other, self.dtype), self, np.divide,
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def sum(self) -> "Tensor":
        shape, dtype = self.shape, self.dtype
        return record("sum", (self,), self.data.sum(),
                      lambda g: (np.full(shape, g, dtype=dtype),))

    def mean(self) -> "Tensor":
        shape, dtype, n = self.shape, self.dtype, self.size
        return record("mean", (self,), self.data.mean(),
                      lambda g: (np.full(shape, g / n, dtype=dtype),))

    def log(self) -> "Tensor":
        xd = self.data
        # no warning for non-positive arguments; NaN surfaces in debug mode
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log(xd)
        return record("log", (self,), out, lambda g: (g / xd,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return record("exp", (self,), out, lambda g: (g * out,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        xd = self.data
        mask = (xd >= lo) & (xd <= hi)
        return record("clip", (self,), np.clip(xd, lo, hi),
                      lambda g: (g * mask,))

    def reshape(self, shape) -> "Tensor":
        old = self.shape
        return record("reshape", (self,), self.data.reshape(shape),
                      lambda g: (g.reshape(old),))


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _binary(name, a, b, fwd, bwd) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float64))
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape and a.ndim > 0 and b.ndim > 0:
        raise ContractError(
            f"{name}: operands must share a shape or be scalar, "
            f"got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga, gb = bwd(g, ad, bd)
        # scalar operand: reduce the broadcast gradient back to 0-d
        if a.ndim == 0 and ga is not None and np.ndim(ga) > 0:
            ga = np.asarray(ga).sum()
        if b.ndim == 0 and gb is not None and np.ndim(gb) > 0:
            gb = np.asarray(gb).sum()
        return ga, gb

    return record(name, (a, b), fwd(ad, bd), backward)


class OpNode:
    """One recorded operation: identity of the op, its tensors, and the
    closure that maps the output gradient to input gradients."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "scope")

    def __init__(self, op, inputs, output, backward_fn, scope_label):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.scope = scope_label

    def label(self) -> str:
        return f"{self.scope}.{self.op}" if self.scope else self.op


class Tape:
    """Single-owner recording of a forward computation, in execution order."""

    def __init__(self):
        self.nodes: list[OpNode] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        assert popped is self
        return False


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable) -> Tensor:
    """Create the output tensor of `op` and register it on the active tape.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    input, each matching that input's shape.
    """
    out_data = np.asarray(out_data)
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        where = current_scope() or "<unscoped>"
        raise NumericalError(f"non-finite values produced by op '{op}' in {where}")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(OpNode(op, tuple(inputs), out, backward_fn,
                                 current_scope()))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep of the tape from a scalar loss.

    Returns ``{tensor: grad_array}`` for every requires_grad tensor that
    the loss depends on; gradients accumulate additively across fan-out.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue  # this node does not feed the loss
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                by_id[key] = t
    return {by_id[k]: v for k, v in grads.items() if by_id[k].requires_grad}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between taped and central finite-difference grads.

    `f` must map a tensor to a scalar tensor and be deterministic. When
    `sample` is given, only that many randomly chosen coordinates of `x`
    are probed (for large inputs); otherwise every coordinate is checked.
    Relative error per coordinate is |a-b| / max(|a|, |b|, 1e-8).
    """
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    analytic = backward(tape, y).get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        idx = np.random.default_rng(seed).choice(n, size=sample, replace=False)
    else:
        idx = np.arange(n)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data)
        flat[i] = orig - eps
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(a_flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
