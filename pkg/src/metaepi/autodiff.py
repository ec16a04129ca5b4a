"""Tape-based reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every primitive applied through it (define-by-run).
:func:`backward` replays the tape in reverse from a scalar loss and adds the
resulting gradients into the ``grad`` slot of every leaf tensor that has
``requires_grad`` set. Gradients accumulate; call :meth:`Tensor.zero_grad`
(or let :func:`optimizer_step` do it) between updates.

Shapes never broadcast. The only mixed-shape operation is ``scale``, which
multiplies a tensor by a Python float.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class AutodiffError(ValueError):
    """Raised for malformed graphs, shape mismatches and non-finite values."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise AutodiffError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitives
#
# forward(arrays, attrs) -> (out, saved)
# backward(g, arrays, out, saved, attrs) -> tuple of input grads (None = skip)


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int | None  # None: variadic
    check: Callable[[list[tuple[int, ...]], dict], None]
    forward: Callable
    backward: Callable


def _shape_err(name: str, shapes, why: str) -> AutodiffError:
    return AutodiffError(f"{name}: {why}; got shapes {[tuple(s) for s in shapes]}")


def _same_shape(name):
    def check(shapes, attrs):
        if shapes[0] != shapes[1]:
            raise _shape_err(name, shapes, "operands must have identical shapes")
    return check


def _any_shape(shapes, attrs):
    return None


def _matrix(name, n=1):
    def check(shapes, attrs):
        for s in shapes[:n]:
            if len(s) != 2:
                raise _shape_err(name, shapes, "expected 2-D operands")
    return check


def _check_matmul(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise _shape_err("matmul", shapes, "inner dimensions must agree on 2-D operands")


def _check_sqdist(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[1]:
        raise _shape_err("sqdist", shapes, "need (n, e) and (m, e)")


def _check_xent(shapes, attrs):
    (s,) = shapes
    labels = attrs["labels"]
    if len(s) != 2 or s[0] == 0 or s[1] == 0:
        raise _shape_err("softmax_xent", shapes, "logits must be non-empty (n, C)")
    if labels.shape != (s[0],):
        raise _shape_err("softmax_xent", shapes, f"labels shape {labels.shape} != ({s[0]},)")
    if labels.min() < 0 or labels.max() >= s[1]:
        raise AutodiffError(f"softmax_xent: label out of range [0, {s[1]})")


def _check_concat(shapes, attrs):
    if not shapes:
        raise AutodiffError("concat_rows: no inputs")
    cols = {s[1] if len(s) == 2 else None for s in shapes}
    if None in cols or len(cols) != 1:
        raise _shape_err("concat_rows", shapes, "all inputs must be 2-D with equal column count")


def _logsumexp_rows(x):
    m = x.max(axis=1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _xent_fwd(a, attrs):
    (x,) = a
    labels = attrs["labels"]
    logp = x - _logsumexp_rows(x)
    n = x.shape[0]
    out = -logp[np.arange(n), labels].sum() / n
    return np.array(out), np.exp(logp)


def _xent_bwd(g, a, out, probs, attrs):
    labels = attrs["labels"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g / n),)


def _softmax_rows_fwd(a, attrs):
    (x,) = a
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), None


def _softmax_rows_bwd(g, a, y, saved, attrs):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _normalize_fwd(a, attrs):
    (x,) = a
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise AutodiffError("normalize_rows: zero-norm row")
    return x / norms, norms


def _normalize_bwd(g, a, y, norms, attrs):
    return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)


def _sqdist_fwd(a, attrs):
    x, y = a
    diff = x[:, None, :] - y[None, :, :]
    return (diff * diff).sum(axis=2), None


def _sqdist_bwd(g, a, out, saved, attrs):
    x, y = a
    gx = 2.0 * (g.sum(axis=1)[:, None] * x - g @ y)
    gy = 2.0 * (g.sum(axis=0)[:, None] * y - g.T @ x)
    return gx, gy


def _log_fwd(a, attrs):
    (x,) = a
    if (x <= 0).any():
        raise AutodiffError("log: non-positive input")
    return np.log(x), None


def _concat_fwd(a, attrs):
    return np.concatenate(a, axis=0), None


def _concat_bwd(g, a, out, saved, attrs):
    bounds = np.cumsum([x.shape[0] for x in a])[:-1]
    return tuple(np.split(g, bounds, axis=0))


def _check_class_means(shapes, attrs):
    (s,) = shapes
    labels, ways = attrs["labels"], attrs["ways"]
    if len(s) != 2 or labels.shape != (s[0],):
        raise _shape_err("class_means", shapes, f"need (n, e) rows and {s[0] if s else '?'} labels")
    if s[0] == 0 or labels.min() < 0 or labels.max() >= ways or len(np.unique(labels)) != ways:
        raise AutodiffError(f"class_means: every label in 0..{ways - 1} must occur")


def _class_means_fwd(a, attrs):
    (x,) = a
    labels = attrs["labels"]
    out = np.stack([x[labels == c].mean(axis=0) for c in range(attrs["ways"])])
    return out, np.bincount(labels, minlength=attrs["ways"]).astype(np.float64)


def _class_means_bwd(g, a, out, counts, attrs):
    labels = attrs["labels"]
    return (g[labels] / counts[labels][:, None],)


def _check_rows(shapes, attrs):
    (s,) = shapes
    start, stop = attrs["start"], attrs["stop"]
    if len(s) != 2 or not 0 <= start < stop <= s[0]:
        raise _shape_err("take_rows", shapes, f"row range [{start}, {stop}) out of bounds")


def _rows_bwd(g, a, out, saved, attrs):
    full = np.zeros_like(a[0])
    full[attrs["start"]:attrs["stop"]] = g
    return (full,)


def _scale_check(shapes, attrs):
    c = attrs["c"]
    if not np.isfinite(c):
        raise AutodiffError("scale: non-finite scalar")


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("matmul", 2, _check_matmul,
                  lambda a, k: (a[0] @ a[1], None),
                  lambda g, a, o, s, k: (g @ a[1].T, a[0].T @ g)),
        Primitive("add", 2, _same_shape("add"),
                  lambda a, k: (a[0] + a[1], None),
                  lambda g, a, o, s, k: (g, g)),
        Primitive("sub", 2, _same_shape("sub"),
                  lambda a, k: (a[0] - a[1], None),
                  lambda g, a, o, s, k: (g, -g)),
        Primitive("mul", 2, _same_shape("mul"),
                  lambda a, k: (a[0] * a[1], None),
                  lambda g, a, o, s, k: (g * a[1], g * a[0])),
        Primitive("scale", 1, _scale_check,
                  lambda a, k: (a[0] * k["c"], None),
                  lambda g, a, o, s, k: (g * k["c"],)),
        Primitive("relu", 1, _any_shape,
                  lambda a, k: (np.maximum(a[0], 0.0), None),
                  lambda g, a, o, s, k: (g * (a[0] > 0),)),
        Primitive("mean", 1, _any_shape,
                  lambda a, k: (np.array(a[0].mean()), None),
                  lambda g, a, o, s, k: (np.full(a[0].shape, g / a[0].size),)),
        Primitive("sum", 1, _any_shape,
                  lambda a, k: (np.array(a[0].sum()), None),
                  lambda g, a, o, s, k: (np.full(a[0].shape, g, dtype=np.float64),)),
        Primitive("sqdist", 2, _check_sqdist, _sqdist_fwd, _sqdist_bwd),
        Primitive("softmax_xent", 1, _check_xent, _xent_fwd, _xent_bwd),
        Primitive("log", 1, _any_shape, _log_fwd,
                  lambda g, a, o, s, k: (g / a[0],)),
        Primitive("exp", 1, _any_shape,
                  lambda a, k: (np.exp(a[0]), None),
                  lambda g, a, o, s, k: (g * o,)),
        Primitive("concat_rows", None, _check_concat, _concat_fwd, _concat_bwd),
        Primitive("transpose", 1, _matrix("transpose"),
                  lambda a, k: (a[0].T.copy(), None),
                  lambda g, a, o, s, k: (g.T,)),
        Primitive("normalize_rows", 1, _matrix("normalize_rows"), _normalize_fwd, _normalize_bwd),
        Primitive("softmax_rows", 1, _matrix("softmax_rows"), _softmax_rows_fwd, _softmax_rows_bwd),
        Primitive("take_rows", 1, _check_rows,
                  lambda a, k: (a[0][k["start"]:k["stop"]].copy(), None), _rows_bwd),
        Primitive("class_means", 1, _check_class_means, _class_means_fwd, _class_means_bwd),
    ]
}


@dataclass
class _Entry:
    op: Primitive
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: object
    attrs: dict


class Tape:
    """Ordered record of primitive applications.

    Entry ``i`` produces the tensor with node id ``i``; inputs always refer to
    earlier nodes or to leaves, so the list is topologically sorted.
    """

    def __init__(self, debug: bool = False):
        self.entries: list[_Entry] = []
        self.debug = debug

    def __len__(self) -> int:
        return len(self.entries)

    def apply(self, primitive: str, *inputs: Tensor, **attrs) -> Tensor:
        return forward_eval(self, primitive, inputs, **attrs)

    # thin named wrappers, one per primitive
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def add(self, a, b): return self.apply("add", a, b)
    def sub(self, a, b): return self.apply("sub", a, b)
    def mul(self, a, b): return self.apply("mul", a, b)
    def scale(self, a, c: float): return self.apply("scale", a, c=float(c))
    def relu(self, a): return self.apply("relu", a)
    def mean(self, a): return self.apply("mean", a)
    def sum(self, a): return self.apply("sum", a)
    def sqdist(self, a, b): return self.apply("sqdist", a, b)
    def log(self, a): return self.apply("log", a)
    def exp(self, a): return self.apply("exp", a)
    def transpose(self, a): return self.apply("transpose", a)
    def normalize_rows(self, a): return self.apply("normalize_rows", a)
    def softmax_rows(self, a): return self.apply("softmax_rows", a)
    def concat_rows(self, *xs): return self.apply("concat_rows", *xs)

    def take_rows(self, x, start: int, stop: int) -> Tensor:
        return self.apply("take_rows", x, start=int(start), stop=int(stop))

    def class_means(self, x, labels, ways: int) -> Tensor:
        return self.apply("class_means", x, labels=np.asarray(labels, dtype=np.int64), ways=int(ways))

    def softmax_xent(self, logits, labels) -> Tensor:
        return self.apply("softmax_xent", logits, labels=np.asarray(labels, dtype=np.int64))


def forward_eval(tape: Tape, primitive: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate ``primitive`` on ``inputs`` and record it on ``tape``."""
    op = PRIMITIVES.get(primitive)
    if op is None:
        raise AutodiffError(f"unknown primitive {primitive!r}")
    inputs = tuple(as_tensor(x) for x in inputs)
    if op.arity is not None and len(inputs) != op.arity:
        raise AutodiffError(f"{primitive}: expected {op.arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    for t in inputs:
        # op outputs were produced from checked inputs; re-check them only in debug mode
        if (t._tape is None or tape.debug) and not np.isfinite(t.data).all():
            raise AutodiffError(f"{primitive}: non-finite input")
    op.check([a.shape for a in arrays], attrs)
    out, saved = op.forward(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    if tape.debug and not np.isfinite(out).all():
        raise AutodiffError(f"{primitive}: produced non-finite output")
    result = Tensor._from_op(out, any(t.requires_grad for t in inputs))
    result._tape = tape
    result._node = len(tape.entries)
    tape.entries.append(_Entry(op, inputs, result, saved, attrs))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss._tape is not tape or loss._node is None or loss._node >= len(tape.entries) \
            or tape.entries[loss._node].output is not loss:
        raise AutodiffError("loss node is not recorded on this tape")
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        entry = tape.entries[idx]
        arrays = [t.data for t in entry.inputs]
        in_grads = entry.op.backward(g, arrays, entry.output.data, entry.saved, entry.attrs)
        for t, gi in zip(entry.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(t.data.shape)
            if t._tape is tape and t._node is not None:
                prev = grads.get(t._node)
                grads[t._node] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = gi.copy()
            else:
                t.grad = t.grad + gi


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """Plain SGD or bias-corrected Adam state for a fixed parameter list."""

    lr: float
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("sgd", "adam"):
            raise AutodiffError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Update ``params`` in place from their ``grad`` slots, then zero the grads."""
    if not state.lr > 0:
        raise AutodiffError(f"learning rate must be positive, got {state.lr}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise AutodiffError(f"parameter {i} (shape {p.shape}) has no gradient")
    if state.mode == "adam":
        if not state.m:
            state.m = [np.zeros_like(p.data) for p in params]
            state.v = [np.zeros_like(p.data) for p in params]
        elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
            raise AutodiffError("optimizer moments do not match the parameter list")
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = p.grad
        if state.mode == "sgd":
            p.data = p.data - state.lr * g
        else:
            state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
            mhat = state.m[i] / (1 - state.beta1 ** t)
            vhat = state.v[i] / (1 - state.beta2 ** t)
            p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = np.zeros_like(p.data)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
