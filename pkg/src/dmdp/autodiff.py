"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that remembers its inputs and a local backward rule.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order
(the :class:`Tape`) and accumulates gradients into leaf tensors.

Only the operations the encoders, prompt machinery and losses need are
provided.  Broadcasting follows numpy; backward rules reduce gradients back
to each input's shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractViolation,
    DegenerateMaskError,
    FrozenParameterError,
    NumericInstabilityError,
)

LAYERNORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray, tuple], tuple]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: BackwardFn


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "node", "name", "_requires_grad", "_frozen")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.node: Node | None = None
        self.name = name
        self._frozen = False
        self._requires_grad = False
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self._frozen:
            raise FrozenParameterError(f"tensor {self.name!r} is frozen")
        self._requires_grad = bool(value)
        if value and self.node is None and self.grad is None:
            self.grad = np.zeros_like(self.data)
        if not value:
            self.grad = None

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Tensor":
        self.requires_grad = False
        self._frozen = True
        return self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        if self._requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item(): tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._frozen = False
    out.grad = None
    if any(t._requires_grad for t in inputs):
        out._requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    else:
        out._requires_grad = False
        out.node = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (``elementwise_mul``)."""
    _check_broadcast("elementwise_mul", a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _make("elementwise_mul", a.data * b.data, (a, b), bw)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scalar_mul", a.data * s, (a,), lambda g, needs: (g * s,))


# ----------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def affine_rows(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the inner sum taken strictly left to right.

    Slower than BLAS but bitwise reproducible against a scalar loop, which
    matters for the cross-tower prompt maps.
    """
    if x.ndim < 1 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ContractViolation(f"affine_rows: shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    acc = np.zeros(x.shape[:-1] + (w.shape[1],))
    for k in range(w.shape[0]):
        acc = acc + xd[..., k : k + 1] * wd[k]
    out = acc + b.data

    def bw(g, needs):
        gx = g @ wd.T if needs[0] else None
        gw = xd.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if needs[1] else None
        gb = g.reshape(-1, w.shape[1]).sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _make("affine_rows", out, (x, w, b), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (``concat_last_axis`` when axis is -1)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ContractViolation(
                f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            sl = [slice(None)] * nd
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ContractViolation(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    return out


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ContractViolation(f"expand: cannot broadcast {a.shape} to {shape}") from None
    return _make("expand", out, (a,), lambda g, needs: (_unbroadcast(g, a.shape),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ContractViolation(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}"
        )

    def bw(g, needs):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make("embedding_lookup", table.data[ids], (table,), bw)


# ----------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=np.float64), (a,), bw)


# ----------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g, needs: (g * y,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g, needs: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", y, (a,), lambda g, needs: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bw(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make("gelu", y, (a,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractViolation(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match width {d} of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g, needs):
        gx = gg = gb = None
        if needs[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make("layernorm", xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def softmax_last_axis_masked(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is 0 get weight 0.

    ``mask`` must broadcast against ``x`` and hold only 0/1 with at least one
    1 per row.
    """
    z = x.data
    if mask is not None:
        m = np.asarray(mask)
        if not np.all((m == 0) | (m == 1)):
            raise ContractViolation("softmax_last_axis_masked: mask must be {0,1}-valued")
        if np.any(m.sum(axis=-1) == 0):
            raise DegenerateMaskError("softmax_last_axis_masked: a mask row has no unmasked entry")
        try:
            np.broadcast_shapes(m.shape, z.shape)
        except ValueError:
            raise ContractViolation(
                f"softmax_last_axis_masked: mask {m.shape} does not broadcast to {z.shape}"
            ) from None
        z = np.where(m.astype(bool), z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax_last_axis_masked", y, (x,), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    y = x.data / n

    def bw(g, needs):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _make("l2_normalize", y, (x,), bw)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None, :]
        labels = labels.reshape(1)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ContractViolation(
            f"cross_entropy_with_logits: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractViolation("cross_entropy_with_logits: label out of range")
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsum - zs[rows, labels]))

    def bw(g, needs):
        p = np.exp(zs - logsum[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p.reshape(logits.shape),)

    return _make("cross_entropy_with_logits", np.asarray(loss), (logits,), bw)


_PRIMITIVES = {
    "matmul": matmul,
    "affine_rows": affine_rows,
    "add": add,
    "elementwise_mul": mul,
    "scalar_mul": scalar_mul,
    "concat_last_axis": lambda *ts: concat(ts, axis=-1),
    "embedding_lookup": embedding_lookup,
    "layernorm": layernorm,
    "softmax_last_axis_masked": softmax_last_axis_masked,
    "gelu": gelu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "l2_normalize": l2_normalize,
    "cross_entropy_with_logits": cross_entropy_with_logits,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("tanh", x)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# the tape and the reverse sweep


@dataclass
class Tape:
    """Recorded operations reachable from one output, inputs before outputs."""

    outputs: list[Tensor] = field(default_factory=list)

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.outputs]

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out.node
        needs = tuple(t._requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.backward_fn(g, needs)):
            if gi is None or not t._requires_grad:
                continue
            if t.node is None:
                if t._frozen:
                    raise FrozenParameterError(f"gradient reached frozen tensor {t.name!r}")
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


# ----------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    flagged: list[tuple[int, tuple[int, ...], float, float, float]]
    tol: float

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps elements whose true gradient is ~0 from dividing by noise.
    Leaf data is perturbed in place and restored.
    """
    if h <= 0:
        raise ContractViolation("grad_check: h must be positive")
    for leaf in leaves:
        leaf.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericInstabilityError("grad_check: non-finite loss at the base point")
    backward(loss)
    analytic = [
        np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves
    ]
    report = GradCheckReport([], [], tol)
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().data)
            flat[k] = orig - h
            down = float(f().data)
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericInstabilityError(
                    f"grad_check: non-finite value probing leaf {li} element {k}"
                )
            num = (up - down) / (2 * h)
            ana = float(analytic[li].reshape(-1)[k])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            if rel > tol:
                idx = tuple(int(i) for i in np.unravel_index(k, leaf.shape))
                report.flagged.append((li, idx, ana, num, rel))
        report.max_rel_error.append(worst)
    for leaf in leaves:
        leaf.zero_grad()
    return report
