"""Dense float64 tensors with reverse-mode gradient accumulation.

The primitive set is deliberately small: just enough to express every
training objective in :mod:`labelnoise.losses` (affine layers, ReLU, row
softmax, logs, per-row gathers, elementwise arithmetic, reductions).

Recording is tape-based.  Ops executed inside a ``with GradientTape():``
block are recorded; outside any tape they just compute, which makes
inference a pure numpy pipeline.  ``tape.backward(loss)`` walks the record
once in reverse and returns a gradient for every watched leaf; the tape is
consumed afterwards.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DomainError, ShapeMismatch, UsageError

__all__ = [
    "Tensor",
    "GradientTape",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "PRIMITIVES",
    "matmul",
    "add",
    "relu",
    "row_softmax",
    "log",
    "exp",
    "mul",
    "div",
    "gather_per_row",
    "tensor_sum",
    "tensor_mean",
    "scalar_mul",
    "clamp_min",
]


class Tensor:
    """Immutable dense float64 array.

    The constructor copies its input and locks the buffer, so a Tensor can
    be shared across threads and reused on several tapes without aliasing
    surprises.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradientTape"] = []


class _Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs    # list[Tensor]
        self.output = output    # Tensor
        self.ctx = ctx          # saved values for the backward rule


class GradientTape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so iterating the record backward
    visits every node after all of its consumers (a valid reverse
    topological order).  A leaf must be registered with :meth:`watch` to
    receive a gradient.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: dict[int, Tensor] = {}
        self._produced: dict[int, int] = {}   # id(tensor) -> node index
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> Tensor:
        self._watched[id(tensor)] = tensor
        return tensor

    def record(self, op: str, inputs: list[Tensor], output: Tensor, ctx) -> None:
        self._nodes.append(_Node(op, inputs, output, ctx))
        self._produced[id(output)] = len(self._nodes) - 1

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradient of a scalar ``loss`` with respect to every watched leaf.

        Consumes the tape; calling it twice raises.  Leaves that did not
        contribute to the loss get zero gradients.
        """
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            for tensor, gin in zip(node.inputs, _BACKWARD[node.op](node.ctx, gout)):
                if gin is None:
                    continue
                tid = id(tensor)
                if tid not in self._produced and tid not in self._watched:
                    continue  # plain constant: no gradient needed
                if tid in grads:
                    grads[tid] = grads[tid] + gin
                else:
                    grads[tid] = gin

        result: dict[Tensor, Tensor] = {}
        for tid, leaf in self._watched.items():
            g = grads.get(tid)
            result[leaf] = Tensor(g) if g is not None else Tensor(np.zeros_like(leaf.data))
        return result


def _active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """``backward`` on the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise UsageError("backward() called with no active tape")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------
#
# Each primitive supplies a forward that returns (output array, ctx) and a
# backward that maps (ctx, output grad) to one gradient per input (None for
# non-differentiable slots).

def _require(cond: bool, op: str, detail: str):
    if not cond:
        raise ShapeMismatch(f"{op}: {detail}")


def _fwd_matmul(a, b):
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
             "matmul", f"cannot multiply {a.shape} by {b.shape}")
    return a @ b, (a, b)


def _bwd_matmul(ctx, g):
    a, b = ctx
    return g @ b.T, a.T @ g


def _fwd_add_broadcast(a, b):
    try:
        out = a + b
    except ValueError:
        raise ShapeMismatch(f"add_broadcast: cannot broadcast {a.shape} with {b.shape}")
    return out, (a.shape, b.shape)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bwd_add_broadcast(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _fwd_relu(a):
    return np.maximum(a, 0.0), a


def _bwd_relu(ctx, g):
    return (g * (ctx > 0.0),)


def _fwd_row_softmax(a):
    _require(a.ndim == 2, "row_softmax", f"needs a 2-d input, got {a.shape}")
    out = kernels.row_softmax(a)
    return out, out


def _bwd_row_softmax(ctx, g):
    return (kernels.row_softmax_grad(ctx, g),)


def _fwd_log(a):
    if np.any(a <= 0.0):
        idx = np.unravel_index(int(np.argmax(a <= 0.0)), a.shape)
        raise DomainError(f"log: non-positive input {a[idx]!r} at index {idx}")
    return np.log(a), a


def _bwd_log(ctx, g):
    return (g / ctx,)


def _fwd_exp(a):
    out = np.exp(a)
    return out, out


def _bwd_exp(ctx, g):
    return (g * ctx,)


def _fwd_elementwise_mul(a, b):
    _require(a.shape == b.shape, "elementwise_mul", f"shapes differ: {a.shape} vs {b.shape}")
    return a * b, (a, b)


def _bwd_elementwise_mul(ctx, g):
    a, b = ctx
    return g * b, g * a


def _fwd_elementwise_div(a, b):
    _require(a.shape == b.shape, "elementwise_div", f"shapes differ: {a.shape} vs {b.shape}")
    if np.any(b == 0.0):
        idx = np.unravel_index(int(np.argmax(b == 0.0)), b.shape)
        raise DomainError(f"elementwise_div: zero denominator at index {idx}")
    return a / b, (a, b)


def _bwd_elementwise_div(ctx, g):
    a, b = ctx
    return g / b, -g * a / (b * b)


def _fwd_gather_per_row(a, indices):
    _require(a.ndim == 2, "gather_per_row", f"needs a 2-d input, got {a.shape}")
    _require(indices.shape == (a.shape[0],), "gather_per_row",
             f"need one index per row, got {indices.shape} for {a.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[1]):
        bad = int(np.argmax((indices < 0) | (indices >= a.shape[1])))
        raise DomainError(
            f"gather_per_row: index {indices[bad]} out of range [0, {a.shape[1]}) at row {bad}")
    return kernels.gather_rows(a, indices), (a.shape, indices)


def _bwd_gather_per_row(ctx, g):
    (n, c), indices = ctx
    return (kernels.scatter_rows_add(n, c, indices, g),)


def _fwd_sum(a):
    return np.array(a.sum()), a.shape


def _bwd_sum(ctx, g):
    return (np.full(ctx, float(g)),)


def _fwd_mean(a):
    return np.array(a.mean()), a.shape


def _bwd_mean(ctx, g):
    n = 1
    for extent in ctx:
        n *= extent
    return (np.full(ctx, float(g) / n),)


def _fwd_scalar_mul(a, scalar):
    return a * scalar, scalar


def _bwd_scalar_mul(ctx, g):
    return (g * ctx,)


def _fwd_clamp_min(a, lo):
    return np.maximum(a, lo), (a, lo)


def _bwd_clamp_min(ctx, g):
    a, lo = ctx
    return (g * (a >= lo),)


_FORWARD = {
    "matmul": _fwd_matmul,
    "add_broadcast": _fwd_add_broadcast,
    "relu": _fwd_relu,
    "row_softmax": _fwd_row_softmax,
    "log": _fwd_log,
    "exp": _fwd_exp,
    "elementwise_mul": _fwd_elementwise_mul,
    "elementwise_div": _fwd_elementwise_div,
    "gather_per_row": _fwd_gather_per_row,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "scalar_mul": _fwd_scalar_mul,
    "clamp_min": _fwd_clamp_min,
}

_BACKWARD = {
    "matmul": _bwd_matmul,
    "add_broadcast": _bwd_add_broadcast,
    "relu": _bwd_relu,
    "row_softmax": _bwd_row_softmax,
    "log": _bwd_log,
    "exp": _bwd_exp,
    "elementwise_mul": _bwd_elementwise_mul,
    "elementwise_div": _bwd_elementwise_div,
    "gather_per_row": _bwd_gather_per_row,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "scalar_mul": _bwd_scalar_mul,
    "clamp_min": _bwd_clamp_min,
}

PRIMITIVES = frozenset(_FORWARD)

# Ops whose second argument is a non-tensor attribute rather than an input.
_ATTR_OPS = {"gather_per_row", "scalar_mul", "clamp_min"}


def apply_primitive(op: str, inputs: list[Tensor], attr=None) -> Tensor:
    """Run one primitive, recording it on the active tape (if any).

    ``attr`` carries the non-differentiable argument of ``gather_per_row``
    (an int index array), ``scalar_mul`` and ``clamp_min`` (a float).
    """
    if op not in _FORWARD:
        raise UsageError(f"unknown primitive {op!r}")
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    if op in _ATTR_OPS:
        if op == "gather_per_row":
            attr = np.asarray(attr, dtype=np.int64)
        else:
            attr = float(attr)
        out_data, ctx = _FORWARD[op](*arrays, attr)
    else:
        out_data, ctx = _FORWARD[op](*arrays)
    if not np.all(np.isfinite(out_data)):
        raise DomainError(f"{op}: produced a non-finite value")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(op, tensors, out, ctx)
    return out


# Thin wrappers so loss/model code reads like math.

def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a, b) -> Tensor:
    return apply_primitive("add_broadcast", [a, b])


def relu(a) -> Tensor:
    return apply_primitive("relu", [a])


def row_softmax(a) -> Tensor:
    return apply_primitive("row_softmax", [a])


def log(a) -> Tensor:
    return apply_primitive("log", [a])


def exp(a) -> Tensor:
    return apply_primitive("exp", [a])


def mul(a, b) -> Tensor:
    return apply_primitive("elementwise_mul", [a, b])


def div(a, b) -> Tensor:
    return apply_primitive("elementwise_div", [a, b])


def gather_per_row(a, indices) -> Tensor:
    return apply_primitive("gather_per_row", [a], attr=indices)


def tensor_sum(a) -> Tensor:
    return apply_primitive("sum", [a])


def tensor_mean(a) -> Tensor:
    return apply_primitive("mean", [a])


def scalar_mul(a, scalar: float) -> Tensor:
    return apply_primitive("scalar_mul", [a], attr=scalar)


def clamp_min(a, lo: float) -> Tensor:
    return apply_primitive("clamp_min", [a], attr=lo)


def detach(a: Tensor) -> Tensor:
    """A copy of ``a`` with no tape history: gradients stop here."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(loss_builder, params: list[Tensor], step: float = 1e-5) -> float:
    """Compare tape gradients against central differences, coordinate by
    coordinate, and return the worst relative error.

    ``loss_builder`` must be a deterministic function of ``params`` returning
    a scalar Tensor; it is re-evaluated (untaped) at perturbed parameters.
    Relative error uses denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    tape = GradientTape()
    for p in params:
        tape.watch(p)
    with tape:
        loss = loss_builder(params)
    grads = tape.backward(loss)

    worst = 0.0
    for k, p in enumerate(params):
        analytic = grads[p].data
        flat = p.data.ravel()
        for i in range(flat.size):
            def value_at(x: float) -> float:
                bumped = flat.copy()
                bumped[i] = x
                trial = list(params)
                trial[k] = Tensor(bumped.reshape(p.shape))
                return loss_builder(trial).item()

            numeric = (value_at(flat[i] + step) - value_at(flat[i] - step)) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
