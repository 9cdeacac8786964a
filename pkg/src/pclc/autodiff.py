"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are numpy arrays; every differentiable operation computes its forward
result eagerly and, when a tape is active and some input requires grad,
records a closure that maps the output gradient to input gradients. The tape
is rebuilt per forward pass; `backward` walks it once in reverse.

Within one tape everything is single-threaded. Separate tapes (one per model
replica) may live on separate threads; the active-tape stack is thread-local.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import AutodiffError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeRecord:
    """One recorded primitive application."""

    __slots__ = ("kind", "input_ids", "output_id", "vjp", "saved")

    def __init__(self, kind, input_ids, output_id, vjp, saved=None):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.vjp = vjp  # out_grad -> tuple of per-input grads (or None)
        self.saved = saved


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Node ids are assigned in first-use order, so every record's inputs
    precede its output and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def node_id(self, tensor: "Tensor") -> int:
        nid = self._ids.get(id(tensor))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(tensor)] = nid
            self._tensors.append(tensor)
            tensor.node_id = nid
        return nid

    def record(self, kind, inputs, output, vjp, saved=None) -> None:
        input_ids = [self.node_id(t) for t in inputs]
        output_id = self.node_id(output)
        self._output_ids.add(output_id)
        self.records.append(TapeRecord(kind, input_ids, output_id, vjp, saved))

    def leaves(self):
        """Registered tensors that are not the output of any record."""
        for nid, t in enumerate(self._tensors):
            if nid not in self._output_ids:
                yield nid, t


class Tensor:
    """Dense float64 array with optional gradient tracking.

    `values` is row-major float64; `grad`, once populated by `backward`,
    has the same shape. `node_id` identifies the tensor on the tape it was
    last registered with.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars wrap into constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, inputs, out_values, vjp_builder, saved=None) -> Tensor:
    """Create the output tensor and record the op if anything needs grad."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=track)
    if track:
        tape.record(kind, inputs, out, vjp_builder, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        [a, b],
        a.values + b.values,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        [a, b],
        a.values - b.values,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _emit(
        "mul",
        [a, b],
        av * bv,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _emit(
        "div",
        [a, b],
        out,
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _emit(
        "matmul",
        [a, b],
        av @ bv,
        lambda g: (g @ bv.T, av.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expects 2-d operand, got {a.shape}")
    return _emit("transpose", [a], a.values.T.copy(), lambda g: (g.T,))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _emit("concat", list(tensors), out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", [a], a.values.reshape(shape), lambda g: (g.reshape(old),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols: expects 2-d operand, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.values)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", [a], a.values[:, start:stop].copy(), vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Row gather; gradient scatter-adds back into the source rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.values.ndim != 2:
        raise ShapeError(f"take_rows: expects 2-d operand, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", [a], a.values[idx].copy(), vjp, saved=idx)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", [a], a.values.sum(axis=axis, keepdims=keepdims), vjp)


def _elementwise(kind, a, out, dout):
    return _emit(kind, [a], out, lambda g: (g * dout,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _elementwise("tanh", a, out, 1.0 - out * out)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.values))
    return _elementwise("sigmoid", a, out, out * (1.0 - out))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    return _elementwise("relu", a, out, (a.values > 0.0).astype(np.float64))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _elementwise("exp", a, out, out)


def log(a: Tensor) -> Tensor:
    return _elementwise("log", a, np.log(a.values), 1.0 / a.values)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _elementwise("sqrt", a, out, 0.5 / out)


def xlogx(a: Tensor) -> Tensor:
    """x*log(x) with the 0*log(0) := 0 convention (subgradient 0 at x=0)."""
    v = a.values
    pos = v > 0.0
    out = np.where(pos, v * np.log(np.where(pos, v, 1.0)), 0.0)
    dout = np.where(pos, np.log(np.where(pos, v, 1.0)) + 1.0, 0.0)
    return _elementwise("xlogx", a, out, dout)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of an embedding table by integer index."""
    if table.values.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range for table with {table.shape[0]} rows"
        )

    def vjp(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("embedding_lookup", [table], table.values[idx].copy(), vjp, saved=idx)


def dropout(a: Tensor, rate: float, rng=None, training: bool = False) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/keep.

    Evaluation mode is the exact identity (the input tensor is returned
    unchanged). In training mode `rng` must be supplied.
    """
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise AutodiffError("dropout: training mode requires an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) >= rate).astype(np.float64) / keep
    return _emit("dropout", [a], a.values * mask, lambda g: (g * mask,), saved=mask)


def log_sum_exp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp via max subtraction."""
    if a.shape[axis] == 0:
        raise ShapeError(f"log_sum_exp: empty axis {axis} for shape {a.shape}")
    m = a.values.max(axis=axis, keepdims=True)
    shifted = np.exp(a.values - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    softmax = shifted / total

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (softmax * g,)

    return _emit("log_sum_exp", [a], out if keepdims else out.squeeze(axis=axis), vjp)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty axis {axis} for shape {a.shape}")
    m = a.values.max(axis=axis, keepdims=True)
    shifted = a.values - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def vjp(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", [a], out, vjp)


_PRIMITIVES = {
    "matmul": lambda inputs, params: matmul(*inputs),
    "add": lambda inputs, params: add(*inputs),
    "mul": lambda inputs, params: mul(*inputs),
    "concat": lambda inputs, params: concat(list(inputs), axis=params.get("axis", 0)),
    "tanh": lambda inputs, params: tanh(*inputs),
    "sigmoid": lambda inputs, params: sigmoid(*inputs),
    "embedding_lookup": lambda inputs, params: embedding_lookup(
        inputs[0], params["indices"]
    ),
    "dropout": lambda inputs, params: dropout(
        inputs[0],
        params["rate"],
        rng=params.get("rng"),
        training=params.get("training", False),
    ),
}


def apply_primitive(kind: str, inputs: list[Tensor], **params) -> Tensor:
    """Dispatch a named primitive; shape errors name the op and shapes."""
    if kind not in _PRIMITIVES:
        raise AutodiffError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](inputs, params)


# ---------------------------------------------------------------------------
# composite vector ops


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.values.ndim != 1:
        raise ShapeError(f"dot: expects equal-length vectors, got {a.shape}, {b.shape}")
    return tensor_sum(mul(a, b))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors; errors on zero norm."""
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(
            f"cosine_similarity: expects equal-length vectors, got {a.shape}, {b.shape}"
        )
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ShapeError("cosine_similarity: zero-norm input")
    norm_a = sqrt(tensor_sum(mul(a, a)))
    norm_b = sqrt(tensor_sum(mul(b, b)))
    return div(dot(a, b), mul(norm_a, norm_b))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `loss`.

    Gradients accumulate into existing `.grad` buffers; the optimizer (or
    `zero_grad`) is responsible for clearing them.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise AutodiffError("backward: no active tape")
    if not tape.records:
        raise AutodiffError("backward: tape is empty")
    if loss.values.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or id(loss) not in tape._ids:
        raise AutodiffError("backward: loss is not connected to this tape")

    grads: dict[int, np.ndarray] = {
        tape.node_id(loss): np.ones_like(loss.values)
    }
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for nid, gi in zip(rec.input_ids, rec.vjp(g)):
            if gi is None:
                continue
            acc = grads.get(nid)
            # non-inplace accumulation: vjps may hand back aliased arrays
            grads[nid] = gi if acc is None else acc + gi
    for nid, t in tape.leaves():
        if not t.requires_grad:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g
