"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive records a node on the :class:`Tape` that owns its inputs.
:func:`backward` walks the tape in reverse and applies each node's local
rule. ReLU nodes are the only place the two backward modes differ.
"""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class ReluMode(enum.Enum):
    CLASSICAL = "classical"
    GUIDED = "guided"


class Tensor:
    """A value recorded on a tape.

    ``data`` is a numpy array in the tape's dtype; ``index`` is the value's
    slot on the tape.
    """

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.data = data
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, index={self.index})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[int, ...], output: int, backward_fn: Callable | None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Records values and the primitive operations that produced them.

    Values are appended in creation order, so every node's inputs precede
    its output. ``relu_mode`` selects the ReLU backward rule; it never
    changes a forward value.
    """

    def __init__(self, relu_mode: ReluMode = ReluMode.CLASSICAL, dtype=np.float32):
        self.relu_mode = ReluMode(relu_mode)
        self.dtype = np.dtype(dtype)
        self.values: list[Tensor] = []
        self.nodes: list[Node] = []
        self.tagged: dict[str, Tensor] = {}

    def leaf(self, array, name: str | None = None) -> Tensor:
        """Record an input or parameter. Leaves are always differentiable."""
        data = np.array(array, dtype=self.dtype, copy=True)
        t = Tensor(data, self, len(self.values), name)
        self.values.append(t)
        if name is not None:
            self.tagged[name] = t
        return t

    def tag(self, name: str, t: Tensor) -> Tensor:
        t.name = name
        self.tagged[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tagged[name]

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: operand {x!r} belongs to a different tape")
        t = Tensor(np.asarray(out, dtype=self.dtype), self, len(self.values))
        self.values.append(t)
        self.nodes.append(Node(op, tuple(x.index for x in inputs), t.index, backward_fn))
        return t

    @property
    def relu_count(self) -> int:
        return sum(1 for n in self.nodes if n.op == "relu")


class Gradients:
    """Gradient slots for every value on a tape, indexable by Tensor."""

    def __init__(self, tape: Tape, slots: list[np.ndarray]):
        self.tape = tape
        self.slots = slots

    def __getitem__(self, key: Tensor | str | int) -> np.ndarray:
        if isinstance(key, str):
            key = self.tape.tagged[key]
        if isinstance(key, Tensor):
            key = key.index
        return self.slots[key]

    def __len__(self) -> int:
        return len(self.slots)


# ---------------------------------------------------------------------------
# backward


def relu_backward(h, g_out, mode: ReluMode) -> np.ndarray:
    """Gradient through ``max(h, 0)``.

    Classical passes ``g_out`` where ``h > 0``. Guided additionally blocks
    negative incoming gradient. Both indicators are strict.
    """
    h = np.asarray(h)
    g_out = np.asarray(g_out)
    if h.shape != g_out.shape:
        raise ShapeError(f"relu_backward: incompatible shapes {h.shape} and {g_out.shape}")
    mode = ReluMode(mode)
    gate = h > 0
    if mode is ReluMode.GUIDED:
        gate = gate & (g_out > 0)
    return np.where(gate, g_out, np.zeros_like(g_out))


def backward(tape: Tape, seed: Tensor, mode: ReluMode | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``seed`` with d(seed)/d(seed) = 1.

    Returns a gradient for every recorded value. ``mode`` overrides
    ``tape.relu_mode`` for this sweep only.
    """
    if not isinstance(seed, Tensor) or seed.tape is not tape or seed.index >= len(tape.values) \
            or tape.values[seed.index] is not seed:
        raise ValueError("backward: seed is not a value recorded on this tape")
    if seed.data.size != 1:
        raise ShapeError(f"backward: seed must be a scalar, got shape {seed.shape}")
    mode = tape.relu_mode if mode is None else ReluMode(mode)

    slots: list[np.ndarray | None] = [None] * len(tape.values)
    slots[seed.index] = np.ones_like(seed.data)
    for node in reversed(tape.nodes):
        g_out = slots[node.output]
        if g_out is None:
            continue
        if node.op == "relu":
            h = tape.values[node.inputs[0]].data
            grads = (relu_backward(h, g_out, mode),)
        else:
            grads = node.backward_fn(g_out)
        for idx, g in zip(node.inputs, grads):
            if g is None:
                continue
            if slots[idx] is None:
                slots[idx] = np.array(g, dtype=tape.dtype)
            else:
                slots[idx] = slots[idx] + g
    filled = [np.zeros_like(v.data) if g is None else g for v, g in zip(tape.values, slots)]
    return Gradients(tape, filled)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", (a, b), a.data + b.data,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("multiply", a, b)
    da, db = a.data, b.data
    return a.tape.record("multiply", (a, b), da * db,
                         lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    da, db = a.data, b.data
    return a.tape.record("matmul", (a, b), da @ db, lambda g: (g @ db.T, da.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return a.tape.record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return a.tape.record("reshape", (a,), out, lambda g: (g.reshape(src),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for an (out, in) weight."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    x: (N, C, H, W); weight: (O, C, k, k); bias: (O,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: incompatible shapes {weight.shape} and {bias.shape}")
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    p = padding
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return x.tape.record("conv2d", inputs, out, backward_fn)


def avg_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2x2: expected (N, C, even H, even W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return x.tape.record("avg_pool2x2", (x,), out, backward_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return x.tape.record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    # backward rule lives in relu_backward and depends on the sweep's mode
    return x.tape.record("relu", (x,), np.maximum(x.data, 0), None)


def embedding_lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: incompatible shapes {table.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return table.tape.record("embedding_lookup", (table,), table.data[idx], backward_fn)


def sum_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum_over_axis: axis {axis} out of range for shape {x.shape}")
    src = x.shape
    ax = axis % x.data.ndim

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src).copy(),)

    return x.tape.record("sum_over_axis", (x,), x.data.sum(axis=ax, keepdims=keepdims), backward_fn)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return x.tape.record("softmax", (x,), y, backward_fn)


_PROB_FLOOR = 1e-30


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of ``labels`` over the rows of ``probs``."""
    p2 = probs.data if probs.data.ndim == 2 else probs.data.reshape(1, -1)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != p2.shape[0]:
        raise ShapeError(f"cross_entropy: incompatible shapes {probs.shape} and {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= p2.shape[1]):
        raise IndexError("cross_entropy: label out of range")
    rows = np.arange(lab.shape[0])
    picked = np.maximum(p2[rows, lab], _PROB_FLOOR)
    loss = -np.log(picked).mean()

    def backward_fn(g):
        gp = np.zeros_like(p2)
        gp[rows, lab] = -g / (picked * lab.shape[0])
        return (gp.reshape(probs.shape),)

    return probs.tape.record("cross_entropy", (probs,), np.asarray(loss), backward_fn)


def select(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Pick out one element as a scalar value (e.g. a backward seed)."""
    index = tuple(int(i) for i in index)
    if len(index) != x.data.ndim:
        raise ShapeError(f"select: index {index} does not address shape {x.shape}")
    src = x.shape

    def backward_fn(g):
        gx = np.zeros(src, dtype=x.data.dtype)
        gx[index] = g
        return (gx,)

    return x.tape.record("select", (x,), np.asarray(x.data[index]), backward_fn)
