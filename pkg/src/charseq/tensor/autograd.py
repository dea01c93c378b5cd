"""Dense tensors, the recording tape and reverse-mode backward."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from charseq.errors import NumericError, UsageError

_TAPES: list["Tape"] = []

# Finite checks on every op output; disabled only for benchmarking.
CHECK_FINITE = True


@dataclass(eq=False)
class Node:
    """One recorded operation: ``output = op(*inputs)``."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1
    tape: "Tape | None" = None


class Tape:
    """Ordered record of operations executed while the tape is active.

    Ops only record when at least one input requires a gradient. The tape
    also carries the train/eval flag and the RNG used by dropout, so a model
    run outside any tape is deterministic and gradient-free.
    """

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.nodes: list[Node] = []
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def is_training() -> bool:
    tape = current_tape()
    return tape is not None and tape.training


class Tensor:
    """n-dimensional array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the functional forms live in charseq.tensor.ops.
    def __add__(self, other):
        from charseq.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from charseq.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from charseq.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from charseq.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from charseq.tensor import ops
        return ops.div(self, other)

    def __neg__(self):
        from charseq.tensor import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from charseq.tensor import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from charseq.tensor import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from charseq.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from charseq.tensor import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from charseq.tensor import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from charseq.tensor import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op's forward value and record it on the active tape."""
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite value in forward output")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward)
        out._node = node
        tape.record(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into leaves; callers zero them between steps.
    Intermediate gradients are local to this call, so the same tape can be
    replayed again.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is None:
        raise UsageError("loss was not produced on an active tape with trainable inputs")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for current in reversed(node.tape.nodes[: node.index + 1]):
        g = grads.pop(id(current.output), None)
        if g is None:
            continue
        input_grads = current.backward(g)
        for inp, gi in zip(current.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                gi = np.asarray(gi, dtype=inp.dtype)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


@dataclass
class no_grad:
    """Context that suspends recording, e.g. for decoding inside a training run."""

    _saved: list = field(default_factory=list)

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()
        return self

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
