"""Dense NCHW tensors with a recording tape for reverse-mode differentiation.

Ops in :mod:`stackseg.ops` append a node to the active :class:`Tape` when one
is open (``with Tape() as tape: ...``). Outside a tape nothing is recorded,
which is how inference runs without keeping activations alive.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_active_tapes: list["Tape | None"] = []


class Tensor:
    """A float array plus an optional gradient buffer.

    Network activations are 4-D (N, C, H, W). Biases and batch-norm affine
    parameters are 1-D and losses are 0-D; the ops check the ranks they need.
    float64 input is kept as float64 so gradient checks can run in double
    precision; everything else is stored as float32.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        # ascontiguousarray would promote 0-d losses to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A trainable tensor with a unique slash-separated name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn", "op")

    def __init__(self, op, output, inputs, backward_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the ops executed while the tape is active.

    Nodes are appended in execution order, so the list is already a
    topological order. A tape can be consumed by :func:`backward` once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()
        self.consumed = False


def active_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


@contextmanager
def no_record():
    """Run ops without recording them, even inside an open tape."""
    _active_tapes.append(None)
    try:
        yield
    finally:
        _active_tapes.pop()


def record(op: str, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Register ``output`` on the active tape if any input needs a gradient.

    ``backward_fn(grad_output)`` returns one gradient (or None) per input.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.nodes.append(_Node(op, output, inputs, backward_fn))
    return output


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced a non-finite value")
    return arr


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(.) to every tensor recorded on ``tape``.

    Gradients accumulate into ``.grad`` so a tensor used twice receives the
    sum of both contributions. Intermediate gradients are released once their
    node has been processed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed; record a new forward pass")
    tape.consumed = True

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                t.accumulate_grad(gi)
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)


def he_uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Uniform samples on [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE))
