"""Dense tensor values plus a reverse-mode differentiation tape.

A Tensor wraps a contiguous float32/float64 numpy array. Tensors are
immutable values: no operation mutates its inputs. While a Tape is active
(see `tape()`), every differentiable operation appends one node recording
its inputs and a local gradient rule; `backward()` replays the tape in
reverse and accumulates a total derivative for every reachable
requires_grad leaf.

The engine is single-threaded per tape. Distinct tapes/models may live on
distinct threads; nothing here is shared mutable state except the
thread-local active-tape stack.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NonFiniteValue, NotScalarRoot, ShapeMismatch, TapeConsumed

DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    """Innermost active tape, or None when recording is off."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(arr: np.ndarray, op: str) -> None:
    """Raise NonFiniteValue if arr contains NaN or +-Inf.

    Uses min/max reductions so no boolean temporary is allocated; NaN
    poisons both reductions and Inf shows up at one end.
    """
    if arr.size == 0:
        return
    lo = float(arr.min())
    hi = float(arr.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteValue(f"{op} produced NaN/Inf values")


class Tensor:
    """Immutable dense array with optional gradient tracking.

    data is always a C-contiguous float32 or float64 numpy array. The
    array must never be written through after construction.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in DTYPES:
            raise ShapeMismatch(f"unsupported dtype {arr.dtype}; use f32/f64")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        check_finite(self.data, "tensor construction")

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a 1-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out_id", "inputs", "grad_fn", "name")

    def __init__(self, out_id, inputs, grad_fn, name):
        self.out_id = out_id
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.name = name


class Tape:
    """Append-only record of operations, replayed in reverse by backward().

    Topological order holds by construction: a node's inputs were created
    (and therefore recorded, if non-leaf) before the node itself.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        # ids of tensors that live on this tape (leaves used as op inputs
        # plus every op output); used to decide whether to record.
        self._tracked: set[int] = set()

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn, name: str) -> None:
        self.nodes.append(_Node(id(out), tuple(inputs), grad_fn, name))
        self._tracked.add(id(out))

    def backward(self, root: Tensor) -> dict:
        """Accumulate d(root)/d(leaf) for every reachable requires_grad leaf.

        Returns a mapping Tensor -> gradient array (same shape/dtype as the
        leaf) and also stores it on leaf.grad. A tape drives one backward
        pass; a second call raises TapeConsumed.
        """
        if root.size != 1:
            raise NotScalarRoot(f"backward root must be scalar, got shape {root.shape}")
        if self.consumed:
            raise TapeConsumed("tape already consumed by a previous backward()")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        if root.requires_grad:
            leaf_grads[root] = grads[id(root)]

        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.grad_fn(g)
            for tensor, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if gi.shape != tensor.data.shape:
                    raise ShapeMismatch(
                        f"gradient shape {gi.shape} != input shape {tensor.data.shape} in {node.name}"
                    )
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if tensor.requires_grad:
                    leaf_grads[tensor] = grads[key]

        for tensor, g in leaf_grads.items():
            tensor.grad = g
        return leaf_grads


class tape:
    """Context manager activating a fresh Tape for recording."""

    def __enter__(self) -> Tape:
        self._tape = Tape()
        _tape_stack().append(self._tape)
        return self._tape

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self._tape


def backward(root: Tensor) -> dict:
    """backward() against the innermost active tape."""
    t = active_tape()
    if t is None:
        raise TapeConsumed("no active tape; wrap the forward pass in `with tape():`")
    return t.backward(root)


def from_op(
    data: np.ndarray,
    inputs: Iterable[Tensor],
    grad_fn: Callable[[np.ndarray], tuple],
    name: str,
) -> Tensor:
    """Lift an op result into a Tensor, recording it when a tape is live.

    grad_fn maps the upstream gradient to one gradient (or None) per input,
    in order. This is the single extension point custom fused ops (e.g. the
    segmentation loss) use to participate in differentiation.
    """
    check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.requires_grad = False
    out.grad = None
    t = active_tape()
    if t is not None:
        ins = tuple(inputs)
        if any(t.watches(x) for x in ins):
            t.record(out, ins, grad_fn, name)
    return out
