"""Dense float32 tensors with reverse-mode differentiation.

The engine is define-by-run: while a ``Tape`` is active, every primitive
records itself, and ``Tape.backward`` replays the records in reverse to
accumulate gradients. Shapes are static and there is no general
broadcasting; the few mixed-shape cases that exist (bias rows, scalars)
are handled explicitly by the ops that need them.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError

DTYPE = np.float32


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    return arr


class Tensor:
    """A float32 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the heavy lifting lives in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def param(data, name: str | None = None) -> Tensor:
    """A trainable tensor (records gradients when used under a tape)."""
    return Tensor(data, requires_grad=True, name=name)


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Records append in execution order, so iterating them reversed is a
    valid reverse-topological replay; each tensor's grad is accumulated
    exactly once per use.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = Tape._stack.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``root`` into every recorded input.

        ``seed`` defaults to ones (the usual scalar-loss case).
        """
        if seed is None:
            seed = np.ones(root.shape, dtype=DTYPE)
        root.accumulate_grad(np.asarray(seed, dtype=DTYPE))
        for rec in reversed(self._records):
            if all(o.grad is None for o in rec.outputs):
                continue
            gouts = [
                o.grad if o.grad is not None else np.zeros(o.shape, dtype=DTYPE)
                for o in rec.outputs
            ]
            gins = rec.backward(*gouts)
            if len(gins) != len(rec.inputs):
                raise RuntimeError("backward returned wrong number of gradients")
            for t, g in zip(rec.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} != tensor shape {t.data.shape}"
                    )
                t.accumulate_grad(g)
            # Intermediate grads are dead once their record has replayed.
            for o in rec.outputs:
                if o is not root:
                    o.grad = None


def record_op(inputs, outputs, backward) -> None:
    """Register a primitive on the active tape (no-op outside a tape).

    ``backward(*grad_outputs)`` must return one gradient (or None) per
    input, each matching the input's shape. Custom modules (renderers,
    samplers) use this to splice fused kernels into the graph.
    """
    tape = Tape.active()
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape._records.append(_Record(tuple(inputs), tuple(outputs), backward))


def no_grad_data(x) -> np.ndarray:
    """Plain array view of a Tensor or array-like (no recording)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
