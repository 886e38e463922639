"""Minimal reverse-mode differentiation over dense NCHW arrays.

Tensors wrap numpy arrays in either standard (float32) or high (float64)
precision. Differentiable operations execute eagerly and, when a Tape is
active, append a backward closure to it. ``Tape.backward`` replays the
closures in exact reverse recording order, accumulating gradients
additively across fan-out.

Tensors are immutable by convention once created; a tape is single-writer
and consumed by its first backward pass.
"""

from __future__ import annotations

import numpy as np

STANDARD_DTYPE = np.float32
HIGH_DTYPE = np.float64

_TAPE_STACK: list["Tape"] = []


class TapeConsumedError(RuntimeError):
    """Raised when backward is invoked twice on the same tape."""


class Tape:
    """Linear record of differentiable operations (a Wengert list)."""

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", backward_fn) -> None:
        self._entries.append((out, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Propagate d(loss)/d(leaf) into every recorded tensor's ``grad``.

        ``loss`` must be a scalar produced under this tape. Gradients
        accumulate additively, so callers reset leaf grads between steps.
        """
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            backward_fn(out.grad)
        self._entries = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense real-valued array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(STANDARD_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_owned = False

    # ---- introspection ----
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # ---- lifecycle ----
    def detach(self) -> "Tensor":
        """View of the same data that never accumulates gradients."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- operator sugar (delegates to functional) ----
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)


def as_tensor(value, dtype=None) -> Tensor:
    """Coerce scalars/arrays into constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else STANDARD_DTYPE))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an incoming gradient into ``t.grad`` (fan-out sums).

    The first contribution is bound by reference (contributions are never
    mutated once produced); later contributions allocate or add in place.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def make_output(data: np.ndarray, *inputs) -> Tensor:
    """Build an op output; gradients flow only while a tape is active."""
    tape = active_tape()
    rg = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    return Tensor(data, requires_grad=rg)


def record(out: Tensor, backward_fn) -> None:
    if out.requires_grad:
        active_tape().record(out, backward_fn)
