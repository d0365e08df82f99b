"""Dense tensor with tape-free reverse-mode differentiation.

Each :class:`Tensor` produced by an operation keeps references to its parents
and a closure that pushes its adjoint back to them. ``backward`` walks the
graph in reverse topological order. Values are immutable: the underlying
array is marked read-only at construction.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; forward values only."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        """Wrap an op result; attach the graph only when a parent needs it."""
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        data = np.asarray(data)
        if data.dtype not in DTYPES:
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out.name = None
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation -------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar (implemented in ops) -----------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data: ArrayLike, name: Optional[str] = None, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-6,
    atol: float = 1e-8,
    indices: Optional[Iterable[tuple[int, int]]] = None,
    relative: str = "component",
) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``f`` maps the given tensor(s) to a scalar Tensor. Every component of every
    input is perturbed unless ``indices`` lists ``(input_number, flat_index)``
    pairs to probe. The relative error of a component is
    ``|g - fd| / max(|g|, |fd|, atol)``; ``atol`` keeps components whose true
    derivative is zero from dividing round-off by round-off.

    ``relative="tensor"`` divides instead by the largest ``|g|`` or ``|fd|``
    of the same input, so components far below that input's gradient scale
    are judged against the scale rather than against their own round-off.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if relative not in ("component", "tensor"):
        raise ValueError(f"relative must be 'component' or 'tensor', got {relative!r}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in inputs]
    out = f(*leaves)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f returned a non-finite value")
    if out.size != 1:
        raise ValueError("f must return a scalar")
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def evaluate(which: int, flat: int, delta: float) -> float:
        probe = []
        for n, leaf in enumerate(leaves):
            if n == which:
                arr = leaf.data.copy().reshape(-1)
                arr[flat] += delta
                probe.append(Tensor(arr.reshape(leaf.shape)))
            else:
                probe.append(Tensor(leaf.data))
        with no_grad():
            value = f(*probe).data
        if not np.isfinite(value).all():
            raise NonFiniteError("f returned a non-finite value under perturbation")
        return float(np.asarray(value).reshape(-1)[0])

    if indices is None:
        indices = [(n, i) for n, leaf in enumerate(leaves) for i in range(leaf.size)]
    pairs = []
    for n, i in indices:
        fd = (evaluate(n, i, eps) - evaluate(n, i, -eps)) / (2 * eps)
        pairs.append((n, float(analytic[n].reshape(-1)[i]), fd))
    scale = {}
    for n, g, fd in pairs:
        scale[n] = max(scale.get(n, atol), abs(g), abs(fd))
    worst = 0.0
    for n, g, fd in pairs:
        denom = max(abs(g), abs(fd), atol) if relative == "component" else scale[n]
        worst = max(worst, abs(g - fd) / denom)
    return worst
