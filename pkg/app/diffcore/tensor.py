"""Tape-recording dense arrays.

Every primitive in :mod:`app.diffcore.ops` returns a :class:`Tensor` that keeps
references to its inputs and a vector-Jacobian product closure.  Nothing is
recorded for tensors that cannot reach a trainable leaf, or inside
:func:`no_grad`.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.errors import PrecisionError, ShapeError

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_PRECISIONS = {32: np.dtype(np.float32), 64: np.dtype(np.float64)}

_dtype: ContextVar[np.dtype] = ContextVar("localinr_dtype", default=_PRECISIONS[32])
_grad_enabled: ContextVar[bool] = ContextVar("localinr_grad_enabled", default=True)


def dtype_for(bits: int) -> np.dtype:
    try:
        return _PRECISIONS[bits]
    except KeyError:
        raise PrecisionError(f"unsupported precision {bits}; expected 32 or 64") from None


def get_dtype() -> np.dtype:
    return _dtype.get()


@contextmanager
def precision(bits: int) -> Iterator[np.dtype]:
    token = _dtype.set(dtype_for(bits))
    try:
        yield _dtype.get()
    finally:
        _dtype.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A dense array node.

    ``data`` is never mutated by the engine; optimizers rebind it to a fresh
    array, so tapes recorded earlier stay valid.
    """

    __slots__ = ("data", "name", "op", "requires_grad", "grad", "_parents", "_vjp")
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        *,
        name: Optional[str] = None,
        requires_grad: bool = False,
    ):
        self.data = np.array(data, dtype=get_dtype())
        self.name = name
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[VJP] = None

    @classmethod
    def from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], vjp: VJP) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.op = op
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return constant(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar, resolved lazily to avoid an import cycle with ops
    def __add__(self, other):
        from app.diffcore import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.diffcore import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.diffcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.diffcore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.diffcore import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.diffcore import ops
        return ops.mul(other, self)

    def __neg__(self):
        from app.diffcore import ops
        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        from app.diffcore import ops
        return ops.mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        from app.diffcore import ops
        return ops.matmul(self, other)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) and not data.requires_grad else Tensor(data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(
    output: Tensor,
    params: Mapping[str, Tensor],
    seed: Optional[np.ndarray] = None,
) -> dict:
    """Reverse-mode sweep from ``output``; returns one gradient per parameter.

    Parameters that ``output`` does not depend on get a zero gradient.
    """
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError("backward", f"seed shape {seed.shape} != output shape {output.shape}")

    grads = {id(output): seed}
    if output.requires_grad:
        for node in reversed(_topological_order(output)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        out[name] = g
    return out
