"""Differentiable primitives.

Images are laid out NCHW.  Every primitive validates its input shapes and
raises :class:`~app.errors.ShapeError` naming itself on mismatch.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from app.diffcore.tensor import Tensor, get_dtype
from app.errors import ShapeError

Operand = Union[Tensor, np.ndarray, float, int]
Pair = Union[int, Tuple[int, int]]

LOGIT_CLIP = 1e4


def _lift(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_dtype()
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=dtype)
    out.name, out.op, out.grad = None, "const", None
    out.requires_grad, out._parents, out._vjp = False, (), None
    return out


def _operands(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def _pair(value: Pair) -> Tuple[int, int]:
    return (value, value) if isinstance(value, int) else (int(value[0]), int(value[1]))


# elementwise arithmetic

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, "add", (a, b), vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, "mul", (a, b), vjp)


# dense maps

def matmul(a: Operand, b: Operand) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"incompatible operands {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, "matmul", (a, b), vjp)


def linear(x: Operand, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x = _lift(x, weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", f"input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear", f"bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    fan_in, fan_out = weight.shape

    def vjp(g):
        g2 = g.reshape(-1, fan_out)
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, fan_in).T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, "linear", parents, vjp)


def conv2d(
    x: Operand,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Pair = 1,
    padding: Pair = 0,
) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw)."""
    x = _lift(x, weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d", f"bias {bias.shape} does not match {weight.shape[0]} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    kh, kw = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:hp - ph, pw:wp - pw]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, "conv2d", parents, vjp)


def conv2d_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x.data * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def sin(x: Tensor) -> Tensor:
    return Tensor.from_op(np.sin(x.data), "sin", (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return Tensor.from_op(np.cos(x.data), "cos", (x,), lambda g: (-g * np.sin(x.data),))


def abs_(x: Tensor) -> Tensor:
    # np.sign(0) == 0 makes the subgradient at zero 0
    return Tensor.from_op(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def sigmoid_cross_entropy_with_logits(logits: Tensor, labels: Union[np.ndarray, float]) -> Tensor:
    """Elementwise ``-z log σ(x) - (1 - z) log(1 - σ(x))`` in its overflow-free form."""
    z = np.broadcast_to(np.asarray(labels, dtype=logits.dtype), logits.shape)
    # infinite logits would turn x * z into inf - inf
    x = np.clip(logits.data, -LOGIT_CLIP, LOGIT_CLIP)
    loss = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    return Tensor.from_op(
        loss.astype(logits.dtype), "sigmoid_bce", (logits,),
        lambda g: (g * (expit(x) - z).astype(logits.dtype),),
    )


# reductions

def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), "mean", (x,), vjp)


# structure

def concat(tensors: Sequence[Operand], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis):
            raise ShapeError("concat", f"shape {t.shape} does not match {ref.shape} off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor.from_op(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation of {x.ndim} dims")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor.from_op(out, "transpose", (x,), lambda g: (g.transpose(inverse),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError("slice", f"range [{start}, {stop}) outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor.from_op(x.data[index], "slice", (x,), vjp)


def downsample(x: Tensor, factor: int) -> Tensor:
    """Strided (nearest) spatial downsampling of an NCHW tensor."""
    if x.ndim != 4 or factor < 1 or x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError("downsample", f"cannot downsample {x.shape} by {factor}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, :, ::factor, ::factor] = g
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(x.data[:, :, ::factor, ::factor]), "downsample", (x,), vjp)


def avg_pool(x: Tensor, window: Pair) -> Tensor:
    """Mean over non-overlapping (kh, kw) blocks of an NCHW tensor."""
    kh, kw = _pair(window)
    if x.ndim != 4 or kh < 1 or kw < 1 or x.shape[2] % kh or x.shape[3] % kw:
        raise ShapeError("avg_pool", f"cannot pool {x.shape} over {kh}x{kw} blocks")
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def vjp(g):
        spread = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3)
        return ((spread / (kh * kw)).astype(x.dtype),)

    return Tensor.from_op(out.astype(x.dtype), "avg_pool", (x,), vjp)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "abs": abs_,
    "sigmoid_bce": sigmoid_cross_entropy_with_logits,
    "sum": sum_,
    "mean": mean,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_axis,
    "downsample": downsample,
    "avg_pool": avg_pool,
}
