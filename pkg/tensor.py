"""Dense 64-bit tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` (one stack per
thread) whenever at least one input requires a gradient. Outside a tape the
same functions simply compute values, which is how inference runs.
"""

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigurationError, DimensionError, NumericError, UsageError

Mode = Literal["train", "eval"]
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: BackwardRule


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended as operations execute, so every entry's inputs were
    produced by an earlier entry or are leaves.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._outputs: set[int] = set()

    def record(self, entry: TapeEntry):
        self.entries.append(entry)
        self._outputs.add(id(entry.output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def apply_op(
    op: str, inputs: Sequence[Tensor], data: np.ndarray, rule: BackwardRule
) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when gradients are needed."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    tape = current_tape()
    if needs_grad and tape is not None:
        out.is_leaf = False
        tape.record(TapeEntry(op, tuple(inputs), out, rule))
    return out


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    tape = tape if tape is not None else current_tape()
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape is None or not tape.produced(loss):
        raise UsageError("loss was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        grad_out = grads.pop(id(entry.output), None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(entry.inputs, entry.rule(grad_out)):
            if grad_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad_in if key in grads else grad_in
            if tensor.is_leaf:
                leaves[key] = tensor

    for key, tensor in leaves.items():
        grad = np.array(grads[key], dtype=np.float64)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def zero_grad(tensors: Iterable[Tensor]):
    for tensor in tensors:
        tensor.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return apply_op(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return apply_op(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return apply_op(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op("scale", (a,), a.data * s, lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: Tensor) -> Tensor:
    return apply_op(
        "softplus",
        (x,),
        np.logaddexp(0.0, x.data),
        lambda g: (g * _sigmoid(x.data),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", (x,), y, rule)


# Shape and reduction


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return apply_op("sum", (x,), np.asarray(x.data.sum(axis=axis)), rule)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    return apply_op("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return apply_op(
        "transpose",
        (x,),
        np.ascontiguousarray(x.data.transpose(axes)),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to join")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op(
        "concat", tuple(tensors), data, lambda g: np.split(g, bounds, axis=axis)
    )


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(
            f"split: sizes {list(sizes)} do not add up to extent {x.shape[axis]}"
        )
    parts = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def rule(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        parts.append(apply_op("split", (x,), x.data[index].copy(), rule))
        start += size
    return parts


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return apply_op(
        "matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g)
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def outer_product(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"outer_product: batch mismatch {a.shape} vs {b.shape}")
    batch, p = a.shape
    q = b.shape[1]
    data = (a.data[:, :, None] * b.data[:, None, :]).reshape(batch, p * q)

    def rule(g):
        grid = g.reshape(batch, p, q)
        return (
            (grid * b.data[:, None, :]).sum(axis=2),
            (grid * a.data[:, :, None]).sum(axis=1),
        )

    return apply_op("outer_product", (a, b), data, rule)


# Spatial


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernels {kernels.shape}")
    if kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d: kernels must be square, got {kernels.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} pad={pad}")

    batch, channels, height, width = x.shape
    k = kernels.shape[2]
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(
            f"conv2d: {k}x{k} kernel with pad {pad} gives empty output for input {x.shape}"
        )

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :out_h, :out_w]
    # (B, H', W', Cout) -> (B, Cout, H', W')
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g):
        grad_kernels = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        # (B, H', W', Cin, k, k)
        cols = np.tensordot(g, kernels.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += cols[..., i, j]
        grad_x = grad_padded[:, :, pad : pad + height, pad : pad + width]
        return grad_x, grad_kernels

    return apply_op("conv2d", (x, kernels), out, rule)


def max_pool2d(x: Tensor, size: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected a 4-d input, got {x.shape}")
    batch, channels, height, width = x.shape
    out_h = (height + 2 * pad - size) // stride + 1
    out_w = (width + 2 * pad - size) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"max_pool2d: window {size} too large for input {x.shape}")

    padded = np.pad(
        x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf
    )
    windows = sliding_window_view(padded, (size, size), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :out_h, :out_w]
    flat = windows.reshape(batch, channels, out_h, out_w, size * size)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def rule(g):
        b, c, oh, ow = np.indices(winner.shape)
        rows = oh * stride + winner // size - pad
        cols = ow * stride + winner % size - pad
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, (b, c, rows, cols), g)
        return (grad_x,)

    return apply_op("max_pool2d", (x,), out, rule)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected a 4-d input, got {x.shape}")
    area = x.shape[2] * x.shape[3]
    return apply_op(
        "global_avg_pool",
        (x,),
        x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape),),
    )


# Normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: Mode,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Batch norm over ``B x F`` or ``B x F x H x W`` inputs.

    Train mode normalises with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(
            f"batch_norm: input {x.shape} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    param_shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_scale = gamma.data.reshape(param_shape)

    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigurationError(
                f"batch_norm needs at least 2 samples in train mode, got {x.shape[0]}"
            )
        count = x.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mu) * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * count / max(count - 1, 1)

        def rule(g):
            g_hat = g * g_scale
            grad_x = (
                inv_std
                / count
                * (
                    count * g_hat
                    - g_hat.sum(axis=axes, keepdims=True)
                    - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
                )
            )
            return grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "eval":
        mu = running_mean.reshape(param_shape).copy()
        inv_std = 1.0 / np.sqrt(running_var.reshape(param_shape) + eps)
        x_hat = (x.data - mu) * inv_std

        def rule(g):
            return g * g_scale * inv_std, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ConfigurationError(f"unknown mode '{mode}', expected 'train' or 'eval'")

    out = g_scale * x_hat + beta.data.reshape(param_shape)
    return apply_op("batch_norm", (x, gamma, beta), out, rule)
