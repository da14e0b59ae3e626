import math
from dataclasses import dataclass
from typing import Iterator, Protocol

import numpy as np

from errors import DimensionError
from tensor import Mode, Tensor, batch_norm, linear


class ParamGroup(Protocol):
    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]: ...

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]: ...


def learnable(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


@dataclass
class LinearParams:
    weight: Tensor  # fan_in x fan_out
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.weight
        yield f"{prefix}.b", self.bias

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from ()


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    mean: np.ndarray
    var: np.ndarray

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.mean, self.var, mode)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.mean", self.mean
        yield f"{prefix}.var", self.var


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> LinearParams:
    bound = 1.0 / math.sqrt(fan_in)
    return LinearParams(
        weight=learnable(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        bias=learnable(rng.uniform(-bound, bound, size=(fan_out,))),
    )


def init_norm(features: int) -> NormParams:
    return NormParams(
        gamma=learnable(np.ones(features)),
        beta=learnable(np.zeros(features)),
        mean=np.zeros(features),
        var=np.ones(features),
    )


def init_conv(
    rng: np.random.Generator, out_channels: int, in_channels: int, size: int
) -> Tensor:
    # He-uniform, fan_in = in_channels * size^2
    bound = math.sqrt(6.0 / (in_channels * size * size))
    return learnable(rng.uniform(-bound, bound, size=(out_channels, in_channels, size, size)))


def state_arrays(group: ParamGroup, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in group.named_parameters(prefix)}
    arrays.update(group.named_buffers(prefix))
    return arrays


def load_state_arrays(group: ParamGroup, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Copy ``arrays`` into the parameters and buffers of ``group`` by name."""
    for name, tensor in group.named_parameters(prefix):
        tensor.data = _checked(name, arrays, tensor.shape).copy()
        tensor.grad = None
    for name, buffer in group.named_buffers(prefix):
        buffer[...] = _checked(name, arrays, buffer.shape)


def _checked(name: str, arrays: dict[str, np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
    if name not in arrays:
        raise DimensionError(f"missing parameter '{name}'")
    value = np.asarray(arrays[name], dtype=np.float64)
    if value.shape != shape:
        raise DimensionError(f"parameter '{name}' has shape {value.shape}, expected {shape}")
    return value
