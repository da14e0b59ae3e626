from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from errors import ConfigurationError, DimensionError
from layers import NormParams, init_conv, init_norm
from tensor import Mode, Tensor, add, conv2d, max_pool2d, relu

MIN_INPUT_SIZE = 32
NUM_STAGES = 4
POOL_SIZE, POOL_STRIDE, POOL_PAD = 3, 2, 1


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 8
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    stem_kernel: int = 7
    stem_stride: int = 2
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if len(self.widths) != NUM_STAGES or len(self.stage_strides) != NUM_STAGES:
            raise ConfigurationError(
                f"backbone needs exactly {NUM_STAGES} stage widths and strides, got {self.widths}"
            )
        if any(w < 1 for w in self.widths) or self.stem_channels < 1:
            raise ConfigurationError(f"backbone widths must be positive, got {self.widths}")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigurationError(f"backbone widths must be non-decreasing, got {self.widths}")
        if self.blocks_per_stage < 1 or self.stem_stride < 1 or any(s < 1 for s in self.stage_strides):
            raise ConfigurationError("block counts and strides must be positive")

    @classmethod
    def full_size(cls) -> "BackboneConfig":
        return cls(stem_channels=64, widths=(64, 128, 256, 512))


@dataclass
class BasicBlockParams:
    conv1: Tensor
    bn1: NormParams
    conv2: Tensor
    bn2: NormParams
    proj: Tensor | None = None
    proj_bn: NormParams | None = None

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.conv1.w", self.conv1
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield f"{prefix}.conv2.w", self.conv2
        yield from self.bn2.named_parameters(f"{prefix}.bn2")
        if self.proj is not None:
            yield f"{prefix}.proj.w", self.proj
            yield from self.proj_bn.named_parameters(f"{prefix}.proj_bn")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")
        if self.proj_bn is not None:
            yield from self.proj_bn.named_buffers(f"{prefix}.proj_bn")


def init_basic_block(
    rng: np.random.Generator, in_channels: int, out_channels: int, stride: int
) -> BasicBlockParams:
    block = BasicBlockParams(
        conv1=init_conv(rng, out_channels, in_channels, 3),
        bn1=init_norm(out_channels),
        conv2=init_conv(rng, out_channels, out_channels, 3),
        bn2=init_norm(out_channels),
    )
    if stride != 1 or in_channels != out_channels:
        block.proj = init_conv(rng, out_channels, in_channels, 1)
        block.proj_bn = init_norm(out_channels)
    return block


def basic_block(x: Tensor, params: BasicBlockParams, stride: int, mode: Mode) -> Tensor:
    out = relu(params.bn1(conv2d(x, params.conv1, stride=stride, pad=1), mode))
    out = params.bn2(conv2d(out, params.conv2, stride=1, pad=1), mode)
    if params.proj is None:
        skip = x
    else:
        skip = params.proj_bn(conv2d(x, params.proj, stride=stride, pad=0), mode)
    if skip.shape != out.shape:
        raise DimensionError(f"basic block: residual {out.shape} does not match skip {skip.shape}")
    return relu(add(out, skip))


@dataclass
class BackboneParams:
    config: BackboneConfig
    stem_conv: Tensor
    stem_bn: NormParams
    stages: list[list[BasicBlockParams]] = field(default_factory=list)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}stem.conv.w", self.stem_conv
        yield from self.stem_bn.named_parameters(f"{prefix}stem.bn")
        for level, blocks in enumerate(self.stages, start=1):
            for index, block in enumerate(blocks, start=1):
                yield from block.named_parameters(f"{prefix}res{level}.block{index}")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from self.stem_bn.named_buffers(f"{prefix}stem.bn")
        for level, blocks in enumerate(self.stages, start=1):
            for index, block in enumerate(blocks, start=1):
                yield from block.named_buffers(f"{prefix}res{level}.block{index}")


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    params = BackboneParams(
        config=config,
        stem_conv=init_conv(rng, config.stem_channels, config.in_channels, config.stem_kernel),
        stem_bn=init_norm(config.stem_channels),
    )
    in_channels = config.stem_channels
    for width, stride in zip(config.widths, config.stage_strides):
        blocks = []
        for index in range(config.blocks_per_stage):
            blocks.append(
                init_basic_block(rng, in_channels, width, stride if index == 0 else 1)
            )
            in_channels = width
        params.stages.append(blocks)
    return params


def backbone_forward(
    image: Tensor, params: BackboneParams, mode: Mode, max_level: int = NUM_STAGES
) -> list[Tensor]:
    """Run the stem and stages ``1..max_level``; returns one feature map per stage."""
    config = params.config
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise DimensionError(
            f"expected a B x {config.in_channels} x H x W image batch, got {image.shape}"
        )
    if min(image.shape[2:]) < MIN_INPUT_SIZE:
        raise ConfigurationError(
            f"input {image.shape[2]}x{image.shape[3]} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
        )

    x = conv2d(image, params.stem_conv, stride=config.stem_stride, pad=config.stem_kernel // 2)
    x = relu(params.stem_bn(x, mode))
    x = max_pool2d(x, POOL_SIZE, POOL_STRIDE, POOL_PAD)

    features = []
    for blocks, stride in zip(params.stages[:max_level], config.stage_strides):
        for index, block in enumerate(blocks):
            x = basic_block(x, block, stride if index == 0 else 1, mode)
        features.append(x)
    return features


def _conv_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def trace_backbone_shapes(
    config: BackboneConfig, height: int, width: int
) -> dict[str, tuple[int, int, int]]:
    """Channel x height x width after the stem, the pool and every stage, without running."""
    if min(height, width) < MIN_INPUT_SIZE:
        raise ConfigurationError(
            f"input {height}x{width} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
        )
    pad = config.stem_kernel // 2
    h = _conv_extent(height, config.stem_kernel, config.stem_stride, pad)
    w = _conv_extent(width, config.stem_kernel, config.stem_stride, pad)
    shapes = {"stem": (config.stem_channels, h, w)}
    h = _conv_extent(h, POOL_SIZE, POOL_STRIDE, POOL_PAD)
    w = _conv_extent(w, POOL_SIZE, POOL_STRIDE, POOL_PAD)
    shapes["pool"] = (config.stem_channels, h, w)
    for level, (channels, stride) in enumerate(zip(config.widths, config.stage_strides), start=1):
        h = _conv_extent(h, 3, stride, 1)
        w = _conv_extent(w, 3, stride, 1)
        shapes[f"res{level}"] = (channels, h, w)
    return shapes
