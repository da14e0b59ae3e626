"""Learnable encoding module (LEM).

A LEM turns a ``B x D x H x W`` feature map into a fixed ``B x C`` vector by
fusing two views of the map: an orderless residual encoding against a learned
codebook (local branch) and the globally averaged channel vector (global
branch). The two branch vectors are combined by a bilinear (outer product)
model and projected to ``C`` dimensions.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from errors import ConfigurationError, DimensionError
from layers import LinearParams, NormParams, init_linear, init_norm, learnable
from tensor import (
    Mode,
    Tensor,
    flatten,
    global_avg_pool,
    mean,
    mul,
    outer_product,
    reduce_sum,
    reshape,
    scale,
    softmax,
    softplus,
    sub,
    transpose,
)

Fusion = Literal["bilinear", "encoding", "pooling"]
FUSIONS: tuple[str, ...] = ("bilinear", "encoding", "pooling")


@dataclass(frozen=True)
class LemConfig:
    channels: int  # D
    num_codewords: int  # K
    branch_dim: int = 64
    out_dim: int = 128  # C
    fusion: Fusion = "bilinear"

    def __post_init__(self):
        for name in ("channels", "num_codewords", "branch_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"LemConfig.{name} must be positive")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(
                f"unknown fusion '{self.fusion}', expected one of {', '.join(FUSIONS)}"
            )

    @property
    def encoding_dim(self) -> int:
        return self.num_codewords * self.channels

    @property
    def fused_dim(self) -> int:
        if self.fusion == "bilinear":
            return self.branch_dim * self.branch_dim
        return self.branch_dim


@dataclass
class Codebook:
    codewords: Tensor  # K x D
    smoothing: Tensor  # K, unconstrained

    @property
    def num_codewords(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def scale(self) -> Tensor:
        return softplus(self.smoothing)


def init_codebook(rng: np.random.Generator, num_codewords: int, dim: int) -> Codebook:
    bound = 1.0 / math.sqrt(num_codewords)
    return Codebook(
        codewords=learnable(rng.uniform(-bound, bound, size=(num_codewords, dim))),
        smoothing=learnable(rng.uniform(0.0, 1.0, size=(num_codewords,))),
    )


@dataclass
class LemParams:
    config: LemConfig
    codebook: Codebook | None
    fc1: LinearParams | None
    fc2: LinearParams | None
    fc3: LinearParams
    bn1: NormParams | None
    bn2: NormParams | None

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.codebook is not None:
            yield f"{prefix}.codewords", self.codebook.codewords
            yield f"{prefix}.smoothing", self.codebook.smoothing
        for name in ("fc1", "fc2", "fc3", "bn1", "bn2"):
            group = getattr(self, name)
            if group is not None:
                yield from group.named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for name in ("bn1", "bn2"):
            group = getattr(self, name)
            if group is not None:
                yield from group.named_buffers(f"{prefix}.{name}")


def init_lem(config: LemConfig, rng: np.random.Generator) -> LemParams:
    local = config.fusion != "pooling"
    pooled = config.fusion != "encoding"
    codebook = init_codebook(rng, config.num_codewords, config.channels) if local else None
    fc1 = init_linear(rng, config.encoding_dim, config.branch_dim) if local else None
    fc2 = init_linear(rng, config.channels, config.branch_dim) if pooled else None
    fc3 = init_linear(rng, config.fused_dim, config.out_dim)
    return LemParams(
        config=config,
        codebook=codebook,
        fc1=fc1,
        fc2=fc2,
        fc3=fc3,
        bn1=init_norm(config.encoding_dim) if local else None,
        bn2=init_norm(config.channels) if pooled else None,
    )


def reshape_spatial(fmap: Tensor) -> Tensor:
    """``B x D x H x W`` -> ``B x N x D`` with descriptors in row-major position order."""
    if fmap.ndim != 4:
        raise DimensionError(f"expected a B x D x H x W feature map, got {fmap.shape}")
    batch, channels, height, width = fmap.shape
    return reshape(transpose(fmap, (0, 2, 3, 1)), (batch, height * width, channels))


def _residuals(descriptors: Tensor, codebook: Codebook) -> Tensor:
    if descriptors.ndim != 3 or descriptors.shape[2] != codebook.dim:
        raise DimensionError(
            f"descriptors {descriptors.shape} do not match codewords {codebook.codewords.shape}"
        )
    batch, count, dim = descriptors.shape
    k = codebook.num_codewords
    # B x N x K x D
    return sub(
        reshape(descriptors, (batch, count, 1, dim)),
        reshape(codebook.codewords, (1, 1, k, dim)),
    )


def _assignments(residuals: Tensor, codebook: Codebook) -> Tensor:
    sq_dist = reduce_sum(mul(residuals, residuals), axis=3)
    smoothing = reshape(codebook.scale(), (1, 1, codebook.num_codewords))
    return softmax(scale(mul(sq_dist, smoothing), -1.0), axis=-1)


def _pool_descriptors(weighted: Tensor) -> Tensor:
    # mean over the N descriptors; use reduce_sum for the unnormalised variant
    return mean(weighted, axis=1)


def _aggregate(residuals: Tensor, weights: Tensor) -> Tensor:
    batch, count, k, _ = residuals.shape
    return _pool_descriptors(mul(reshape(weights, (batch, count, k, 1)), residuals))


def assign_weights(descriptors: Tensor, codebook: Codebook) -> Tensor:
    """Soft assignment ``a_ik = softmax_k(-s_k * ||x_i - c_k||^2)``, shape ``B x N x K``."""
    return _assignments(_residuals(descriptors, codebook), codebook)


def aggregate(descriptors: Tensor, codebook: Codebook, weights: Tensor) -> Tensor:
    """``e_k = 1/N sum_i a_ik (x_i - c_k)``, shape ``B x K x D``."""
    residuals = _residuals(descriptors, codebook)
    if weights.shape != residuals.shape[:3]:
        raise DimensionError(
            f"assignment weights {weights.shape} do not match residuals {residuals.shape[:3]}"
        )
    return _aggregate(residuals, weights)


def encode(fmap: Tensor, codebook: Codebook) -> Tensor:
    if fmap.ndim != 4 or fmap.shape[1] != codebook.dim:
        raise DimensionError(
            f"feature map {fmap.shape} does not match codebook dimension {codebook.dim}"
        )
    residuals = _residuals(reshape_spatial(fmap), codebook)
    return flatten(_aggregate(residuals, _assignments(residuals, codebook)))


def lem_forward(fmap: Tensor, params: LemParams, mode: Mode) -> Tensor:
    config = params.config
    if fmap.ndim != 4 or fmap.shape[1] != config.channels:
        raise DimensionError(
            f"LEM expects {config.channels} input channels, got feature map {fmap.shape}"
        )

    local = global_ = None
    if params.codebook is not None:
        local = params.fc1(params.bn1(encode(fmap, params.codebook), mode))
    if params.fc2 is not None:
        global_ = params.fc2(params.bn2(global_avg_pool(fmap), mode))

    if config.fusion == "bilinear":
        fused = outer_product(local, global_)
    else:
        fused = local if local is not None else global_

    logging.debug(
        f"LEM forward {tuple(fmap.shape)} -> fused {fused.shape[1]} -> {config.out_dim}",
        extra={"fusion": config.fusion, "mode": mode},
    )
    return params.fc3(fused)
