"""Fully-convolutional residual descriptor network.

The network keeps the input resolution everywhere: a stem convolution lifts RGB
to ``channels`` feature planes, followed by ``blocks`` residual blocks of
conv → batch-norm → relu → conv → batch-norm, skip add, relu. Every convolution
uses stride 1 and ``kernel // 2`` zero padding.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from condl.config import ModelConfig
from condl.engine import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batch_norm2d,
    conv2d,
    relu,
    take,
)

from .synthgen import Image

LOGGER = logging.getLogger(__name__)

BLOCK_LAYOUT = "post_activation_residual"
MIN_INPUT_SIZE = 8


@dataclass
class FeatureMap:
    """Dense ``d×H×W`` descriptors at the resolution of the source image."""

    data: Tensor
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.data.data.ndim != 3 or self.data.shape[1:] != (self.height, self.width):
            raise ShapeError(
                f"feature map of shape {self.data.shape} does not match source {self.height}×{self.width}"
            )

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    stats: Dict[str, RunningStats] = field(default_factory=dict)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def clone(self) -> "ModelParams":
        tensors = {
            name: Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad, name=name, dtype=tensor.data.dtype)
            for name, tensor in self.tensors.items()
        }
        return ModelParams(config=copy.deepcopy(self.config), tensors=tensors, stats=copy.deepcopy(self.stats))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(tensor.data)) for tensor in self.tensors.values()) and all(
            np.all(np.isfinite(stat.mean)) and np.all(np.isfinite(stat.var)) for stat in self.stats.values()
        )


def _block_prefix(index: int) -> str:
    return f"blocks.{index}"


def parameter_layout(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""

    k, c = cfg.kernel, cfg.channels
    layout: List[Tuple[str, Tuple[int, ...]]] = [("stem.weight", (c, 3, k, k)), ("stem.bias", (c,))]
    for index in range(cfg.blocks):
        prefix = _block_prefix(index)
        for conv in ("conv1", "conv2"):
            layout.append((f"{prefix}.{conv}.weight", (c, c, k, k)))
            layout.append((f"{prefix}.{conv}.bias", (c,)))
        if cfg.norm:
            for norm in ("norm1", "norm2"):
                layout.append((f"{prefix}.{norm}.gamma", (c,)))
                layout.append((f"{prefix}.{norm}.beta", (c,)))
    return layout


def norm_layer_names(cfg: ModelConfig) -> List[str]:
    if not cfg.norm:
        return []
    return [f"{_block_prefix(i)}.{norm}" for i in range(cfg.blocks) for norm in ("norm1", "norm2")]


def init_model(cfg: ModelConfig) -> ModelParams:
    """He-normal convolution weights, zero biases, unit gamma, zero beta."""

    rng = np.random.default_rng(cfg.seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_layout(cfg):
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    stats = {name: RunningStats.fresh(cfg.channels, cfg.bn_momentum) for name in norm_layer_names(cfg)}
    params = ModelParams(config=cfg, tensors=tensors, stats=stats)
    LOGGER.debug(
        "model_initialized",
        extra={"blocks": cfg.blocks, "channels": cfg.channels, "parameters": params.parameter_count()},
    )
    return params


def _conv(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=1, padding=params.config.kernel // 2)


def _norm(params: ModelParams, prefix: str, x: Tensor, training: bool) -> Tensor:
    if not params.config.norm:
        return x
    return batch_norm2d(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params.stats[prefix],
        training,
        eps=params.config.bn_eps,
    )


def forward(params: ModelParams, images: Tensor, training: bool) -> Tensor:
    """Run the network on ``3×H×W`` or ``B×3×H×W`` input."""

    shape = images.shape
    if len(shape) not in (3, 4):
        raise ShapeError(f"expected 3×H×W or B×3×H×W images, got {shape}")
    if shape[-3] != 3:
        raise ShapeError(f"expected 3 input channels, got {shape[-3]}")
    if shape[-2] < MIN_INPUT_SIZE or shape[-1] < MIN_INPUT_SIZE:
        raise ShapeError(f"input must be at least {MIN_INPUT_SIZE}×{MIN_INPUT_SIZE}, got {shape[-1]}×{shape[-2]}")

    x = _conv(params, "stem", images)
    for index in range(params.config.blocks):
        prefix = _block_prefix(index)
        y = relu(_norm(params, f"{prefix}.norm1", _conv(params, f"{prefix}.conv1", x), training))
        y = _norm(params, f"{prefix}.norm2", _conv(params, f"{prefix}.conv2", y), training)
        x = relu(add(x, y))
    return x


def extract_features(params: ModelParams, image: Tensor, training: bool = False) -> FeatureMap:
    if image.data.ndim != 3:
        raise ShapeError(f"extract_features expects one 3×H×W image, got {image.shape}")
    out = forward(params, image, training)
    return FeatureMap(data=out, height=image.shape[1], width=image.shape[2])


def extract_feature_batch(params: ModelParams, images: Tensor, training: bool = False) -> List[FeatureMap]:
    """Feature maps for a ``B×3×H×W`` batch; batch-norm statistics span the batch in training."""

    if images.data.ndim != 4:
        raise ShapeError(f"extract_feature_batch expects B×3×H×W images, got {images.shape}")
    out = forward(params, images, training)
    height, width = images.shape[2], images.shape[3]
    return [FeatureMap(data=take(out, i), height=height, width=width) for i in range(images.shape[0])]


def image_tensor(image: Image) -> Tensor:
    return Tensor(image.to_chw())


def pair_tensor(image_a: Image, image_b: Image) -> Tensor:
    if image_a.data.shape != image_b.data.shape:
        raise ShapeError(
            f"image sizes differ: {image_a.width}×{image_a.height} vs {image_b.width}×{image_b.height}"
        )
    return Tensor(np.stack([image_a.to_chw(), image_b.to_chw()]))
