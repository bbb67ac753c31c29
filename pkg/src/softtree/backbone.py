"""Pluggable feature extractors feeding the tree root.

The desk-scale backbone is a small VGG-flavored stack: per block a 3x3
convolution, batch norm, relu, and a 2x2 stride-2 max pool.  The final
block keeps its resolution so the default 3-block, (16, 32, 32)-wide stack
maps 3x32x32 images to 32x8x8 feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import DEFAULT_DTYPE, Tensor, as_tensor, no_grad
from .errors import ConfigError, InputError
from .nn import BatchNorm2d, Conv2d, Module


@dataclass(frozen=True)
class DeskBackboneSpec:
    in_channels: int = 3
    in_side: int = 32
    widths: tuple[int, ...] = (16, 32, 32)

    def __post_init__(self):
        if self.in_channels < 1 or self.in_side < 1 or not self.widths \
                or min(self.widths) < 1:
            raise ConfigError(f"invalid backbone spec: {self}")

    def out_shape(self) -> tuple[int, int, int]:
        side = self.in_side
        for _ in range(len(self.widths) - 1):
            side //= 2
            if side < 1:
                raise ConfigError(
                    f"backbone downsampling exhausts the {self.in_side}px input"
                )
        return self.widths[-1], side, side


class FeatureExtractor(Module):
    """Base contract: declared output shape, freeze flag, NCHW forward."""

    frozen: bool = False

    def out_shape(self) -> tuple[int, int, int]:
        raise NotImplementedError

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class DeskBackbone(FeatureExtractor):
    def __init__(self, spec: DeskBackboneSpec, rng, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.frozen = False
        self.blocks = []
        c_in = spec.in_channels
        for width in spec.widths:
            self.blocks.append({
                "conv": Conv2d(c_in, width, 3, padding=1, rng=rng, dtype=dtype),
                "bn": BatchNorm2d(width, dtype=dtype),
            })
            c_in = width
        spec.out_shape()  # validates downsampling geometry up front

    def out_shape(self) -> tuple[int, int, int]:
        return self.spec.out_shape()

    def forward(self, images, training: bool = False) -> Tensor:
        images = as_tensor(images)
        expected = (self.spec.in_channels, self.spec.in_side, self.spec.in_side)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise InputError(
                f"backbone expects [N,{expected[0]},{expected[1]},{expected[2]}]"
                f" images, got {images.shape}"
            )
        if self.frozen:
            # no gradient flows into (or through) a frozen extractor
            with no_grad():
                return self._run(images.detach(), training)
        return self._run(images, training)

    def _run(self, x, training: bool) -> Tensor:
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            x = ops.relu(block["bn"](block["conv"](x), training))
            if i != last:
                x = ops.max_pool2d(x, 2, 2)
        return x


def build_desk_backbone(spec: DeskBackboneSpec, seed, dtype=DEFAULT_DTYPE) -> DeskBackbone:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return DeskBackbone(spec, rng, dtype=dtype)


def extract(backbone: FeatureExtractor, images, training: bool = False) -> Tensor:
    return backbone.forward(images, training=training)
