"""Recurrent feature-shift aggregation.

Each iteration k shifts the map cyclically by 2**k rows or columns in four
directions in turn, and adds a rectified 1-D convolution of the shifted map
back onto the running map. Later directions see earlier updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor, add, conv2d, relu, roll

DIRECTIONS = ("up", "down", "left", "right")
_ROW_AXIS, _COL_AXIS = -3, -2


@dataclass(frozen=True)
class ResaConfig:
    iterations: int = 4
    conv_kernel_width: int = 9
    share_weights_per_direction: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.conv_kernel_width < 1 or self.conv_kernel_width % 2 == 0:
            raise ValueError(f"conv_kernel_width must be odd and positive, got {self.conv_kernel_width}")

    def validate(self, h: int, w: int) -> None:
        # a stride equal to the extent wraps to the identity shift, so it is allowed
        if 2 ** (self.iterations - 1) > max(h, w):
            raise ValueError(
                f"{self.iterations} iterations need 2^{self.iterations - 1} <= max(h, w) = {max(h, w)}"
            )

    def kernel_along(self, extent: int) -> int:
        """Kernel width clipped to the largest odd number not above ``extent``."""
        return min(self.conv_kernel_width, extent if extent % 2 else extent - 1)

    def weight_key(self, k: int, direction: str) -> str:
        return direction if self.share_weights_per_direction else f"k{k}.{direction}"


def _axis(direction: str) -> int:
    if direction in ("up", "down"):
        return _ROW_AXIS
    if direction in ("left", "right"):
        return _COL_AXIS
    raise ValueError(f"unknown direction {direction!r}")


def shift_slices(x: Tensor, direction: str, stride: int, allow_full_cycle: bool = False) -> Tensor:
    """Cyclic slice shift of a ``(..., h, w, d)`` map.

    ``down``: row i takes old row (i + stride) mod h; ``up``: row i takes
    row (i - stride). ``right`` and ``left`` do the same on columns.
    """
    axis = _axis(direction)
    extent = x.shape[axis]
    limit = extent if allow_full_cycle else extent - 1
    if not 1 <= stride <= limit:
        raise ValueError(f"stride {stride} out of range [1, {limit}] for axis extent {extent}")
    shift = -stride if direction in ("down", "right") else stride
    return roll(x, shift, axis)


def init_resa_weights(cfg: ResaConfig, channels: int, h: int, w: int, rng: np.random.Generator, gain: float = 1.0) -> dict[str, Tensor]:
    """Kernels ``(1, kw, C, C)`` for row passes and ``(kh, 1, C, C)`` for column passes."""
    out: dict[str, Tensor] = {}
    for k in range(cfg.iterations):
        for d in DIRECTIONS:
            key = cfg.weight_key(k, d)
            if key in out:
                continue
            if _axis(d) == _ROW_AXIS:
                shape = (1, cfg.kernel_along(w), channels, channels)
            else:
                shape = (cfg.kernel_along(h), 1, channels, channels)
            fan_in = shape[0] * shape[1] * channels
            out[key] = Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=shape), requires_grad=True)
    return out


def _conv_along_slice(x: Tensor, weight: Tensor) -> Tensor:
    kh, kw = weight.shape[:2]
    return conv2d(x, weight, stride=1, padding=(kh // 2, kw // 2))


def resa_forward(x: Tensor, cfg: ResaConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Aggregate ``x`` of shape ``(h, w, d)`` or ``(B, h, w, d)``; shape is preserved."""
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ShapeError(f"resa_forward expects (B, h, w, d), got {x.shape}")
    h, w = x.shape[1], x.shape[2]
    cfg.validate(h, w)
    for k in range(cfg.iterations):
        for d in DIRECTIONS:
            extent = x.shape[_axis(d)]
            # strides that are a multiple of the extent wrap to the identity shift
            stride = 2 ** k % extent
            shifted = shift_slices(x, d, stride) if stride else x
            x = add(x, relu(_conv_along_slice(shifted, weights[cfg.weight_key(k, d)])))
    return x.reshape(*x.shape[1:]) if single else x
