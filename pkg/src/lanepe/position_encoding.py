"""Positional information carriers: fixed sinusoidal fields, learned
absolute fields, and factorised relative-offset tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import ShapeError, Tensor, add

Kind = Literal["sinusoidal", "learned_absolute", "relative"]
KINDS = ("sinusoidal", "learned_absolute", "relative")


@dataclass(frozen=True)
class EncodingSpec:
    kind: Kind
    d_model: int
    height: int
    width: int
    max_rel_dist: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoding kind {self.kind!r}; expected one of {KINDS}")
        if self.d_model <= 0 or self.d_model % 2:
            raise ValueError(f"d_model must be a positive even integer, got {self.d_model}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"extent must be positive, got {self.height}x{self.width}")
        if self.kind == "sinusoidal" and self.d_model % 4:
            raise ValueError(f"2D sinusoidal encoding needs d_model divisible by 4, got {self.d_model}")
        if self.kind == "relative" and self.max_rel_dist is not None and self.max_rel_dist < 1:
            raise ValueError(f"max_rel_dist must be >= 1, got {self.max_rel_dist}")

    @property
    def rel_radius(self) -> int:
        """Clipping radius; defaults to the largest offset the map can hold."""
        if self.max_rel_dist is not None:
            return self.max_rel_dist
        return max(max(self.height, self.width) - 1, 1)


@dataclass
class PositionalField:
    values: Tensor  # (height, width, d_model)
    trainable: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class RelativeTable:
    row_emb: Tensor  # (2 * max_rel_dist + 1, d_head)
    col_emb: Tensor

    @property
    def max_rel_dist(self) -> int:
        return (self.row_emb.shape[0] - 1) // 2

    @property
    def d_head(self) -> int:
        return self.row_emb.shape[1]

    def index(self, offset):
        """Table row for a (possibly array of) signed offset, clipped to the radius."""
        m = self.max_rel_dist
        return np.clip(offset, -m, m) + m


def sinusoidal_1d(length: int, d: int) -> np.ndarray:
    """``(length, d)`` table: even channels sin, odd channels cos of pos / 10000^(2i/d)."""
    if d <= 0 or d % 2:
        raise ValueError(f"sinusoidal encoding needs a positive even width, got {d}")
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    denom = np.power(10000.0, 2.0 * np.arange(d // 2) / d)
    angle = pos / denom
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def sinusoidal_2d(spec: EncodingSpec) -> PositionalField:
    """Row coordinate in the first half of the channels, column coordinate in the second."""
    if spec.d_model % 4:
        raise ValueError(f"2D sinusoidal encoding needs d_model divisible by 4, got {spec.d_model}")
    half = spec.d_model // 2
    rows = sinusoidal_1d(spec.height, half)
    cols = sinusoidal_1d(spec.width, half)
    values = np.concatenate(
        [
            np.broadcast_to(rows[:, None, :], (spec.height, spec.width, half)),
            np.broadcast_to(cols[None, :, :], (spec.height, spec.width, half)),
        ],
        axis=-1,
    )
    return PositionalField(Tensor(values), trainable=False)


def init_learned(spec: EncodingSpec, seed: int | np.random.Generator) -> PositionalField:
    if spec.kind != "learned_absolute":
        raise ValueError(f"init_learned needs kind 'learned_absolute', got {spec.kind!r}")
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 0.02, size=(spec.height, spec.width, spec.d_model))
    return PositionalField(Tensor(values, requires_grad=True), trainable=True)


def apply_absolute(x: Tensor, pe: PositionalField) -> Tensor:
    """``x + p`` per position; ``x`` may carry leading batch axes."""
    if x.shape[-3:] != pe.shape:
        raise ShapeError(f"feature map {x.shape} does not match positional field {pe.shape}")
    return add(x, pe.values)


def init_relative(spec: EncodingSpec, seed: int | np.random.Generator, zero: bool = False) -> RelativeTable:
    if spec.kind != "relative":
        raise ValueError(f"init_relative needs kind 'relative', got {spec.kind!r}")
    rows = 2 * spec.rel_radius + 1
    if zero:
        row, col = np.zeros((rows, spec.d_model)), np.zeros((rows, spec.d_model))
    else:
        rng = np.random.default_rng(seed)
        row = rng.normal(0.0, 0.02, size=(rows, spec.d_model))
        col = rng.normal(0.0, 0.02, size=(rows, spec.d_model))
    return RelativeTable(Tensor(row, requires_grad=True), Tensor(col, requires_grad=True))


def relative_lookup(table: RelativeTable, d_row: int, d_col: int) -> Tensor:
    """Embedding of a 2D offset as the sum of its row and column components."""
    r = table.row_emb[int(table.index(d_row))]
    c = table.col_emb[int(table.index(d_col))]
    return add(r, c)
