"""Single-head scaled dot-product self-attention over a flattened feature
map, with an optional relative-offset term on the key side."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .position_encoding import RelativeTable
from .tensor import ShapeError, Tensor, add, matmul, mul, reshape, softmax_rows, take_along_last, transpose


@dataclass
class AttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    rel: RelativeTable | None = None

    def __post_init__(self):
        shapes = {self.W_Q.shape, self.W_K.shape, self.W_V.shape}
        if len(shapes) != 1 or self.W_Q.ndim != 2:
            raise ShapeError(f"W_Q, W_K, W_V must share one (d_in, d_head) shape, got {sorted(shapes)}")
        if self.rel is not None and self.rel.d_head != self.d_head:
            raise ShapeError(f"relative table width {self.rel.d_head} != d_head {self.d_head}")

    @property
    def d_in(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_head(self) -> int:
        return self.W_Q.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}
        if self.rel is not None:
            out["rel_row"] = self.rel.row_emb
            out["rel_col"] = self.rel.col_emb
        return out


def init_attention(d_in: int, d_head: int, rng: np.random.Generator, rel: RelativeTable | None = None) -> AttentionParams:
    std = 1.0 / math.sqrt(d_in)
    w = [Tensor(rng.normal(0.0, std, size=(d_in, d_head)), requires_grad=True) for _ in range(3)]
    return AttentionParams(*w, rel=rel)


def flatten_map(x: Tensor) -> Tensor:
    """Row-major ``(..., h, w, d) -> (..., h*w, d)``; index p is (p // w, p % w)."""
    if x.ndim < 3:
        raise ShapeError(f"flatten_map needs (..., h, w, d), got {x.shape}")
    *lead, h, w, d = x.shape
    return reshape(x, (*lead, h * w, d))


def unflatten_map(z: Tensor, h: int, w: int) -> Tensor:
    *lead, n, d = z.shape
    if n != h * w:
        raise ShapeError(f"cannot unflatten {n} positions into {h}x{w}")
    return reshape(z, (*lead, h, w, d))


def grid_coords(h: int, w: int) -> np.ndarray:
    """``(h*w, 2)`` integer (row, col) pairs in flattening order."""
    r, c = np.divmod(np.arange(h * w), w)
    return np.stack([r, c], axis=1)


def relative_offsets(coords, wrap: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise key-minus-query offsets ``(n, n)`` for rows and columns.

    With ``wrap=(h, w)`` offsets are taken on the torus and mapped into
    ``[-extent // 2, extent - extent // 2)``, which makes them invariant
    under circular shifts of the map.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (n, 2), got {coords.shape}")
    d_row = coords[None, :, 0] - coords[:, None, 0]
    d_col = coords[None, :, 1] - coords[:, None, 1]
    if wrap is not None:
        h, w = wrap
        d_row = (d_row + h // 2) % h - h // 2
        d_col = (d_col + w // 2) % w - w // 2
    return d_row, d_col


def attention_scores(x: Tensor, params: AttentionParams, coords=None, wrap: tuple[int, int] | None = None) -> Tensor:
    """Scores ``e_ij = (q_i . k_j + q_i . r_ij) / sqrt(d_head)`` for ``x`` of shape ``(..., n, d_in)``.

    ``r_ij`` is the relative embedding of the offset from position i to
    position j; the term is dropped when ``params.rel`` is None.
    """
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"input width {x.shape[-1]} != attention d_in {params.d_in}")
    n = x.shape[-2]
    q = matmul(x, params.W_Q)
    k = matmul(x, params.W_K)
    e = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    if params.rel is not None:
        if coords is None:
            raise ValueError("relative attention needs the coordinates of every position")
        coords = np.asarray(coords)
        if len(coords) != n:
            raise ShapeError(f"got {len(coords)} coordinates for {n} positions")
        d_row, d_col = relative_offsets(coords, wrap)
        table = params.rel
        # q_i . (row[a] + col[b]) = (q @ row.T)[i, a] + (q @ col.T)[i, b]
        qr = matmul(q, transpose(table.row_emb))
        qc = matmul(q, transpose(table.col_emb))
        e = add(e, add(take_along_last(qr, table.index(d_row)), take_along_last(qc, table.index(d_col))))
    return mul(e, 1.0 / math.sqrt(params.d_head))


def attention_forward(
    x: Tensor,
    params: AttentionParams,
    coords=None,
    wrap: tuple[int, int] | None = None,
    return_weights: bool = False,
):
    """``z_i = sum_j alpha_ij (x_j W_V)`` with ``alpha = softmax_rows(scores)``."""
    alpha = softmax_rows(attention_scores(x, params, coords, wrap))
    z = matmul(alpha, matmul(x, params.W_V))
    return (z, alpha) if return_weights else z
