"""2D token geometry: patches, the padded grid, and scan orders.

A (C, H, W) image becomes a row-major grid of H_p x W_p patch tokens.
When padding tokens are enabled the grid is augmented to
(H_p+1) x (W_p+1): column W_p holds the shared row-end embedding, row H_p
the shared column-end embedding, and cell (H_p, W_p) a shared corner
embedding. Row-major order over the augmented grid then visits each
row-end token right after its row, and column-major order visits each
column-end token right after its column, so one token set serves every
scan direction and the sequence length is direction-invariant.

Four scan patterns are supported, as permutations of the flattened grid:

    1: row-major forward        2: row-major reversed
    3: column-major forward     4: column-major reversed

Conditioning (time, class) tokens are appended after the spatial tokens
and are not part of these spatial permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, add, concat, gather, reshape, scatter, split, transpose, zeros

ALL_PATTERNS = (1, 2, 3, 4)
NUM_CONDITIONING_TOKENS = 2  # time token, then class token, at the sequence tail


@dataclass(frozen=True)
class GridSpec:
    """Patch-grid geometry of one resolution."""

    h_p: int
    w_p: int
    patch: int
    channels: int

    @classmethod
    def for_image(cls, height: int, width: int, patch: int, channels: int) -> "GridSpec":
        if height % patch or width % patch:
            raise ShapeError(f"image {height}x{width} not divisible by patch size {patch}")
        return cls(height // patch, width // patch, patch, channels)

    @property
    def n_patches(self) -> int:
        return self.h_p * self.w_p

    def spatial_len(self, padded: bool) -> int:
        return (self.h_p + 1) * (self.w_p + 1) if padded else self.n_patches

    def sequence_len(self, padded: bool) -> int:
        return self.spatial_len(padded) + NUM_CONDITIONING_TOKENS


# ---------------------------------------------------------------------------
# Patchify / unpatchify
# ---------------------------------------------------------------------------


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, H_p*W_p, C*patch*patch), patches in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"patchify: expected (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    t = reshape(x, (b, c, hp, patch, wp, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))  # (B, H_p, W_p, C, p, p)
    return reshape(t, (b, hp * wp, c * patch * patch))


def unpatchify(tokens: Tensor, grid: GridSpec) -> Tensor:
    """Exact inverse of :func:`patchify` for the given grid."""
    b = tokens.shape[0]
    c, p = grid.channels, grid.patch
    if tokens.shape[1] != grid.n_patches or tokens.shape[2] != c * p * p:
        raise ShapeError(f"unpatchify: tokens {tokens.shape} do not match grid {grid}")
    t = reshape(tokens, (b, grid.h_p, grid.w_p, c, p, p))
    t = transpose(t, (0, 3, 1, 4, 2, 5))
    return reshape(t, (b, c, grid.h_p * p, grid.w_p * p))


# ---------------------------------------------------------------------------
# Scan permutations
# ---------------------------------------------------------------------------


def build_permutation(grid: GridSpec, pattern: int, padded: bool = True) -> np.ndarray:
    """Visit order of the flattened (augmented) grid for one scan pattern.

    Returned index array ``perm`` reorders canonical row-major storage:
    position i of the scan sequence is cell ``perm[i]``. Patterns 2 and 4
    are the exact elementwise reversals of 1 and 3.
    """
    if pattern not in ALL_PATTERNS:
        raise ValueError(f"unknown scan pattern {pattern}")
    rows = grid.h_p + 1 if padded else grid.h_p
    cols = grid.w_p + 1 if padded else grid.w_p
    cells = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
    if pattern in (1, 2):
        order = cells.reshape(-1)
    else:
        order = cells.T.reshape(-1)
    if pattern in (2, 4):
        order = order[::-1]
    return np.ascontiguousarray(order)


def cycle_pattern(block_index: int, enabled: tuple[int, ...]) -> int:
    """Pattern used by a block: loop over the enabled set in order."""
    if not enabled:
        raise ValueError("cycle_pattern: enabled set is empty")
    return enabled[block_index % len(enabled)]


# ---------------------------------------------------------------------------
# Padding-token augmentation
# ---------------------------------------------------------------------------


def add_padding_tokens(patch_tokens: Tensor, grid: GridSpec, row_eol: Tensor, col_eol: Tensor, corner: Tensor) -> Tensor:
    """Embed patch tokens into the augmented grid, canonical row-major order.

    ``patch_tokens`` is (B, H_p*W_p, D); the three embeddings are (D,)
    and shared across positions. Returns (B, (H_p+1)*(W_p+1), D).
    """
    b, n, dim = patch_tokens.shape
    if n != grid.n_patches:
        raise ShapeError(f"add_padding_tokens: got {n} tokens for grid {grid.h_p}x{grid.w_p}")
    body = reshape(patch_tokens, (b, grid.h_p, grid.w_p, dim))
    right = add(zeros((b, grid.h_p, 1, dim), dtype=patch_tokens.dtype), row_eol)
    body = concat([body, right], axis=2)
    bottom = add(zeros((b, 1, grid.w_p, dim), dtype=patch_tokens.dtype), col_eol)
    corner_cell = add(zeros((b, 1, 1, dim), dtype=patch_tokens.dtype), corner)
    bottom = concat([bottom, corner_cell], axis=2)
    full = concat([body, bottom], axis=1)
    return reshape(full, (b, grid.spatial_len(True), dim))


def strip_padding_tokens(spatial: Tensor, grid: GridSpec) -> Tensor:
    """Drop row-end/column-end/corner cells, recovering patch tokens in row-major order."""
    b, s, dim = spatial.shape
    if s != grid.spatial_len(True):
        raise ShapeError(f"strip_padding_tokens: length {s} does not match augmented grid")
    full = reshape(spatial, (b, grid.h_p + 1, grid.w_p + 1, dim))
    body, _ = split(full, [grid.h_p, 1], axis=1)
    patches, _ = split(body, [grid.w_p, 1], axis=2)
    return reshape(patches, (b, grid.n_patches, dim))


# ---------------------------------------------------------------------------
# Sequence assembly
# ---------------------------------------------------------------------------


def assemble_sequence(spatial: Tensor, pattern: int, grid: GridSpec, padded: bool, cond: Tensor) -> Tensor:
    """Order spatial tokens by ``pattern`` and append the conditioning tokens.

    ``spatial`` is (B, S, D) in canonical row-major order, ``cond`` is
    (B, 2, D) holding the time then class token; conditioning stays at the
    tail for every pattern.
    """
    perm = build_permutation(grid, pattern, padded)
    return concat([gather(spatial, perm, axis=1), cond], axis=1)


def disassemble_sequence(seq: Tensor, pattern: int, grid: GridSpec, padded: bool) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`assemble_sequence`: canonical spatial tokens plus conditioning."""
    s = grid.spatial_len(padded)
    spatial, cond = split(seq, [s, NUM_CONDITIONING_TOKENS], axis=1)
    perm = build_permutation(grid, pattern, padded)
    return scatter(spatial, perm, axis=1), cond
