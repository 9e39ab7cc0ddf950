"""Patch geometry of the 3N-token sequence.

Tokens are laid out in three fixed spans -- semantic ``[0, N)``, instance
``[N, 2N)``, RGB ``[2N, 3N)`` -- and within a span in row-major patch order.
Mask convention everywhere: 1 = masked, 0 = visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (ContractError, DimensionError, Tensor, add, as_tensor, gather_rows, linear, reshape,
                       scatter_into_mask)
from .objective import DEFAULT_K_MAX, canonicalize_instances

TASKS = ("S", "I", "R")


@dataclass(frozen=True)
class TokenLayout:
    image_size: int = 64
    patch_size: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n(self) -> int:
        return self.grid ** 2

    @property
    def spans(self) -> dict[str, tuple[int, int]]:
        n = self.n
        return {t: (k * n, (k + 1) * n) for k, t in enumerate(TASKS)}

    def span(self, task: str) -> tuple[int, int]:
        return self.spans[task]

    def patch_origin(self, p: int) -> tuple[int, int]:
        """Top-left pixel (row, col) of row-major patch ``p``."""
        return (p // self.grid) * self.patch_size, (p % self.grid) * self.patch_size


@dataclass
class TokenBatch:
    tokens: Tensor
    source_positions: np.ndarray


def _blocks(arr: np.ndarray, p: int) -> np.ndarray:
    """(H, W, ...) -> (N, p*p, ...) in row-major patch order."""
    h, w = arr.shape[:2]
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    rest = arr.shape[2:]
    g = arr.reshape(h // p, p, w // p, p, *rest)
    g = np.moveaxis(g, 2, 1)
    return g.reshape((h // p) * (w // p), p * p, *rest)


def patch_targets(sample, p: int, k_max: int = DEFAULT_K_MAX) -> dict[str, np.ndarray]:
    """Per-patch reconstruction targets: class ids (N, p*p) and RGB (N, p*p*3)."""
    return {
        "S": _blocks(sample.semantic, p),
        "I": _blocks(canonicalize_instances(sample.instance, k_max), p),
        "R": _blocks(sample.rgb, p).reshape(-1, p * p * 3),
    }


def patchify(sample, p: int, n_classes: int, k_max: int = DEFAULT_K_MAX) -> dict[str, np.ndarray]:
    """Flattened patch features per granularity.

    RGB patches give ``p*p*3`` reals; semantic and (canonicalized) instance
    maps are one-hot per pixel, giving ``p*p*n_classes`` and
    ``p*p*(k_max+1)`` features.
    """
    t = patch_targets(sample, p, k_max)
    n = t["S"].shape[0]
    return {
        "S": np.eye(n_classes)[t["S"]].reshape(n, -1),
        "I": np.eye(k_max + 1)[t["I"]].reshape(n, -1),
        "R": t["R"],
    }


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape (grid*grid, dim), MAE style."""
    if dim % 4:
        raise DimensionError(f"sin-cos embedding width must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def encode(pos):
        out = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    # first half encodes the row, second half the column
    return np.concatenate([encode(ys), encode(xs)], axis=1)


def full_position_table(dim: int, layout: TokenLayout) -> np.ndarray:
    """Positional rows for all 3N tokens; granularities share spatial rows."""
    return np.tile(sincos_2d(dim, layout.grid), (len(TASKS), 1))


def embed(patches, weight: Tensor, bias: Tensor, pos: np.ndarray) -> Tensor:
    """Linear projection of patch features plus the positional table."""
    patches = as_tensor(patches, dtype=weight.dtype)
    if patches.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch width {patches.shape[-1]} does not match projection input {weight.shape[0]}")
    return add(linear(patches, weight, bias), np.asarray(pos, dtype=weight.dtype))


def visible_positions(masks: dict[str, np.ndarray], layout: TokenLayout) -> np.ndarray:
    """Absolute indices of visible tokens, in span order S, I, R."""
    out = []
    for t in TASKS:
        m = np.asarray(masks[t])
        if m.shape != (layout.n,):
            raise DimensionError(f"mask for {t} has shape {m.shape}, expected ({layout.n},)")
        out.append(np.flatnonzero(m == 0) + layout.span(t)[0])
    return np.concatenate(out).astype(np.intp)


def gather_visible(embedded: Tensor, plan, layout: TokenLayout) -> TokenBatch:
    """Keep visible rows of a (3N, D) or (B, 3N, D) embedding, in source order."""
    embedded = as_tensor(embedded)
    positions = visible_positions(plan.masks, layout)
    if embedded.ndim == 2:
        rows = gather_rows(reshape(embedded, (1,) + embedded.shape), positions[None, :])
        return TokenBatch(reshape(rows, rows.shape[1:]), positions)
    if embedded.shape[-2] != 3 * layout.n:
        raise DimensionError(f"embedding has {embedded.shape[-2]} rows, expected {3 * layout.n}")
    return TokenBatch(gather_rows(embedded, np.broadcast_to(positions, (embedded.shape[0], len(positions)))),
                      positions)


def scatter_full(encoded: TokenBatch, mask_token: Tensor, layout: TokenLayout,
                 pos: np.ndarray | None = None) -> Tensor:
    """Place encoded rows at their source positions; fill the rest with the mask token.

    With a positional table ``pos`` (3N, D), filled rows get ``mask_token +
    pos[row]``.  Accepts unbatched (L, D) or batched (B, L, D) tokens with
    positions (L,) or (B, L).
    """
    tokens = as_tensor(encoded.tokens)
    positions = np.asarray(encoded.source_positions, dtype=np.intp)
    batched = tokens.ndim == 3
    if not batched:
        tokens = reshape(tokens, (1,) + tokens.shape)
        positions = positions[None, :]
    total = 3 * layout.n
    if positions.size and (positions.min() < 0 or positions.max() >= total):
        raise ContractError(f"source positions must lie in [0, {total})")
    fill = as_tensor(mask_token) if pos is None else add(mask_token, np.asarray(pos, dtype=tokens.dtype))
    out = scatter_into_mask(fill, tokens, positions, total)
    if not batched:
        out = reshape(out, out.shape[1:])
    return out
