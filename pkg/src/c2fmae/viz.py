"""Image renderings of samples, masks and predictions as PPM/PGM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .synthdata import write_pnm
from .tokenizer import TASKS, TokenLayout

# fixed palette: index -> RGB byte triple
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
], dtype=np.uint8)

SEMANTIC_PALETTE = np.array([[89, 140, 51], [115, 179, 242], [230, 51, 38], [242, 217, 51], [140, 64, 191]],
                            dtype=np.uint8)


def unpatchify(patches: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """(N, p*p, ...) -> (H, W, ...), inverse of the row-major patch split."""
    g, p = layout.grid, layout.patch_size
    rest = patches.shape[2:]
    x = patches.reshape(g, g, p, p, *rest)
    x = np.moveaxis(x, 2, 1)
    return x.reshape(g * p, g * p, *rest)


def colorize(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    return palette[np.asarray(labels) % len(palette)]


def rgb_to_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def pixel_mask(mask: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Per-patch 0/1 mask expanded to an (H, W) boolean image."""
    p = layout.patch_size
    per = np.repeat(np.asarray(mask, dtype=bool)[:, None], p * p, axis=1)
    return unpatchify(per, layout)


def overlay(img: np.ndarray, mask_px: np.ndarray, shade: float = 0.25) -> np.ndarray:
    """Darken masked pixels of a uint8 (H, W, 3) image."""
    out = img.astype(np.float64)
    out[mask_px] *= shade
    return np.round(out).astype(np.uint8)


def sample_views(sample, semantic_palette=SEMANTIC_PALETTE) -> dict[str, np.ndarray]:
    """uint8 RGB renderings of the three granularities of a sample."""
    return {"R": rgb_to_bytes(sample.rgb), "S": colorize(sample.semantic, semantic_palette),
            "I": colorize(sample.instance)}


def decode_predictions(pred: dict[str, np.ndarray], layout: TokenLayout, n_classes: int, k_max: int
                       ) -> dict[str, np.ndarray]:
    """Raw head outputs -> per-pixel maps: semantic / instance argmax ids and clamped RGB."""
    pp = layout.patch_size ** 2
    n = layout.n
    sem = pred["S"].reshape(n, pp, n_classes).argmax(-1)
    inst = pred["I"].reshape(n, pp, k_max + 1).argmax(-1)
    rgb = np.clip(pred["R"].reshape(n, pp, 3), 0.0, 1.0)
    return {"S": unpatchify(sem, layout), "I": unpatchify(inst, layout), "R": unpatchify(rgb, layout)}


def write_ppm(path, img: np.ndarray) -> None:
    write_pnm(Path(path), b"P6", np.asarray(img, dtype=np.uint8), 255)


def write_pgm(path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    maxval = 255 if ids.max(initial=0) < 256 else 65535
    write_pnm(Path(path), b"P5", ids.astype(np.uint8 if maxval == 255 else np.uint16), maxval)


NAMES = {"S": "semantic", "I": "instance", "R": "rgb"}
assert set(NAMES) == set(TASKS)
