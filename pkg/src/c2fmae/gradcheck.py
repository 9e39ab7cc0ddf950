"""Finite-difference check of the full model on a tiny 64-bit configuration."""

from __future__ import annotations

import numpy as np

from .masking import MaskConfig, build_mask_plan
from .model import C2FMAE, ModelConfig, prepare_batch
from .objective import LossWeights
from .numerics import finite_diff_check
from .synthdata import SceneConfig, generate_sample
from .tokenizer import TASKS, TokenLayout
from .trainer import compute_losses

TINY_SCENE = SceneConfig(image_size=8, shape_count_range=(1, 2), min_visible_pixels=4)
TINY_MODEL = ModelConfig(d_enc=8, enc_depth=1, enc_heads=2, d_dec=8, dec_heads=2, patch_size=4, k_max=2)


def tiny_setup(seed: int, decoder_mode: str = "cascaded", batch: int = 2):
    """Model, batch and plans for the tiny check.  Every granularity has at
    least one masked patch so all three losses contribute."""
    layout = TokenLayout(TINY_SCENE.image_size, TINY_MODEL.patch_size)
    cfg = ModelConfig(**{**TINY_MODEL.__dict__, "decoder_mode": decoder_mode})
    model = C2FMAE(cfg, layout, TINY_SCENE.class_count, seed=seed, dtype=np.float64)
    scene = SceneConfig(**{**TINY_SCENE.__dict__, "seed": seed})
    mask_cfg = MaskConfig(visible_tokens=layout.n)
    samples, plans = [], []
    for i in range(batch):
        sample = generate_sample(scene, i)
        index = i
        while True:
            plan = build_mask_plan(sample, mask_cfg, layout, 0.5, seed, index)
            if all(plan.masked_counts[t] > 0 for t in TASKS):
                break
            index += batch
        samples.append(sample)
        plans.append(plan)
    return model, prepare_batch(samples, plans, layout, model.n_classes, model.k_max), plans


def model_gradient_error(seed: int, decoder_mode: str = "cascaded", max_coords: int | None = None,
                         h: float = 1e-4, report: dict | None = None) -> float:
    """Max relative error of backprop vs central differences over all parameters."""
    model, batch, _ = tiny_setup(seed, decoder_mode)
    weights = LossWeights()

    def loss(_params):
        return compute_losses(model, batch, weights)["total"]

    return finite_diff_check(loss, model.params, h=h, max_coords=max_coords, seed=seed, report=report)
