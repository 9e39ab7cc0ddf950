"""Reconstruction losses over masked patches and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Tensor, as_tensor, log_softmax_lastdim, mul, reshape, tsum

DEFAULT_K_MAX = 8


@dataclass(frozen=True)
class LossWeights:
    semantic: float = 1.0
    instance: float = 1.0
    rgb: float = 1.0

    def __post_init__(self):
        ws = (self.semantic, self.instance, self.rgb)
        if any(w < 0 for w in ws):
            raise ValueError(f"loss weights must be nonnegative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")


def canonicalize_instances(instance_map: np.ndarray, k_max: int = DEFAULT_K_MAX) -> np.ndarray:
    """Relabel instances 1..k_max by descending area (ties: smaller original id).

    Instances ranked beyond ``k_max`` all share label ``k_max``; background
    stays 0.
    """
    instance_map = np.asarray(instance_map)
    out = np.zeros(instance_map.shape, dtype=np.int64)
    ids, areas = np.unique(instance_map[instance_map > 0], return_counts=True)
    order = sorted(zip(ids.tolist(), areas.tolist()), key=lambda t: (-t[1], t[0]))
    for rank, (orig, _) in enumerate(order, start=1):
        out[instance_map == orig] = min(rank, k_max)
    return out


def _patch_weights(mask: np.ndarray, per_patch: int, all_patches: bool) -> np.ndarray:
    """Weight per patch so a weighted sum gives the mean over masked elements."""
    mask = np.asarray(mask, dtype=np.float64)
    sel = np.ones_like(mask) if all_patches else mask
    count = sel.sum(axis=-1, keepdims=True) * per_patch
    return np.divide(sel, count, out=np.zeros_like(sel), where=count > 0)


def _batch_mean(per_sample: Tensor) -> Tensor:
    if per_sample.ndim == 0:
        return per_sample
    n = per_sample.shape[0]
    return mul(tsum(per_sample), 1.0 / n)


def cross_entropy_loss(logits: Tensor, target: np.ndarray, mask: np.ndarray, n_classes: int,
                       all_patches: bool = False) -> Tensor:
    """Mean per-pixel cross-entropy over masked patches.

    ``logits`` is ``(..., N, P*P*n_classes)``, ``target`` ``(..., N, P*P)`` int,
    ``mask`` ``(..., N)`` with 1 = masked.  Leading batch axes are averaged.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ContractError(f"target ids must lie in [0, {n_classes}), got range "
                            f"[{target.min()}, {target.max()}]")
    pp = target.shape[-1]
    if logits.shape[-1] != pp * n_classes or logits.shape[:-1] != target.shape[:-1]:
        raise ContractError(f"logits {logits.shape} do not match target {target.shape} x {n_classes} classes")
    logp = log_softmax_lastdim(reshape(logits, logits.shape[:-1] + (pp, n_classes)))
    onehot = np.eye(n_classes, dtype=logits.dtype)[target]
    w = _patch_weights(mask, pp, all_patches).astype(logits.dtype)
    weight = onehot * w[..., None, None]
    nll = tsum(mul(logp, -weight), axis=tuple(range(-3, 0)))
    return _batch_mean(nll)


def semantic_loss(logits, target, mask, n_classes: int, all_patches: bool = False) -> Tensor:
    return cross_entropy_loss(logits, target, mask, n_classes, all_patches)


def instance_loss(logits, target, mask, k_max: int = DEFAULT_K_MAX, all_patches: bool = False) -> Tensor:
    return cross_entropy_loss(logits, target, mask, k_max + 1, all_patches)


def rgb_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, all_patches: bool = False) -> Tensor:
    """Mean squared error over the elements of masked patches (pixels in [0, 1])."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    w = _patch_weights(mask, pred.shape[-1], all_patches).astype(pred.dtype)
    se = tsum(mul(mul(diff, diff), w[..., None]), axis=(-2, -1))
    return _batch_mean(se)


def total_loss(l_sem, l_inst, l_rgb, weights: LossWeights = LossWeights()):
    """``λ_S·L_S + λ_I·L_I + λ_R·L_R``; works on floats and Tensors alike."""
    return weights.semantic * l_sem + weights.instance * l_inst + weights.rgb * l_rgb
