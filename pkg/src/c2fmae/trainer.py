"""Deterministic pre-training loop: AdamW, warmup + cosine LR, curriculum hookup,
checkpoints and a line-delimited JSON metrics log.

All randomness is drawn from named streams keyed by (seed, purpose, epoch or
sample index), never from hidden generator state, so a run resumed from a
checkpoint replays exactly the same batches and masks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .masking import MASKING_MODES, MaskConfig, build_mask_plan, mode_alphas, rng_stream
from .model import Batch, C2FMAE, ModelConfig, prepare_batch
from .numerics import Tensor, backward, no_grad
from .objective import LossWeights, instance_loss, rgb_loss, semantic_loss, total_loss
from .tokenizer import TokenLayout

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A non-finite value showed up in a loss or gradient."""


class CheckpointError(ValueError):
    """Checkpoint files disagree with their manifest."""


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5          # 40 at full ImageNet scale
    batch_size: int = 32            # 2048 at full ImageNet scale
    base_lr: float = 1e-4           # peak lr = base_lr * batch_size / 256
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    masking_mode: str = "progressive"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    all_patch_loss: bool = False
    dtype: str = "float32"          # "float64" for test mode
    checkpoint_every: int = 0       # steps between checkpoints; 0 = only at the end

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        elif isinstance(self.loss_weights, (list, tuple)):
            self.loss_weights = LossWeights(*self.loss_weights)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.masking_mode not in MASKING_MODES:
            raise ValueError(f"masking_mode must be one of {MASKING_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at the final step."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    peak = cfg.peak_lr
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min((step - warm) / (total - warm), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not gains, biases, mask token)."""
    return not (name.endswith(".bias") or name.endswith(".gain") or name == "mask_token")


def optimizer_step(params: dict[str, Tensor], state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update in place, using each parameter's ``.grad``."""
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {k!r}; step aborted")
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decays(k) and cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def compute_losses(model: C2FMAE, batch: Batch, weights: LossWeights, all_patches: bool = False) -> dict[str, Tensor]:
    preds = model.forward(batch)
    ls = semantic_loss(preds["S"], batch.targets["S"], batch.masks["S"], model.n_classes, all_patches)
    li = instance_loss(preds["I"], batch.targets["I"], batch.masks["I"], model.k_max, all_patches)
    lr_ = rgb_loss(preds["R"], batch.targets["R"], batch.masks["R"], all_patches)
    return {"L_S": ls, "L_I": li, "L_R": lr_, "total": total_loss(ls, li, lr_, weights)}


def make_batch(model: C2FMAE, samples, indices, mask_cfg: MaskConfig, u: float, step: int,
               cfg: TrainConfig) -> Batch:
    draw = step if mask_cfg.redraw_per_step else None
    plans = [build_mask_plan(samples[i], mask_cfg, model.layout, u, cfg.seed, i, cfg.masking_mode, draw)
             for i in indices]
    return prepare_batch([samples[i] for i in indices], plans, model.layout, model.n_classes, model.k_max)


def train_step(model: C2FMAE, batch: Batch, state: OptimState, lr: float, cfg: TrainConfig) -> dict[str, float]:
    """Forward, backward and one optimizer update; returns the loss components."""
    model.zero_grad()
    losses = compute_losses(model, batch, cfg.loss_weights, cfg.all_patch_loss)
    values = {k: v.item() for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss {values}")
    backward(losses["total"])
    optimizer_step(model.params, state, lr, cfg)
    return values


def evaluate(model: C2FMAE, samples, mask_cfg: MaskConfig, cfg: TrainConfig, u: float = 1.0,
             step: int = 0) -> dict[str, float]:
    """Losses plus masked-patch RGB MSE and semantic pixel accuracy under the plans at (``u``, ``step``)."""
    batch = make_batch(model, samples, range(len(samples)), mask_cfg, u, step, cfg)
    with no_grad():
        preds = model.forward(batch)
        losses = compute_losses(model, batch, cfg.loss_weights, cfg.all_patch_loss)
    pp = model.layout.patch_size ** 2
    m_s = batch.masks["S"].astype(bool)
    sem_pred = preds["S"].data.reshape(*preds["S"].shape[:2], pp, model.n_classes).argmax(-1)
    acc = float((sem_pred == batch.targets["S"])[m_s].mean()) if m_s.any() else 1.0
    m_r = batch.masks["R"].astype(bool)
    diff = (preds["R"].data - batch.targets["R"])[m_r]
    mse = float(np.mean(diff ** 2)) if diff.size else 0.0
    out = {k: v.item() for k, v in losses.items()}
    out.update({"rgb_mse_masked": mse, "semantic_acc_masked": acc})
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory, model: C2FMAE, state: OptimState, config: dict) -> None:
    """manifest.json + params.bin + optim.bin (little-endian, manifest order)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    le = model.dtype.newbyteorder("<")
    entries, pblob, oblob = [], bytearray(), bytearray()
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype=le).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": len(pblob), "nbytes": len(raw)})
        pblob += raw
    for name in model.params:
        oblob += np.ascontiguousarray(state.m[name], dtype=le).tobytes()
    for name in model.params:
        oblob += np.ascontiguousarray(state.v[name], dtype=le).tobytes()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": model.dtype.name,
        "optimizer_step": state.step,
        "params": entries,
        "files": {"params.bin": {"nbytes": len(pblob), "sha256": _sha256(bytes(pblob))},
                  "optim.bin": {"nbytes": len(oblob), "sha256": _sha256(bytes(oblob))}},
        "config": config,
    }
    (d / "params.bin").write_bytes(bytes(pblob))
    (d / "optim.bin").write_bytes(bytes(oblob))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory, build_model: Callable[[dict, np.dtype], C2FMAE]) -> tuple[C2FMAE, OptimState, dict]:
    """Restore a model and optimizer state; ``build_model(config, dtype)`` creates the skeleton."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{d / 'manifest.json'}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{d}: unsupported format_version {manifest.get('format_version')}")
    problems = []
    blobs = {}
    for fname, expect in manifest["files"].items():
        try:
            data = (d / fname).read_bytes()
        except OSError:
            problems.append(f"{fname}: manifest expects {expect['nbytes']} bytes, file missing")
            continue
        got = {"nbytes": len(data), "sha256": _sha256(data)}
        for key in ("nbytes", "sha256"):
            if got[key] != expect[key]:
                problems.append(f"{fname}: {key} manifest={expect[key]} actual={got[key]}")
        blobs[fname] = data
    dtype = np.dtype(manifest["dtype"])
    model = build_model(manifest["config"], dtype)
    names = [e["name"] for e in manifest["params"]]
    if names != list(model.params):
        missing = sorted(set(model.params) - set(names))
        extra = sorted(set(names) - set(model.params))
        problems.append(f"parameter set differs from config: missing={missing} unexpected={extra}")
    for e in manifest["params"]:
        if e["name"] in model.params and list(model.params[e["name"]].shape) != e["shape"]:
            problems.append(f"{e['name']}: manifest shape {e['shape']} vs model {list(model.params[e['name']].shape)}")
    if problems:
        raise CheckpointError(f"corrupt checkpoint {d}:\n  " + "\n  ".join(problems))
    le = dtype.newbyteorder("<")
    pblob, oblob = blobs["params.bin"], blobs["optim.bin"]
    state = OptimState({}, {}, int(manifest["optimizer_step"]))
    half = len(oblob) // 2
    for e in manifest["params"]:
        arr = np.frombuffer(pblob, dtype=le, count=int(np.prod(e["shape"])), offset=e["offset"])
        model.params[e["name"]].data = arr.reshape(e["shape"]).astype(dtype)
        state.m[e["name"]] = np.frombuffer(oblob, dtype=le, count=arr.size, offset=e["offset"]).reshape(
            e["shape"]).astype(dtype)
        state.v[e["name"]] = np.frombuffer(oblob, dtype=le, count=arr.size, offset=half + e["offset"]).reshape(
            e["shape"]).astype(dtype)
    return model, state, manifest


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def steps_per_epoch(n_samples: int, cfg: TrainConfig) -> int:
    return math.ceil(n_samples / cfg.batch_size)


def _metrics_before(path: Path, step: int) -> list[str]:
    """Log lines for steps already covered by a checkpoint at ``step``."""
    if not path.is_file():
        return []
    return [line for line in path.read_text().splitlines(keepends=True)
            if line.strip() and json.loads(line)["step"] < step]


def train_loop(model: C2FMAE, samples, mask_cfg: MaskConfig, cfg: TrainConfig, out_dir=None,
               state: OptimState | None = None, stop_at: int | None = None, config_echo: dict | None = None,
               on_step: Callable[[dict], None] | None = None) -> tuple[OptimState, list[dict]]:
    """Train from ``state.step`` (0 for a fresh run) up to the end or ``stop_at``.

    Per step: u = step / total_steps, lr from the warmup-cosine schedule,
    batch order from a per-epoch seeded shuffle.  With ``out_dir`` set, the
    metrics log is written and a checkpoint saved every
    ``cfg.checkpoint_every`` steps and at the end.  Resuming drops log lines
    past the checkpoint so the log never repeats a step.
    """
    spe = steps_per_epoch(len(samples), cfg)
    total = cfg.epochs * spe
    state = state or OptimState.zeros_like(model.params)
    end = total if stop_at is None else min(stop_at, total)
    metrics_file = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = Path(out_dir) / "metrics.jsonl"
        kept = _metrics_before(path, state.step) if state.step else []
        metrics_file = open(path, "w")
        metrics_file.writelines(kept)
    history = []
    try:
        for step in range(state.step, end):
            epoch, k = divmod(step, spe)
            order = rng_stream(cfg.seed, "shuffle", epoch).permutation(len(samples))
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            u = step / total
            lr = lr_at(step, cfg, spe)
            batch = make_batch(model, samples, idx, mask_cfg, u, step, cfg)
            losses = train_step(model, batch, state, lr, cfg)
            alphas = mode_alphas(cfg.masking_mode, u, mask_cfg.schedule)
            rec = {"step": step, "epoch": epoch, "lr": lr, "alpha_I": alphas[0], "alpha_S": alphas[1], **losses}
            history.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                metrics_file.flush()
                save_checkpoint(out_dir, model, state, config_echo or {})
            if step % max(1, total // 20) == 0:
                log.info("step %d/%d lr=%.3g total=%.4f", step, total, lr, losses["total"])
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir, model, state, config_echo or {})
    return state, history
