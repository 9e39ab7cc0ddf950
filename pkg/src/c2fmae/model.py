"""Shared ViT encoder over visible tokens and the cascaded task decoder.

The decoder runs one stage per task (default order S -> I -> R).  Stage k
queries its own span of the full token sequence H and attends, through
cross-attention, to H with the previous stage's output added back into the
previous task's span.  In ``parallel`` mode that fusion is skipped and the
stages are independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .masking import MaskPlan, rng_stream
from .numerics import (ContractError, Tensor, add, add_rows, as_tensor, concat, gather_rows, gelu, layer_norm,
                       linear, matmul, mul, no_grad, reshape, scatter_into_mask, slice_rows, softmax_lastdim, swap_last,
                       transpose)
from .objective import DEFAULT_K_MAX
from .tokenizer import TASKS, TokenLayout, full_position_table, patch_targets, patchify, visible_positions

DECODER_MODES = ("cascaded", "parallel")


@dataclass
class ModelConfig:
    d_enc: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    d_dec: int = 32            # 256 at full ImageNet scale
    dec_heads: int = 4         # 8 at full ImageNet scale
    dec_subblocks_per_stage: int = 1
    task_order: tuple[str, ...] = ("S", "I", "R")
    decoder_mode: str = "cascaded"
    ffn_ratio: int = 4
    patch_size: int = 8
    k_max: int = DEFAULT_K_MAX

    def __post_init__(self):
        if isinstance(self.task_order, str):
            self.task_order = tuple(self.task_order)
        self.task_order = tuple(self.task_order)
        if sorted(self.task_order) != sorted(TASKS):
            raise ValueError(f"task_order must be a permutation of {TASKS}, got {self.task_order}")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        if self.d_enc % self.enc_heads or self.d_dec % self.dec_heads:
            raise ValueError("model widths must be divisible by their head counts")
        if self.enc_depth < 0 or self.dec_subblocks_per_stage < 1:
            raise ValueError("enc_depth must be >= 0 and dec_subblocks_per_stage >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_order"] = list(self.task_order)
        return d


def fuse_kv(h: Tensor, f_prev: Tensor | None, span: tuple[int, int] | None) -> Tensor:
    """Keys/values for a decoder stage: ``h`` with ``f_prev`` added into ``span``.

    Rows outside the span are bit-identical to ``h``.  A missing ``f_prev``
    (first stage) returns ``h`` itself.
    """
    if f_prev is None:
        return h
    i, j = span
    if not 0 <= i <= j <= h.shape[-2]:
        raise ContractError(f"span ({i}, {j}) out of bounds for {h.shape[-2]} rows")
    return add_rows(h, f_prev, i, j)


@dataclass
class Batch:
    """Model-ready arrays for B samples sharing one visible-token count."""

    patches: dict[str, np.ndarray]      # task -> (B, N, width)
    positions: np.ndarray               # (B, L) absolute visible positions
    masks: dict[str, np.ndarray]        # task -> (B, N), 1 = masked
    targets: dict[str, np.ndarray]      # S/I: (B, N, P*P) ids, R: (B, N, P*P*3)

    @property
    def size(self) -> int:
        return self.positions.shape[0]


def prepare_batch(samples, plans, layout: TokenLayout, n_classes: int, k_max: int = DEFAULT_K_MAX) -> Batch:
    if len(samples) != len(plans) or not samples:
        raise ContractError("need one plan per sample and at least one sample")
    feats = [patchify(s, layout.patch_size, n_classes, k_max) for s in samples]
    tgts = [patch_targets(s, layout.patch_size, k_max) for s in samples]
    pos = [visible_positions(p.masks, layout) for p in plans]
    if len({len(p) for p in pos}) != 1:
        raise ContractError("all plans in a batch must keep the same number of visible tokens")
    return Batch(
        patches={t: np.stack([f[t] for f in feats]) for t in TASKS},
        positions=np.stack(pos),
        masks={t: np.stack([np.asarray(p.masks[t]) for p in plans]) for t in TASKS},
        targets={t: np.stack([g[t] for g in tgts]) for t in TASKS},
    )


class C2FMAE:
    """Parameters plus forward pass.  ``params`` maps names to leaf Tensors."""

    def __init__(self, cfg: ModelConfig, layout: TokenLayout, n_classes: int = 5, seed: int = 0,
                 dtype=np.float32, params: dict[str, Tensor] | None = None):
        if layout.patch_size != cfg.patch_size:
            raise ContractError(f"layout patch size {layout.patch_size} differs from model patch size {cfg.patch_size}")
        self.cfg = cfg
        self.layout = layout
        self.n_classes = n_classes
        self.k_max = k_max = cfg.k_max
        self.dtype = np.dtype(dtype)
        pp = layout.patch_size ** 2
        self.in_widths = {"S": pp * n_classes, "I": pp * (k_max + 1), "R": pp * 3}
        self.enc_pos = full_position_table(cfg.d_enc, layout).astype(self.dtype)
        self.dec_pos = full_position_table(cfg.d_dec, layout).astype(self.dtype)
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        rng = rng_stream(seed, "init")
        cfg = self.cfg
        p: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out, bias=True):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            p[f"{name}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if bias:
                p[f"{name}.bias"] = np.zeros(fan_out)

        def norm(name, d):
            p[f"{name}.gain"] = np.ones(d)
            p[f"{name}.bias"] = np.zeros(d)

        def attn(name, d):
            lin(f"{name}.q", d, d, bias=False)
            lin(f"{name}.k", d, d, bias=False)
            lin(f"{name}.v", d, d, bias=False)
            lin(f"{name}.proj", d, d)

        def mlp(name, d):
            lin(f"{name}.fc1", d, d * cfg.ffn_ratio)
            lin(f"{name}.fc2", d * cfg.ffn_ratio, d)

        for t in TASKS:
            lin(f"embed.{t}", self.in_widths[t], cfg.d_enc)
        for b in range(cfg.enc_depth):
            norm(f"enc.{b}.norm1", cfg.d_enc)
            attn(f"enc.{b}.attn", cfg.d_enc)
            norm(f"enc.{b}.norm2", cfg.d_enc)
            mlp(f"enc.{b}.mlp", cfg.d_enc)
        if cfg.enc_depth:
            norm("enc.norm", cfg.d_enc)
        lin("dec.embed", cfg.d_enc, cfg.d_dec)
        p["mask_token"] = rng.normal(0.0, 0.02, size=cfg.d_dec)
        for t in TASKS:
            for s in range(cfg.dec_subblocks_per_stage):
                pre = f"dec.{t}.{s}"
                norm(f"{pre}.norm_self", cfg.d_dec)
                attn(f"{pre}.self_attn", cfg.d_dec)
                norm(f"{pre}.norm_q", cfg.d_dec)
                norm(f"{pre}.norm_kv", cfg.d_dec)
                attn(f"{pre}.cross_attn", cfg.d_dec)
                norm(f"{pre}.norm_ffn", cfg.d_dec)
                mlp(f"{pre}.mlp", cfg.d_dec)
            lin(f"pred.{t}", cfg.d_dec, self._out_width(t))
        return {k: Tensor(v.astype(self.dtype), requires_grad=True) for k, v in p.items()}

    def _out_width(self, task: str) -> int:
        pp = self.layout.patch_size ** 2
        return {"S": pp * self.n_classes, "I": pp * (self.k_max + 1), "R": pp * 3}[task]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- building blocks ----------------------------------------------------

    def _norm(self, x, name):
        return layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _lin(self, x, name):
        return linear(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))

    def _attention(self, xq, xkv, name, heads, record=None):
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        dh = d // heads

        def split(x, t):
            return transpose(reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))

        q = split(self._lin(xq, f"{name}.q"), tq)
        k = split(self._lin(xkv, f"{name}.k"), tk)
        v = split(self._lin(xkv, f"{name}.v"), tk)
        a = softmax_lastdim(mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(dh)))
        if record is not None:
            record.append(a.data.copy())
        out = reshape(transpose(matmul(a, v), (0, 2, 1, 3)), (b, tq, d))
        return self._lin(out, f"{name}.proj")

    def _mlp(self, x, name):
        return self._lin(gelu(self._lin(x, f"{name}.fc1")), f"{name}.fc2")

    # -- pipeline -------------------------------------------------------------

    def embed_all(self, patches: dict[str, np.ndarray]) -> Tensor:
        """(B, 3N, D_enc) token embeddings for every patch, span order S, I, R."""
        n = self.layout.n
        parts = []
        for g, t in enumerate(TASKS):
            x = np.asarray(patches[t], dtype=self.dtype)
            if x.shape[-1] != self.in_widths[t]:
                raise ContractError(f"{t} patches have width {x.shape[-1]}, expected {self.in_widths[t]}")
            e = add(linear(Tensor(x), self.params[f"embed.{t}.weight"], self.params[f"embed.{t}.bias"]),
                    self.enc_pos[g * n:(g + 1) * n])
            parts.append(e)
        return concat(parts, axis=1)

    def encode(self, tokens: Tensor, record: list | None = None) -> Tensor:
        """Pre-norm transformer over (B, L, D_enc) visible tokens; depth 0 is the identity."""
        x = as_tensor(tokens)
        if x.shape[-2] < 1:
            raise ContractError("encoder needs at least one visible token")
        for b in range(self.cfg.enc_depth):
            pre = f"enc.{b}"
            xn = self._norm(x, f"{pre}.norm1")
            x = add(x, self._attention(xn, xn, f"{pre}.attn", self.cfg.enc_heads, record))
            x = add(x, self._mlp(self._norm(x, f"{pre}.norm2"), f"{pre}.mlp"))
        if self.cfg.enc_depth:
            x = self._norm(x, "enc.norm")
        return x

    def assemble_full_sequence(self, h_enc: Tensor, positions: np.ndarray) -> Tensor:
        """Project encoder output, insert mask tokens, add decoder positions -> (B, 3N, D_dec)."""
        positions = np.asarray(positions)
        if h_enc.shape[:2] != positions.shape:
            raise ContractError(f"encoder output {h_enc.shape} does not match {positions.shape} visible positions")
        proj = self._lin(h_enc, "dec.embed")
        full = scatter_into_mask(self.params["mask_token"], proj, positions, 3 * self.layout.n)
        return add(full, self.dec_pos)

    def decode_stage(self, task: str, h: Tensor, kv: Tensor) -> Tensor:
        """One task stage: self-attention, cross-attention to ``kv``, FFN (pre-norm residual)."""
        i, j = self.layout.span(task)
        x = slice_rows(h, i, j)
        heads = self.cfg.dec_heads
        for s in range(self.cfg.dec_subblocks_per_stage):
            pre = f"dec.{task}.{s}"
            xs = self._norm(x, f"{pre}.norm_self")
            x = add(x, self._attention(xs, xs, f"{pre}.self_attn", heads))
            x = add(x, self._attention(self._norm(x, f"{pre}.norm_q"), self._norm(kv, f"{pre}.norm_kv"),
                                       f"{pre}.cross_attn", heads))
            x = add(x, self._mlp(self._norm(x, f"{pre}.norm_ffn"), f"{pre}.mlp"))
        return x

    def decode(self, h: Tensor) -> dict[str, Tensor]:
        """Run the stages in ``task_order``; returns each task's stage output F."""
        feats = {}
        f_prev, prev_span = None, None
        for task in self.cfg.task_order:
            kv = fuse_kv(h, f_prev, prev_span) if self.cfg.decoder_mode == "cascaded" else h
            feats[task] = self.decode_stage(task, h, kv)
            f_prev, prev_span = feats[task], self.layout.span(task)
        return feats

    def forward(self, batch: Batch, record: list | None = None) -> dict[str, Tensor]:
        """Predictions per task: S (B, N, P*P*C) logits, I (B, N, P*P*(K+1)) logits, R (B, N, P*P*3)."""
        emb = self.embed_all(batch.patches)
        h_enc = self.encode(gather_rows(emb, batch.positions), record)
        h = self.assemble_full_sequence(h_enc, batch.positions)
        feats = self.decode(h)
        return {t: self._lin(feats[t], f"pred.{t}") for t in TASKS}

    def predict(self, sample, plan: MaskPlan) -> dict[str, np.ndarray]:
        """Single-sample convenience wrapper around :meth:`forward`."""
        batch = prepare_batch([sample], [plan], self.layout, self.n_classes, self.k_max)
        with no_grad():
            out = self.forward(batch)
        return {t: v.data[0] for t, v in out.items()}

    def attention_maps(self, sample, plan: MaskPlan, layer: int, head: int) -> np.ndarray:
        """Post-softmax encoder attention (N_vis x N_vis) for one layer and head."""
        if not 0 <= layer < self.cfg.enc_depth:
            raise ContractError(f"layer {layer} outside [0, {self.cfg.enc_depth})")
        if not 0 <= head < self.cfg.enc_heads:
            raise ContractError(f"head {head} outside [0, {self.cfg.enc_heads})")
        batch = prepare_batch([sample], [plan], self.layout, self.n_classes, self.k_max)
        record: list = []
        with no_grad():
            self.forward(batch, record)
        return record[layer][0, head]


def export_attention(path, attn: np.ndarray, positions: np.ndarray, layer: int, head: int) -> None:
    doc = {"layer": layer, "head": head, "source_positions": [int(p) for p in positions],
           "attention": [[float(v) for v in row] for row in attn]}
    Path(path).write_text(json.dumps(doc))


def load_attention(path) -> tuple[np.ndarray, dict]:
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["attention"], dtype=np.float64), doc
