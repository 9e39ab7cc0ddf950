"""Visible-budget allocation, guided mask generators and the progressive blend.

Every generator returns an ``int8`` vector of length N with exactly the
requested number of ones (1 = masked).  Randomness comes from named
streams, ``rng_stream(root_seed, tag, *keys)``, so any mask can be rebuilt
from its identifiers alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .numerics import ContractError
from .tokenizer import TASKS, TokenLayout

_TAGS = {"budget": 1, "semantic": 2, "instance": 3, "random": 4, "blend": 5, "shuffle": 6, "init": 7}
MASKING_MODES = ("progressive", "random", "semantic", "instance")
_FIXED_ALPHAS = {"random": (0.0, 0.0), "instance": (1.0, 0.0), "semantic": (0.0, 1.0)}


def rng_stream(root_seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Independent generator identified by (root seed, purpose tag, keys...)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(_TAGS[tag],) + tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


DEFAULT_BREAKPOINTS = ((0.0, 0.0, 1.0), (0.15, 0.0, 1.0), (0.45, 1.0, 0.0),
                       (0.60, 1.0, 0.0), (0.90, 0.0, 0.0), (1.0, 0.0, 0.0))


@dataclass
class ScheduleConfig:
    """Piecewise-linear (u, α_I, α_S) curriculum."""

    breakpoints: Sequence[tuple[float, float, float]] = DEFAULT_BREAKPOINTS

    def __post_init__(self):
        self.breakpoints = tuple(tuple(float(v) for v in bp) for bp in self.breakpoints)
        if not self.breakpoints:
            raise ValueError("schedule needs at least one breakpoint")
        us = [bp[0] for bp in self.breakpoints]
        if any(b < a for a, b in zip(us, us[1:])) or us[0] < 0 or us[-1] > 1:
            raise ValueError(f"breakpoint fractions must be nondecreasing within [0, 1], got {us}")
        for u, ai, as_ in self.breakpoints:
            if ai < 0 or as_ < 0 or ai + as_ > 1:
                raise ValueError(f"breakpoint at u={u} violates 0 <= alpha_I, alpha_S and alpha_I + alpha_S <= 1")


@dataclass
class MaskConfig:
    visible_tokens: int | None = None   # None -> 3N/6
    alpha: float = 0.75
    class_weights: dict[int, float] | None = None
    dirichlet_concentration: float = 1.0
    object_patch_threshold: float = 0.25
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    redraw_per_step: bool = False       # fresh streams every optimizer step

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.class_weights is not None:
            self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
            if any(v < 0 for v in self.class_weights.values()):
                raise ValueError("class weights must be nonnegative")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1], got {self.alpha}")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be positive")
        if not 0.0 <= self.object_patch_threshold <= 1.0:
            raise ValueError("object_patch_threshold must lie in [0, 1]")

    def budget(self, layout: TokenLayout) -> int:
        v = 3 * layout.n // 6 if self.visible_tokens is None else int(self.visible_tokens)
        if not 0 <= v <= 3 * layout.n:
            raise ValueError(f"visible_tokens must lie in [0, {3 * layout.n}], got {v}")
        return v


@dataclass
class RatioSample:
    visible_counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.visible_counts.values())


@dataclass
class MaskPlan:
    masks: dict[str, np.ndarray]
    masked_counts: dict[str, int]
    ratio: RatioSample
    alphas: tuple[float, float]
    u: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "masks": {t: self.masks[t].astype(int).tolist() for t in TASKS},
            "masked_counts": self.masked_counts,
            "visible_counts": self.ratio.visible_counts,
            "alphas": {"instance": self.alphas[0], "semantic": self.alphas[1]},
            "u": self.u,
        })

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        return cls({t: np.asarray(d["masks"][t], dtype=np.int8) for t in TASKS},
                   {t: int(d["masked_counts"][t]) for t in TASKS},
                   RatioSample({t: int(d["visible_counts"][t]) for t in TASKS}),
                   (d["alphas"]["instance"], d["alphas"]["semantic"]), d.get("u", 0.0))


# ---------------------------------------------------------------------------
# integer allocation
# ---------------------------------------------------------------------------


def largest_remainder(total: int, weights: Sequence[float], capacity: Sequence[int]) -> list[int]:
    """Split ``total`` units proportionally to ``weights`` without exceeding ``capacity``.

    Each entry first gets the floor of its proportional share; the leftover
    units go one at a time by descending fractional part, ties to the lower
    index.  Shares that would exceed capacity are pinned there and the
    excess is re-shared among the rest (before rounding).  Zero-weight
    entries only receive units once positive-weight capacity is exhausted.
    Arithmetic is exact (rationals).
    """
    n = len(weights)
    cap = [int(c) for c in capacity]
    if total < 0 or total > sum(cap):
        raise ContractError(f"cannot place {total} units into capacity {sum(cap)}")
    w = [Fraction(x) for x in weights]
    alloc = [0] * n
    remaining = total
    for pool in ([i for i in range(n) if w[i] > 0 and cap[i] > 0], [i for i in range(n) if w[i] == 0 and cap[i] > 0]):
        if remaining == 0:
            break
        pool_w = {i: (w[i] if w[i] > 0 else Fraction(cap[i])) for i in pool}
        part = _proportional(min(remaining, sum(cap[i] for i in pool)), pool_w, cap)
        for i, v in part.items():
            alloc[i] += v
        remaining -= sum(part.values())
    return alloc


def _proportional(total: int, w: dict[int, Fraction], cap: list[int]) -> dict[int, int]:
    pinned: dict[int, Fraction] = {}
    free = dict(w)
    while True:
        left = total - sum(pinned.values())
        s = sum(free.values())
        shares = {i: left * wi / s for i, wi in free.items()} if s > 0 else {}
        over = [i for i, v in shares.items() if v > cap[i]]
        if not over:
            break
        for i in over:
            pinned[i] = Fraction(cap[i])
            del free[i]
    shares.update(pinned)
    out = {i: math.floor(v) for i, v in shares.items()}
    rem = total - sum(out.values())
    order = sorted(shares, key=lambda i: (-(shares[i] - out[i]), i))
    while rem > 0:
        progressed = False
        for i in order:
            if rem == 0:
                break
            if out[i] < cap[i]:
                out[i] += 1
                rem -= 1
                progressed = True
        if not progressed:
            raise ContractError("allocation capacity exhausted")
    return out


# ---------------------------------------------------------------------------
# budget and region statistics
# ---------------------------------------------------------------------------


def sample_visible_budget(rng: np.random.Generator, visible: int, n: int,
                          concentration: float = 1.0) -> RatioSample:
    """Split ``visible`` tokens over the three granularities with a Dirichlet draw."""
    if not 0 <= visible <= 3 * n:
        raise ContractError(f"visible budget {visible} outside [0, {3 * n}]")
    lam = rng.dirichlet([concentration] * len(TASKS))
    counts = largest_remainder(visible, lam.tolist(), [n] * len(TASKS))
    return RatioSample(dict(zip(TASKS, counts)))


def _patch_blocks(arr: np.ndarray, p: int) -> np.ndarray:
    h, w = arr.shape
    g = arr.reshape(h // p, p, w // p, p).swapaxes(1, 2)
    return g.reshape(-1, p * p)


def patch_semantic_labels(sample, p: int) -> np.ndarray:
    """Majority class per patch; ties go to the smaller class id."""
    blocks = _patch_blocks(np.asarray(sample.semantic), p)
    n_cls = int(blocks.max()) + 1
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(n_cls)], axis=1)
    return counts.argmax(axis=1)


def patch_object_flags(sample, p: int, threshold: float = 0.25) -> np.ndarray:
    """True where the fraction of instance pixels in the patch is >= threshold."""
    blocks = _patch_blocks(np.asarray(sample.instance), p)
    inside = (blocks > 0).sum(axis=1)
    return inside >= threshold * (p * p)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _check_k(k: int, n: int) -> None:
    if not 0 <= k <= n:
        raise ContractError(f"masked count {k} outside [0, {n}]")


def _pick(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    # prefix of a full permutation: the draws consumed do not depend on k,
    # so one stream gives nested selections as k grows
    return pool[rng.permutation(len(pool))[:k]]


def random_mask(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    _check_k(k, n)
    m = np.zeros(n, dtype=np.int8)
    m[_pick(rng, np.arange(n), k)] = 1
    return m


def semantic_quotas(labels: np.ndarray, k: int, weights: dict[int, float] | None = None) -> dict[int, int]:
    """Masked-patch quota per semantic region (weighted area, largest remainder)."""
    labels = np.asarray(labels)
    _check_k(k, len(labels))
    classes, sizes = np.unique(labels, return_counts=True)
    w = [(1.0 if weights is None else weights.get(int(c), 1.0)) * int(s) for c, s in zip(classes, sizes)]
    alloc = largest_remainder(k, w, sizes.tolist())
    return {int(c): a for c, a in zip(classes, alloc)}


def semantic_guided_mask(labels: np.ndarray, k: int, weights: dict[int, float] | None,
                         rng: np.random.Generator) -> np.ndarray:
    """Mask ``k`` patches, spreading them over semantic regions by (weighted) area."""
    labels = np.asarray(labels)
    quotas = semantic_quotas(labels, k, weights)
    m = np.zeros(len(labels), dtype=np.int8)
    for c in sorted(quotas):
        region = np.flatnonzero(labels == c)
        m[_pick(rng, region, quotas[c])] = 1
    return m


def instance_quota(object_flags: np.ndarray, k: int, alpha: float) -> tuple[int, int]:
    """(object, background) masked counts: ⌊αk⌋ on objects, capacity spill-over either way."""
    flags = np.asarray(object_flags, dtype=bool)
    _check_k(k, len(flags))
    n_obj = int(flags.sum())
    n_bg = len(flags) - n_obj
    k_obj = min(math.floor(Fraction(repr(float(alpha))) * k), n_obj)
    k_bg = min(k - k_obj, n_bg)
    k_obj += k - k_obj - k_bg
    return k_obj, k_bg


def instance_guided_mask(object_flags: np.ndarray, k: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Mask ``k`` patches with a fraction ``alpha`` aimed at object patches."""
    if not 0 < alpha <= 1:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    flags = np.asarray(object_flags, dtype=bool)
    k_obj, k_bg = instance_quota(flags, k, alpha)
    m = np.zeros(len(flags), dtype=np.int8)
    m[_pick(rng, np.flatnonzero(flags), k_obj)] = 1
    m[_pick(rng, np.flatnonzero(~flags), k_bg)] = 1
    return m


def schedule_alphas(u: float, cfg: ScheduleConfig | None = None) -> tuple[float, float]:
    """(α_I, α_S) at training fraction ``u`` by piecewise-linear interpolation.

    Interpolation runs on the decimal values of the inputs, so points that
    are exact in decimal (e.g. segment midpoints) come out exact.
    """
    cfg = cfg or ScheduleConfig()
    if not 0.0 <= u <= 1.0:
        raise ContractError(f"training fraction must lie in [0, 1], got {u}")
    bps = cfg.breakpoints
    hits = [bp for bp in bps if bp[0] == u]
    if hits:
        # last breakpoint wins for repeated fractions
        return hits[-1][1], hits[-1][2]
    if u < bps[0][0]:
        return bps[0][1], bps[0][2]
    if u > bps[-1][0]:
        return bps[-1][1], bps[-1][2]
    for (u0, i0, s0), (u1, i1, s1) in zip(bps, bps[1:]):
        if u0 < u < u1:
            fu, f0, f1 = (Fraction(repr(v)) for v in (u, u0, u1))
            t = (fu - f0) / (f1 - f0)
            a_i = float(Fraction(repr(i0)) + (Fraction(repr(i1)) - Fraction(repr(i0))) * t)
            a_s = float(Fraction(repr(s0)) + (Fraction(repr(s1)) - Fraction(repr(s0))) * t)
            while a_i + a_s > 1.0:
                a_i = float(np.nextafter(a_i, 0.0))
            return a_i, a_s
    raise AssertionError("unreachable")


def mode_alphas(mode: str, u: float, schedule: ScheduleConfig | None = None) -> tuple[float, float]:
    """Blend coefficients for a masking mode; only ``progressive`` follows the schedule."""
    if mode == "progressive":
        return schedule_alphas(u, schedule)
    if mode not in _FIXED_ALPHAS:
        raise ValueError(f"unknown masking mode {mode!r}; expected one of {MASKING_MODES}")
    return _FIXED_ALPHAS[mode]


def compose_progressive_mask(m_r: np.ndarray, m_i: np.ndarray, m_s: np.ndarray, alpha_i: float, alpha_s: float,
                             k: int, rng: np.random.Generator) -> np.ndarray:
    """Blend three masks into scores and keep the ``k`` highest.

    Ties are resolved by rank in a seeded permutation of the positions.
    """
    m_r, m_i, m_s = (np.asarray(m, dtype=np.int8) for m in (m_r, m_i, m_s))
    if not (m_r.shape == m_i.shape == m_s.shape) or m_r.ndim != 1:
        raise ContractError("masks must be 1-D vectors of equal length")
    counts = {int(m.sum()) for m in (m_r, m_i, m_s)}
    if counts != {k}:
        raise ContractError(f"input masks must all mask exactly {k} positions, got popcounts {sorted(counts)}")
    if alpha_i < 0 or alpha_s < 0 or alpha_i + alpha_s > 1:
        raise ContractError(f"invalid blend coefficients ({alpha_i}, {alpha_s})")
    n = len(m_r)
    score = (1.0 - alpha_i - alpha_s) * m_r + alpha_i * m_i + alpha_s * m_s
    rank = np.empty(n, dtype=np.intp)
    rank[rng.permutation(n)] = np.arange(n)
    order = np.lexsort((rank, -score))
    out = np.zeros(n, dtype=np.int8)
    out[order[:k]] = 1
    return out


def build_mask_plan(sample, cfg: MaskConfig, layout: TokenLayout, u: float, root_seed: int, index: int,
                    mode: str = "progressive", draw: int | None = None) -> MaskPlan:
    """Full per-sample plan: budget, three generators per granularity, blend.

    Streams are keyed by (root_seed, purpose, index[, granularity]), so a
    sample's plan changes over training only through ``u``.  Passing ``draw``
    inserts it after the purpose tag and gives an independent re-draw.
    """
    if mode not in MASKING_MODES:
        raise ValueError(f"unknown masking mode {mode!r}; expected one of {MASKING_MODES}")
    n = layout.n
    head = (index,) if draw is None else (draw, index)
    ratio = sample_visible_budget(rng_stream(root_seed, "budget", *head), cfg.budget(layout), n,
                                  cfg.dirichlet_concentration)
    alphas = mode_alphas(mode, u, cfg.schedule)
    labels = patch_semantic_labels(sample, layout.patch_size)
    flags = patch_object_flags(sample, layout.patch_size, cfg.object_patch_threshold)
    masks, counts = {}, {}
    for g, t in enumerate(TASKS):
        k = n - ratio.visible_counts[t]
        m_s = semantic_guided_mask(labels, k, cfg.class_weights, rng_stream(root_seed, "semantic", *head, g))
        m_i = instance_guided_mask(flags, k, cfg.alpha, rng_stream(root_seed, "instance", *head, g))
        m_r = random_mask(n, k, rng_stream(root_seed, "random", *head, g))
        masks[t] = compose_progressive_mask(m_r, m_i, m_s, *alphas, k, rng_stream(root_seed, "blend", *head, g))
        counts[t] = k
    return MaskPlan(masks, counts, ratio, alphas, float(u))


def full_plan(layout: TokenLayout, visible: bool = True) -> MaskPlan:
    """Trivial plan with every token visible (or every token masked)."""
    n = layout.n
    fill = 0 if visible else 1
    masks = {t: np.full(n, fill, dtype=np.int8) for t in TASKS}
    return MaskPlan(masks, {t: n * fill for t in TASKS}, RatioSample({t: n * (1 - fill) for t in TASKS}), (0.0, 0.0))
