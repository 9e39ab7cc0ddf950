"""Procedural tri-granular scenes: RGB image, instance ids, semantic classes.

Each scene is a sky/ground split with a wavy horizon and a few filled shapes
(circle, square, triangle) painted back to front.  The instance map holds
the visible part of every shape, the semantic map the class of every pixel.
Generation is a pure function of ``(cfg.seed, index)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GROUND, SKY = 0, 1
FORMAT_VERSION = 1
MAX_RETRIES = 20

_STUFF_COLORS = {GROUND: (0.35, 0.55, 0.20), SKY: (0.45, 0.70, 0.95)}
_THING_COLORS = {"circle": (0.90, 0.20, 0.15), "square": (0.95, 0.85, 0.20), "triangle": (0.55, 0.25, 0.75)}


class FormatError(ValueError):
    """A sample file on disk is malformed."""


@dataclass
class SceneConfig:
    image_size: int = 64
    shape_count_range: tuple[int, int] = (1, 4)
    thing_classes: dict[str, int] = field(default_factory=lambda: {"circle": 2, "square": 3, "triangle": 4})
    stuff_classes: dict[str, int] = field(default_factory=lambda: {"ground": GROUND, "sky": SKY})
    min_visible_pixels: int = 16
    noise_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.shape_count_range = tuple(int(v) for v in self.shape_count_range)

    @property
    def class_count(self) -> int:
        return len(self.stuff_classes) + len(self.thing_classes)

    def validate(self, k_max: int = 8) -> None:
        lo, hi = self.shape_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"shape_count_range must satisfy 0 <= min <= max, got {self.shape_count_range}")
        if hi > k_max:
            raise ValueError(f"shape_count_range max {hi} exceeds k_max {k_max}")
        if self.stuff_classes != {"ground": GROUND, "sky": SKY}:
            raise ValueError("stuff classes are fixed to ground=0, sky=1")
        unknown = set(self.thing_classes) - set(_THING_COLORS)
        if unknown:
            raise ValueError(f"unknown thing kinds {sorted(unknown)}")
        ids = sorted(self.thing_classes.values())
        if ids != list(range(2, 2 + len(ids))):
            raise ValueError(f"thing class ids must be 2..{1 + len(ids)}, got {ids}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise ValueError("noise_amplitude must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_count_range"] = list(self.shape_count_range)
        return d


@dataclass
class MultiGranularSample:
    rgb: np.ndarray        # (H, W, 3) float64 on the 1/255 grid
    instance: np.ndarray   # (H, W) int64, 0 = background
    semantic: np.ndarray   # (H, W) int64 class ids
    meta: dict = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return self.rgb.shape[0]

    def equals(self, other: "MultiGranularSample") -> bool:
        return (np.array_equal(self.rgb, other.rgb) and np.array_equal(self.instance, other.instance)
                and np.array_equal(self.semantic, other.semantic))


def sample_seed(cfg: SceneConfig, index: int) -> int:
    """Per-sample 64-bit seed derived from the dataset seed and sample index."""
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _quantize(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def _dequantize(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float64) / 255.0


def _shape_mask(kind: str, cx: float, cy: float, size: float, angle: float, yy, xx) -> np.ndarray:
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size ** 2
    if kind == "square":
        return (np.abs(xx - cx) <= size) & (np.abs(yy - cy) <= size)
    # triangle: three half-planes of an equilateral triangle
    inside = np.ones_like(xx, dtype=bool)
    verts = [(cx + size * np.cos(angle + k * 2 * np.pi / 3), cy + size * np.sin(angle + k * 2 * np.pi / 3))
             for k in range(3)]
    for k in range(3):
        (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def generate_sample(cfg: SceneConfig, index: int) -> MultiGranularSample:
    cfg.validate()
    seed = sample_seed(cfg, index)
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # wavy horizon
    base = rng.uniform(0.35, 0.65) * s
    amp = rng.uniform(0.0, 0.08) * s
    freq = rng.uniform(0.5, 2.0) * 2 * np.pi / s
    phase = rng.uniform(0, 2 * np.pi)
    horizon = base + amp * np.sin(freq * np.arange(s) + phase)
    semantic = np.where(yy < horizon[None, :], SKY, GROUND).astype(np.int64)
    instance = np.zeros((s, s), dtype=np.int64)

    kinds = sorted(cfg.thing_classes, key=cfg.thing_classes.get)
    lo, hi = cfg.shape_count_range
    n_shapes = int(rng.integers(lo, hi + 1))
    descriptors = []
    for _ in range(n_shapes):
        kind = kinds[int(rng.integers(len(kinds)))]
        for _attempt in range(MAX_RETRIES):
            size = rng.uniform(0.08, 0.22) * s
            cx, cy = rng.uniform(0, s), rng.uniform(0, s)
            angle = rng.uniform(0, 2 * np.pi)
            mask = _shape_mask(kind, cx, cy, size, angle, yy, xx)
            trial = instance.copy()
            new_id = len(descriptors) + 1
            trial[mask] = new_id
            counts = np.bincount(trial.ravel(), minlength=new_id + 1)[1:]
            if counts.min(initial=cfg.min_visible_pixels) >= cfg.min_visible_pixels and counts[-1] > 0:
                instance = trial
                jitter = rng.uniform(-0.08, 0.08, size=3)
                color = np.clip(np.array(_THING_COLORS[kind]) + jitter, 0, 1)
                descriptors.append({"id": new_id, "kind": kind, "class_id": cfg.thing_classes[kind],
                                    "center": [round(cx, 4), round(cy, 4)], "size": round(size, 4),
                                    "angle": round(angle, 4), "color": [round(c, 4) for c in color]})
                break
        # placement failed after MAX_RETRIES: the shape is dropped

    rgb = np.empty((s, s, 3))
    for cls, color in _STUFF_COLORS.items():
        rgb[semantic == cls] = color
    for d in descriptors:
        region = instance == d["id"]
        semantic[region] = d["class_id"]
        rgb[region] = d["color"]
    rgb = rgb + cfg.noise_amplitude * rng.uniform(-1.0, 1.0, size=rgb.shape)
    meta = {"seed": seed, "index": int(index), "image_size": s, "class_count": cfg.class_count,
            "shape_descriptors": descriptors}
    return MultiGranularSample(_dequantize(_quantize(rgb)), instance, semantic, meta)


def check_alignment(sample: MultiGranularSample, n_stuff: int = 2) -> bool:
    """Thing pixels carry instance ids > 0; stuff pixels carry id 0; ids contiguous."""
    thing = sample.instance > 0
    if np.any(sample.semantic[thing] < n_stuff) or np.any(sample.semantic[~thing] >= n_stuff):
        return False
    ids = np.unique(sample.instance[thing])
    return np.array_equal(ids, np.arange(1, len(ids) + 1))


# ---------------------------------------------------------------------------
# Netpbm I/O
# ---------------------------------------------------------------------------


def write_pnm(path: Path, magic: bytes, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_pnm(path: Path, magic: bytes) -> tuple[np.ndarray, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()}, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad header values width={w} height={h} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * channels * dtype.itemsize
    body = raw[pos:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return arr, maxval


def save_sample(sample: MultiGranularSample, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pnm(d / "rgb.ppm", b"P6", _quantize(sample.rgb), 255)
    write_pnm(d / "instance.pgm", b"P5", sample.instance, 65535)
    write_pnm(d / "semantic.pgm", b"P5", sample.semantic, 255)
    meta = dict(sample.meta)
    meta.setdefault("image_size", sample.image_size)
    meta.setdefault("class_count", int(sample.semantic.max()) + 1)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(directory: str | os.PathLike) -> MultiGranularSample:
    d = Path(directory)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc
    rgb, maxval = read_pnm(d / "rgb.ppm", b"P6")
    if maxval != 255:
        raise FormatError(f"{d / 'rgb.ppm'}: maxval must be 255, got {maxval}")
    inst, _ = read_pnm(d / "instance.pgm", b"P5")
    sem, _ = read_pnm(d / "semantic.pgm", b"P5")
    if not (rgb.shape[:2] == inst.shape == sem.shape):
        raise FormatError(f"{d}: map dimensions disagree rgb={rgb.shape[:2]} instance={inst.shape} "
                          f"semantic={sem.shape}")
    n_classes = int(meta.get("class_count", 256))
    if sem.size and int(sem.max()) >= n_classes:
        raise FormatError(f"{d / 'semantic.pgm'}: class id {int(sem.max())} >= class_count {n_classes}")
    return MultiGranularSample(_dequantize(rgb), inst.astype(np.int64), sem.astype(np.int64), meta)


def generate_dataset(cfg: SceneConfig, count: int, out_dir: str | os.PathLike) -> dict:
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    entries = []
    for i in range(count):
        sample = generate_sample(cfg, i)
        rel = f"sample_{i:05d}"
        try:
            save_sample(sample, out / rel)
        except OSError as exc:
            raise OSError(f"{out / rel}: {exc}") from exc
        entries.append({"index": i, "path": rel, "seed": sample.meta["seed"]})
    manifest = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(directory: str | os.PathLike) -> tuple[list[MultiGranularSample], dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d / 'manifest.json'}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d / 'manifest.json'}: unsupported format_version {manifest.get('format_version')}")
    samples = [load_sample(d / e["path"]) for e in manifest["samples"]]
    return samples, manifest


def scene_config_from_dict(d: dict) -> SceneConfig:
    return SceneConfig(**d)
