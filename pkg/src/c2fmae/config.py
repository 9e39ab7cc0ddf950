"""Run configuration: one JSON document with ``scene``, ``mask``, ``model`` and
``train`` sections.  Every field is optional; unknown keys are rejected and
errors name the offending key path (e.g. ``train.batch_size``).
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import MaskConfig, ScheduleConfig
from .model import C2FMAE, ModelConfig
from .objective import LossWeights
from .synthdata import SceneConfig
from .tokenizer import TokenLayout
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the key path."""


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(self.scene.image_size, self.model.patch_size)

    def build_model(self, dtype=None) -> C2FMAE:
        dtype = np.dtype(dtype or self.train.dtype)
        return C2FMAE(self.model, self.layout, self.scene.class_count, seed=self.train.seed, dtype=dtype)

    def to_dict(self) -> dict:
        mask = dataclasses.asdict(self.mask)
        mask["schedule"] = {"breakpoints": [list(bp) for bp in self.mask.schedule.breakpoints]}
        return {"scene": self.scene.to_dict(), "mask": mask, "model": self.model.to_dict(),
                "train": self.train.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("<root>: expected a JSON object")
        _reject_unknown(doc, {"scene", "mask", "model", "train"}, "")
        cfg = cls(
            scene=_build(SceneConfig, doc.get("scene", {}), "scene"),
            mask=_build(MaskConfig, doc.get("mask", {}), "mask"),
            model=_build(ModelConfig, doc.get("model", {}), "model"),
            train=_build(TrainConfig, doc.get("train", {}), "train"),
        )
        try:
            cfg.scene.validate(cfg.model.k_max)
            cfg.layout
        except ValueError as exc:
            raise ConfigError(f"scene: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: {path} is not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def _reject_unknown(doc: dict, allowed: set[str], path: str) -> None:
    for key in doc:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")


_NESTED = {("mask", "schedule"): ScheduleConfig, ("train", "loss_weights"): LossWeights}


def _check_type(value, hint, path: str) -> None:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint in (int, float, str, bool):
        ok = isinstance(value, hint) and not (hint is not bool and isinstance(value, bool))
        if hint is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"{path}: expected {hint.__name__}, got {type(value).__name__}")
    elif origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return
        for a in args:
            if a is type(None):
                continue
            try:
                _check_type(value, a, path)
                return
            except ConfigError:
                pass
        raise ConfigError(f"{path}: value {value!r} has the wrong type")
    elif origin in (tuple, list) and not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list")
    elif origin is dict and not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")


def _build(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _reject_unknown(doc, set(fields), path)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in doc.items():
        key_path = f"{path}.{key}"
        nested = _NESTED.get((path, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, key_path)
            continue
        _check_type(value, hints[key], key_path)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
