"""Training configuration stored as a flat TOML key/value file.

Documented keys (all optional, defaults in :class:`TrainConfig`)::

    alphabet_size    number of character classes (background is one extra class)
    K                landmarks per character
    D                backbone / RoI feature channels
    lambda           diversity-loss weight
    stages           ordered stage list, always [1, 2, 3]
    lr               initial SGD learning rate for every stage
    decay_epochs     1-based epochs after which the lr is divided by 10 (per stage)
    epochs_stage1 / epochs_stage2 / epochs_stage3
    rotation_range / translation_range / scaling_range   [lo, hi] for the GPM warp
    iou_threshold    character-to-line assembly threshold
    fusion           graph | concat | sum | none
    use_landmarks    false runs the graph variant on character nodes only
    use_align / use_div   landmark-loss ablation switches
    seed             global seed
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..transforms import TransformRanges

FUSIONS = ("graph", "concat", "sum", "none")

_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    alphabet_size: int = 50
    K: int = 16
    D: int = 32
    lam: float = 50.0
    stages: list = field(default_factory=lambda: [1, 2, 3])
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: list = field(default_factory=lambda: [8, 10])
    epochs_stage1: int = 12
    epochs_stage2: int = 4
    epochs_stage3: int = 12
    lr_stage2: float = 0.02
    batch_size: int = 16
    rotation_range: list = field(default_factory=lambda: [0.0, 2 * math.pi])
    translation_range: list = field(default_factory=lambda: [-0.2, 0.2])
    scaling_range: list = field(default_factory=lambda: [0.7, 1.3])
    iou_threshold: float = 0.3
    fusion: str = "graph"
    use_landmarks: bool = True
    use_align: bool = True
    use_div: bool = True
    patch_size: int = 70
    fc_size: int = 14
    text_roi: int = 8
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64])
    head_hidden: int = 256
    gpm_hidden: int = 32
    jitter: float = 0.1
    val_images: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if list(self.stages) != [1, 2, 3][: len(self.stages)] or not self.stages:
            raise ValueError(f"stages must be [1, 2, 3] in order (or a prefix), got {self.stages}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not 0 < self.iou_threshold < 1:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        self.transform_ranges()

    def transform_ranges(self) -> TransformRanges:
        return TransformRanges(tuple(self.rotation_range), tuple(self.translation_range), tuple(self.scaling_range))

    @property
    def gpm_active(self) -> bool:
        return self.fusion != "none" and (self.use_landmarks or self.fusion != "graph")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = _ALIASES.get(key, key)
            if name not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.to_dict().items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat key = value pairs; found tables {nested}")
    return TrainConfig.from_dict(raw)
