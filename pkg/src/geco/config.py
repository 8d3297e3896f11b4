"""Model, training and inference configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional


@dataclass
class ResizeConfig:
    """Test-time rescaling rule driven by the mean exemplar extent.

    Defaults are the full-scale values (1536/1024 canvases, 80 px target);
    :meth:`toy` shrinks them for 128 px synthetic scenes.
    """

    small_extent: float = 25.0
    small_canvas: int = 1536
    target_extent: float = 80.0
    canvas: int = 1024

    @classmethod
    def toy(cls) -> "ResizeConfig":
        return cls(small_extent=6.0, small_canvas=192, target_extent=20.0, canvas=128)


@dataclass
class GecoConfig:
    d: int = 64
    heads: int = 4
    n_p: int = 3
    n_q: int = 2
    r: int = 16
    d_hq: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    # "constant", or "cosine": per-step decay to zero over the main phase
    lr_schedule: str = "constant"
    # max global gradient norm per step; None disables clipping
    grad_clip: Optional[float] = None
    batch: int = 8
    tau: float = 0.5
    dedup_iou: float = 0.5
    # None: derived per image from the exemplar size
    sigma_pretrain: Optional[float] = None
    seed: int = 0
    negative_slope: float = 0.01
    norm: bool = True
    pretrain_epochs: int = 2
    epochs: int = 20
    zero_shot_epochs: int = 10
    scale_aug: tuple = (0.8, 1.2)
    resize: ResizeConfig = field(default_factory=ResizeConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scale_aug"] = list(self.scale_aug)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GecoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "resize" in data and isinstance(data["resize"], dict):
            data["resize"] = ResizeConfig(**data["resize"])
        if "scale_aug" in data:
            data["scale_aug"] = tuple(data["scale_aug"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "GecoConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
