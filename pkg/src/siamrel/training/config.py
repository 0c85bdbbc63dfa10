"""Training configuration and the learning-rate schedule."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from ..model import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 28
    n_pos: int = 16
    n_neg: int = 48
    relation_pairs: int = 16
    warmup_epochs: int = 5
    lr_warmup: tuple[float, float] = (0.001, 0.005)
    lr_decay: tuple[float, float] = (0.005, 0.00005)
    backbone_release_epoch: int = 11
    backbone_lr_factor: float = 0.1
    frozen_stages: tuple[int, ...] = (1, 2)
    weight_decay: float = 0.0001
    momentum: float = 0.9
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    strategy: str = "contrastive"  # or "naive": one-way, no negative support
    hnm: bool = True
    online_hnm_epoch: int = 5
    offline_hnm_epoch: int = 15
    offline_hnm_prob: float = 0.5
    offline_hnm_n: int = 8
    online_hnm_count: int = 8
    gallery_frames: int = 4
    max_gap: int = 100
    search_shift: float = 32.0
    scale_jitter: float = 0.15
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    gt_jitter_proposals: int = 8
    # back-propagate the classification loss through the matching scores
    cls_through_rd: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        lrs = (*self.lr_warmup, *self.lr_decay)
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_warmup[1] < self.lr_warmup[0] or self.lr_decay[1] > self.lr_decay[0]:
            raise ValueError("warm-up must not decrease and decay must not increase")
        if self.strategy not in ("contrastive", "naive"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        d = dict(d)
        for key in ("lr_warmup", "lr_decay", "frozen_stages", "loss_weights"):
            if key in d:
                d[key] = tuple(d[key])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def lr_at(epoch: int, step_fraction: float = 0.0, config: TrainConfig | None = None) -> float:
    """Base learning rate at ``epoch`` (1-based) plus the fraction of it already run.

    Linear warm-up over the first ``warmup_epochs`` epochs, then geometric
    decay over the rest; both ends of each phase are hit exactly.
    """
    cfg = config or TrainConfig()
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if not 0.0 <= step_fraction <= 1.0:
        raise ValueError("step_fraction must be in [0, 1]")
    if epoch <= cfg.warmup_epochs:
        t = (epoch - 1 + step_fraction) / cfg.warmup_epochs
        a, b = cfg.lr_warmup
        return (1 - t) * a + t * b
    span = cfg.epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs - 1 + step_fraction) / span
    a, b = cfg.lr_decay
    return a ** (1 - t) * b ** t


def backbone_lr(epoch: int, step_fraction: float = 0.0, config: TrainConfig | None = None) -> float:
    cfg = config or TrainConfig()
    if epoch < cfg.backbone_release_epoch:
        return 0.0
    return cfg.backbone_lr_factor * lr_at(epoch, step_fraction, cfg)
