"""The full Siamese relation network at toy scale."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .features import (LEVELS, Backbone, CorrelationHead, CorrelationOutputs, FeaturePyramid,
                       extract_pyramid, patch_to_feature)
from .geometry import GridSpec
from .refinement import RefinementModule
from .relation import HEADS, RelationDetector
from .roi_pool import prroi_pool


@dataclass
class ModelConfig:
    channels: int = 64
    widths: tuple[int, int] = (16, 32)
    levels: tuple[int, ...] = LEVELS
    heads: tuple[str, ...] = HEADS
    rd_hidden: int = 32
    # without the relation detector the matching map is fixed to 1
    use_rd: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("widths", "levels", "heads"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class SiamRelationNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.levels = tuple(config.levels)
        self.backbone = Backbone(config.channels, config.widths)
        self.head = CorrelationHead(config.channels, self.levels)
        self.refine = RefinementModule(config.channels)
        self.rd = nn.ModuleDict({
            str(lvl): RelationDetector(config.channels, config.heads, config.rd_hidden) for lvl in self.levels
        }) if config.use_rd else None
        self.grid = GridSpec()

    def backbone_stage_parameters(self, stages) -> list[nn.Parameter]:
        return [p for i in stages for p in self.backbone.stages[i - 1].parameters()]

    def template(self, images: torch.Tensor) -> FeaturePyramid:
        return extract_pyramid(self.backbone, images, "template", self.levels)

    def search(self, images: torch.Tensor) -> FeaturePyramid:
        return extract_pyramid(self.backbone, images, "search", self.levels)

    def correlate(self, pyr_z: FeaturePyramid, pyr_x: FeaturePyramid) -> CorrelationOutputs:
        return self.head(pyr_z, pyr_x)

    def pool(self, pyr: FeaturePyramid, boxes: torch.Tensor) -> dict[int, torch.Tensor]:
        """ROI features for patch-coordinate ``boxes`` of shape ``(B, K, 4)``."""
        fboxes = patch_to_feature(boxes)
        return {lvl: prroi_pool(pyr.full[lvl], fboxes) for lvl in self.levels}

    def template_roi(self, pyr_z: FeaturePyramid, boxes: torch.Tensor) -> dict[int, torch.Tensor]:
        """Template ROI per level from ``(B, 4)`` template-patch boxes; ``(B, C, 7, 7)`` each."""
        pooled = self.pool(pyr_z, boxes.unsqueeze(1))
        return {lvl: f[:, 0] for lvl, f in pooled.items()}

    def relation(self, support: dict[int, torch.Tensor], query: dict[int, torch.Tensor]) -> torch.Tensor:
        """Combined relation score averaged over levels; inputs ``(N, C, 7, 7)`` per level."""
        if self.rd is None:
            first = next(iter(query.values()))
            return first.new_ones(first.shape[0])
        scores = [self.rd[str(lvl)](support[lvl], query[lvl]) for lvl in self.levels]
        return torch.stack(scores, 0).mean(0)

    def relation_heads(self, support, query) -> dict[str, torch.Tensor]:
        """Per-head scores averaged over levels (diagnostics)."""
        out: dict[str, list] = {}
        for lvl in self.levels:
            res = self.rd[str(lvl)].score(support[lvl], query[lvl])
            for name, v in res.heads.items():
                out.setdefault(name, []).append(v)
        return {k: torch.stack(v, 0).mean(0) for k, v in out.items()}


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
