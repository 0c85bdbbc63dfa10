from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..geometry import iou_loss


@dataclass
class LossWeights:
    cls: float = 1.0
    reg: float = 1.0
    matching: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.reg, self.matching) < 0:
            raise ValueError("loss weights must be non-negative")


def matching_loss(r: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared error between relation scores and pair labels."""
    r = torch.as_tensor(r, dtype=torch.float64) if not isinstance(r, torch.Tensor) else r
    y = torch.as_tensor(y, dtype=r.dtype)
    return ((r - y) ** 2).mean()


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over sampled locations; ``logits`` is ``(N, 2)``."""
    return F.cross_entropy(logits, labels.long())


def reg_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    return iou_loss(pred_boxes, gt_boxes).mean()


def total_loss(l_cls, l_reg, l_matching, w: LossWeights | None = None):
    w = w or LossWeights()
    return w.cls * l_cls + w.reg * l_reg + w.matching * l_matching
