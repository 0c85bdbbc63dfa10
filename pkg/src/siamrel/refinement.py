"""Matching-score map construction and its fusion into the classification branch."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .features import patch_to_feature
from .geometry import GridSpec, decode_boxes
from .roi_pool import prroi_pool

NEUTRAL = 1.0


@dataclass
class MatchingScoreMap:
    values: torch.Tensor  # (S, S) in [0, 1]
    evaluated: np.ndarray  # (S, S) bool
    degenerate: int = 0


class RefinementModule(nn.Module):
    """Scales the classification correlation by the matching map, then 1x1 convs to logits.

    The convolutions are 1x1 so the logit at a location depends only on that
    location's correlation vector and matching score.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.cls_out = nn.Sequential(nn.Conv2d(channels, channels, 1), nn.ReLU(inplace=True),
                                     nn.Conv2d(channels, 2, 1))

    def forward(self, f_cls_corr: torch.Tensor, m: torch.Tensor | None = None) -> torch.Tensor:
        if m is not None:
            f_cls_corr = refine_correlation(f_cls_corr, m)
        return self.cls_out(f_cls_corr)


def refine_correlation(f_cls_corr: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Broadcast-multiply ``m`` (``(B, S, S)`` or ``(S, S)``) over the channels of ``f_cls_corr``."""
    if m.dim() == f_cls_corr.dim() - 1:
        m = m.unsqueeze(-3)
    return f_cls_corr * m


def refine_cls(module: RefinementModule, f_cls_corr: torch.Tensor, m: MatchingScoreMap | torch.Tensor) -> torch.Tensor:
    values = m.values if isinstance(m, MatchingScoreMap) else m
    single = f_cls_corr.dim() == 3
    if single:
        f_cls_corr, values = f_cls_corr.unsqueeze(0), values.unsqueeze(0)
    logits = module(f_cls_corr, values)
    return logits[0] if single else logits


ScoreFn = Callable[[dict, dict], torch.Tensor]


def build_matching_map(reg_map: torch.Tensor, search_levels: dict[int, torch.Tensor],
                       template_roi: dict[int, torch.Tensor], grid: GridSpec,
                       score_fn: ScoreFn, mode: str = "all", k: int = 64,
                       prior: torch.Tensor | None = None) -> MatchingScoreMap:
    """Score every (or the top-``k``) location's decoded box against the template ROI.

    ``reg_map`` is ``(4, S, S)`` distances for one search patch, ``search_levels``
    maps level to ``(C, H, W)`` features and ``template_roi`` level to
    ``(C, 7, 7)``.  ``score_fn(template_rois, query_rois)`` receives per-level
    ``(K, C, 7, 7)`` tensors and returns ``(K,)`` scores averaged over levels.
    Unevaluated locations keep the neutral value 1; degenerate boxes score 0.
    """
    s = grid.size
    px, py = grid.points()
    d = reg_map.permute(1, 2, 0).reshape(-1, 4)
    ptx = torch.as_tensor(px.reshape(-1), dtype=d.dtype)
    pty = torch.as_tensor(py.reshape(-1), dtype=d.dtype)
    boxes, valid = decode_boxes(ptx, pty, d)

    if mode == "all":
        chosen = torch.arange(s * s)
    elif mode == "topk":
        if prior is None:
            raise ValueError("topk mode needs a prior score map")
        chosen = torch.argsort(prior.reshape(-1), descending=True, stable=True)[:k]
    else:
        raise ValueError(f"unknown matching mode {mode!r}")

    values = torch.full((s * s,), NEUTRAL, dtype=d.dtype)
    evaluated = np.zeros(s * s, dtype=bool)
    evaluated[chosen.numpy()] = True
    ok = chosen[valid[chosen]]
    bad = chosen[~valid[chosen]]
    values[bad] = 0.0
    if len(ok):
        fboxes = patch_to_feature(boxes[ok])
        query = {lvl: prroi_pool(feat, fboxes) for lvl, feat in search_levels.items()}
        support = {lvl: roi.unsqueeze(0).expand(len(ok), *roi.shape) for lvl, roi in template_roi.items()}
        values[ok] = score_fn(support, query).to(values.dtype)
    return MatchingScoreMap(values.reshape(s, s), evaluated.reshape(s, s), int(len(bad)))
