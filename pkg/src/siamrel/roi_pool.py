"""Precise ROI pooling.

The bilinear interpolant of a feature map is a sum of separable hat functions
centred on the cells, so the integral over a bin factors into per-axis
integrals of the hat.  Those have a closed-form antiderivative, which makes
the pooled value exact and differentiable in the box coordinates.

Feature cell ``(i, j)`` sits at coordinate ``(x=j, y=i)``; reads outside the
map are zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class RoiFeature:
    features: torch.Tensor  # (C, out, out)
    box: torch.Tensor  # (4,) in feature coordinates


def _hat_integral(t: torch.Tensor) -> torch.Tensor:
    t = t.clamp(-1.0, 1.0)
    return torch.where(t < 0, 0.5 * (t + 1.0) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def _hat(t: torch.Tensor) -> torch.Tensor:
    return (1.0 - t.abs()).clamp(min=0.0)


def _axis_weights(lo: torch.Tensor, hi: torch.Tensor, n_cells: int, out: int, sampled: bool) -> torch.Tensor:
    """Weights ``(..., out, n_cells)`` giving each bin's average of the 1-D hat basis."""
    steps = torch.arange(out + 1, dtype=lo.dtype, device=lo.device) / out
    edges = lo[..., None] + (hi - lo)[..., None] * steps  # (..., out + 1)
    cells = torch.arange(n_cells, dtype=lo.dtype, device=lo.device)
    if sampled:
        a = edges[..., :-1, None]
        b = edges[..., 1:, None]
        s1 = a + 0.25 * (b - a)
        s2 = a + 0.75 * (b - a)
        return 0.5 * (_hat(s1 - cells) + _hat(s2 - cells))
    cum = _hat_integral(edges[..., None] - cells)  # (..., out + 1, n_cells)
    width = ((hi - lo) / out)[..., None, None]
    return (cum[..., 1:, :] - cum[..., :-1, :]) / width


def prroi_pool(features: torch.Tensor, boxes: torch.Tensor, out: int = 7, sampled: bool = False) -> torch.Tensor:
    """Pool ``out x out`` bins from ``features`` for every box.

    ``features`` is ``(C, H, W)`` with boxes ``(K, 4)``, or ``(B, C, H, W)``
    with boxes ``(B, K, 4)``.  Boxes are ``(x0, y0, x1, y1)`` in feature
    coordinates.  Returns ``(K, C, out, out)`` or ``(B, K, C, out, out)``.

    ``sampled=True`` averages two samples per bin axis instead of integrating;
    faster-looking but not exact, so it is not used where gradients matter.
    """
    single = features.dim() == 3
    if single:
        features = features.unsqueeze(0)
        boxes = boxes.unsqueeze(0)
    if boxes.shape[0] != features.shape[0] or boxes.shape[-1] != 4:
        raise ValueError(f"boxes {tuple(boxes.shape)} do not match features {tuple(features.shape)}")
    boxes = boxes.to(features.dtype)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    if bool(((w <= 0) | (h <= 0)).any()):
        raise ValueError("prroi_pool requires boxes with positive area")
    _, _, H, W = features.shape
    wx = _axis_weights(boxes[..., 0], boxes[..., 2], W, out, sampled)  # (B, K, out, W)
    wy = _axis_weights(boxes[..., 1], boxes[..., 3], H, out, sampled)  # (B, K, out, H)
    pooled = torch.einsum("bkah,bchw,bkgw->bkcag", wy, features, wx)
    return pooled[0] if single else pooled


def prroi_pool_one(feature: torch.Tensor, box, out: int = 7) -> RoiFeature:
    box_t = torch.as_tensor(box, dtype=feature.dtype).reshape(4)
    return RoiFeature(prroi_pool(feature, box_t[None], out)[0], box_t)
