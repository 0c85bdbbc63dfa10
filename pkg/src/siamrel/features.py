"""Siamese feature extraction, depthwise cross-correlation and the correlation heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .crop import SEARCH_SIZE, TEMPLATE_SIZE, Patch

LEVELS = (3, 4, 5)
STRIDE = 8
# continuous patch coordinate of feature cell 0 (three stride-2 valid 3x3 convs)
FEATURE_OFFSET = 7.5
TEMPLATE_CROP = 7


def patch_to_feature(coords: torch.Tensor | np.ndarray | float):
    return (coords - FEATURE_OFFSET) / STRIDE


def template_feature_offset(full_size: int = 15, crop: int = TEMPLATE_CROP) -> int:
    return (full_size - crop) // 2


@dataclass
class FeaturePyramid:
    """Per-level feature maps, batch-first ``(B, C, H, W)``.

    For templates ``levels`` hold the centre-cropped 7x7 maps and ``full`` the
    uncropped 15x15 maps used for ROI pooling.  For search patches both are
    the same 31x31 maps.
    """

    role: str
    levels: dict[int, torch.Tensor]
    full: dict[int, torch.Tensor] = field(default_factory=dict)


@dataclass
class CorrelationOutputs:
    cls_corr: torch.Tensor  # (B, C, 25, 25), level-aggregated
    reg: torch.Tensor  # (B, 4, 25, 25) distances in patch pixels, all > 0
    cls_levels: dict[int, torch.Tensor]
    reg_raw_levels: dict[int, torch.Tensor]
    cls_weights: torch.Tensor
    reg_weights: torch.Tensor


def depthwise_xcorr(search: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Per-channel valid cross-correlation of ``search`` with ``kernel``.

    Accepts ``(C, H, W)`` or batched ``(B, C, H, W)`` inputs.
    """
    single = search.dim() == 3
    if single:
        search, kernel = search.unsqueeze(0), kernel.unsqueeze(0)
    if search.shape[:2] != kernel.shape[:2]:
        raise ValueError(f"shape mismatch: search {tuple(search.shape)} vs kernel {tuple(kernel.shape)}")
    if kernel.shape[-1] > search.shape[-1] or kernel.shape[-2] > search.shape[-2]:
        raise ValueError("kernel larger than search map")
    b, c = kernel.shape[:2]
    x = search.reshape(1, b * c, search.shape[2], search.shape[3])
    k = kernel.reshape(b * c, 1, kernel.shape[2], kernel.shape[3])
    out = F.conv2d(x, k, groups=b * c)
    out = out.reshape(b, c, out.shape[2], out.shape[3])
    return out[0] if single else out


class Backbone(nn.Module):
    """Five conv stages; stages 3-5 share a stride of 8 via dilation in 4 and 5."""

    def __init__(self, channels: int = 64, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        w1, w2 = widths
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(3, w1, 3, stride=2), nn.ReLU(inplace=True)),
            nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2), nn.ReLU(inplace=True)),
            nn.Sequential(nn.Conv2d(w2, channels, 3, stride=2), nn.ReLU(inplace=True)),
            nn.Sequential(nn.Conv2d(channels, channels, 3, padding=2, dilation=2), nn.ReLU(inplace=True)),
            nn.Sequential(nn.Conv2d(channels, channels, 3, padding=4, dilation=4), nn.ReLU(inplace=True)),
        ])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        x = x - 0.5
        out = {}
        for idx, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if idx >= 3:
                out[idx] = x
        return out


def patch_tensor(patches: Patch | list[Patch]) -> torch.Tensor:
    if isinstance(patches, Patch):
        patches = [patches]
    arr = np.stack([p.image for p in patches]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def extract_pyramid(backbone: Backbone, images: torch.Tensor, role: str,
                    levels: tuple[int, ...] = LEVELS) -> FeaturePyramid:
    """Run the backbone on a batch of patches of the size implied by ``role``."""
    expected = {"template": TEMPLATE_SIZE, "search": SEARCH_SIZE}
    if role not in expected:
        raise ValueError(f"unknown role {role!r}")
    if images.dim() != 4 or images.shape[-1] != expected[role] or images.shape[-2] != expected[role]:
        raise ValueError(f"{role} patches must be {expected[role]}x{expected[role]}, got {tuple(images.shape)}")
    feats = backbone(images)
    full = {lvl: feats[lvl] for lvl in levels}
    if role == "search":
        return FeaturePyramid(role, full, full)
    lo = template_feature_offset(full[levels[0]].shape[-1])
    cropped = {lvl: f[:, :, lo:lo + TEMPLATE_CROP, lo:lo + TEMPLATE_CROP] for lvl, f in full.items()}
    return FeaturePyramid(role, cropped, full)


def _groups(channels: int) -> int:
    return next(g for g in (8, 4, 2, 1) if channels % g == 0)


class LevelHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.cls_z = nn.Conv2d(c, c, 1)
        self.cls_x = nn.Conv2d(c, c, 1)
        self.reg_z = nn.Conv2d(c, c, 1)
        self.reg_x = nn.Conv2d(c, c, 1)
        # per-sample normalisation keeps the raw correlation scale out of the loss landscape
        self.cls_norm = nn.GroupNorm(_groups(c), c)
        self.reg_norm = nn.GroupNorm(_groups(c), c)
        self.reg_out = nn.Sequential(nn.Conv2d(c, c, 1), nn.ReLU(inplace=True), nn.Conv2d(c, 4, 1))
        nn.init.normal_(self.reg_out[-1].weight, std=0.01)
        nn.init.constant_(self.reg_out[-1].bias, float(np.log(4.0)))

    def forward(self, z: torch.Tensor, x: torch.Tensor):
        cls = self.cls_norm(depthwise_xcorr(self.cls_x(x), self.cls_z(z)))
        reg = self.reg_norm(depthwise_xcorr(self.reg_x(x), self.reg_z(z)))
        return cls, self.reg_out(reg)


class CorrelationHead(nn.Module):
    """Per-level classification/regression correlation with softmax level weights."""

    def __init__(self, channels: int = 64, levels: tuple[int, ...] = LEVELS, stride: float = STRIDE):
        super().__init__()
        self.levels = tuple(levels)
        self.stride = stride
        self.heads = nn.ModuleDict({str(lvl): LevelHead(channels) for lvl in self.levels})
        self.cls_logit_weights = nn.Parameter(torch.zeros(len(self.levels)))
        self.reg_logit_weights = nn.Parameter(torch.zeros(len(self.levels)))

    def forward(self, pyr_z: FeaturePyramid, pyr_x: FeaturePyramid) -> CorrelationOutputs:
        if pyr_z.role != "template" or pyr_x.role != "search":
            raise ValueError("head_forward expects (template, search) pyramids")
        cls_levels, reg_levels = {}, {}
        for lvl in self.levels:
            cls_levels[lvl], reg_levels[lvl] = self.heads[str(lvl)](pyr_z.levels[lvl], pyr_x.levels[lvl])
        wc = torch.softmax(self.cls_logit_weights, 0)
        wr = torch.softmax(self.reg_logit_weights, 0)
        cls = sum(w * cls_levels[lvl] for w, lvl in zip(wc, self.levels))
        raw = sum(w * reg_levels[lvl] for w, lvl in zip(wr, self.levels))
        reg = self.stride * torch.exp(raw.clamp(-8.0, 8.0))
        return CorrelationOutputs(cls, reg, cls_levels, reg_levels, wc, wr)
