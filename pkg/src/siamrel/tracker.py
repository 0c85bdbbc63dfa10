"""Stateful single-object tracking with the relation-refined classification map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .crop import Patch, crop_search, crop_template
from .features import FeaturePyramid, patch_tensor
from .geometry import BBox, GridSpec, decode_box
from .model import SiamRelationNet
from .refinement import MatchingScoreMap, build_matching_map, refine_cls


@dataclass
class TrackerConfig:
    window_influence: float = 0.4
    size_lr: float = 0.3
    matching_mode: str = "topk"
    topk: int = 64
    ablate_no_rd: bool = False
    min_size: float = 4.0


@dataclass
class TrackerState:
    template: FeaturePyramid
    template_roi: dict[int, torch.Tensor]  # level -> (C, 7, 7)
    box: BBox
    frame_index: int = 1
    diagnostics: list[dict] = field(default_factory=list)


def cosine_window(size: int) -> np.ndarray:
    w = np.hanning(size)
    return np.outer(w, w)


def select_box(cls_logits: torch.Tensor, reg_map: torch.Tensor, grid: GridSpec, prev_box: BBox,
               patch: Patch, window_influence: float = 0.4, size_lr: float = 0.3,
               frame_shape: tuple[int, int] | None = None, min_size: float = 4.0):
    """Pick the best location and turn its decoded box into the new frame-space estimate.

    Score is ``p_target * window ** window_influence``; ties go to the first
    location in row-major order.  The box centre comes from the candidate and
    its size is smoothed with ``size_lr``.  Returns ``(box, (iy, ix), prob)``.
    """
    prob = torch.softmax(cls_logits, dim=0)[1].detach().cpu().double().numpy()
    score = prob * cosine_window(grid.size) ** window_influence if window_influence else prob
    flat = int(np.argmax(score))
    iy, ix = divmod(flat, grid.size)
    px, py = grid.index_to_point(iy, ix)
    d = reg_map[:, iy, ix].detach().cpu().double().numpy()
    cand = patch.box_to_frame(decode_box((px, py), d))
    w = (1 - size_lr) * prev_box.w + size_lr * cand.w
    h = (1 - size_lr) * prev_box.h + size_lr * cand.h
    cx, cy = cand.cx, cand.cy
    w, h = max(w, min_size), max(h, min_size)
    if frame_shape is not None:
        fh, fw = frame_shape
        cx = float(np.clip(cx, 0, fw))
        cy = float(np.clip(cy, 0, fh))
        w, h = min(w, fw), min(h, fh)
    if not np.isfinite([cx, cy, w, h]).all():
        cx, cy, w, h = prev_box.cx, prev_box.cy, prev_box.w, prev_box.h
    return BBox.from_center(cx, cy, w, h), (iy, ix), float(prob[iy, ix])


class Tracker:
    def __init__(self, model: SiamRelationNet, config: TrackerConfig | None = None):
        self.model = model.eval()
        self.config = config or TrackerConfig()
        self.grid = GridSpec()
        self.state: TrackerState | None = None

    @torch.no_grad()
    def init(self, frame: np.ndarray, box: BBox) -> TrackerState:
        box.require_area()
        patch = crop_template(frame, box)
        pyr_z = self.model.template(patch_tensor(patch))
        b = patch.box_to_patch(box)
        roi = self.model.template_roi(pyr_z, torch.tensor([[b.x0, b.y0, b.x1, b.y1]], dtype=torch.float32))
        self.state = TrackerState(pyr_z, {lvl: r[0] for lvl, r in roi.items()}, box)
        return self.state

    def _use_rd(self) -> bool:
        return self.model.rd is not None and not self.config.ablate_no_rd

    @torch.no_grad()
    def update(self, frame: np.ndarray):
        if self.state is None:
            raise RuntimeError("tracker not initialised")
        st, cfg, model = self.state, self.config, self.model
        patch = crop_search(frame, st.box)
        pyr_x = model.search(patch_tensor(patch))
        out = model.correlate(st.template, pyr_x)
        cls_corr, reg = out.cls_corr[0], out.reg[0]
        plain_logits = refine_cls(model.refine, cls_corr, torch.ones(cls_corr.shape[-2:]))
        plain_prob = torch.softmax(plain_logits, 0)[1]
        if self._use_rd():
            m = build_matching_map(reg, {lvl: f[0] for lvl, f in pyr_x.full.items()}, st.template_roi,
                                   self.grid, model.relation, cfg.matching_mode, cfg.topk, prior=plain_prob)
            logits = refine_cls(model.refine, cls_corr, m)
        else:
            m = MatchingScoreMap(torch.ones(cls_corr.shape[-2:]), np.zeros(cls_corr.shape[-2:], dtype=bool))
            logits = plain_logits
        box, (iy, ix), conf = select_box(logits, reg, self.grid, st.box, patch, cfg.window_influence,
                                         cfg.size_lr, frame.shape[:2], cfg.min_size)
        st.box = box
        st.frame_index += 1
        diag = {
            "frame": st.frame_index,
            "argmax": (iy, ix),
            "score_pre": float(plain_prob[iy, ix]),
            "score_post": conf,
            "matching_at_argmax": float(m.values[iy, ix]),
            "degenerate": m.degenerate,
            "matching_map": m.values.numpy(),
            "cls_map": torch.softmax(logits, 0)[1].numpy(),
        }
        st.diagnostics.append({k: v for k, v in diag.items() if not k.endswith("_map")})
        return box, conf, diag
