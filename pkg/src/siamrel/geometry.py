"""Boxes, IoU, elliptical label assignment and regression target coding.

Coordinates are continuous pixel coordinates: a patch of side ``n`` spans
``[0, n]`` and the centre of pixel ``k`` sits at ``k + 0.5``.  Per-location
maps are stored row-major as ``[y_index, x_index]``.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
import torch


class DegenerateBoxError(ValueError):
    """Raised when a box with zero width or height is used as a target."""


class DegenerateBoxWarning(UserWarning):
    pass


class Label(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    IGNORE = -1


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"inverted box {vals}")

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(x, y, x + w, y + h)

    @property
    def w(self) -> float:
        return self.x1 - self.x0

    @property
    def h(self) -> float:
        return self.y1 - self.y0

    @property
    def cx(self) -> float:
        return (self.x0 + self.x1) / 2

    @property
    def cy(self) -> float:
        return (self.y0 + self.y1) / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    def require_area(self) -> "BBox":
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"box {self} has zero width or height")
        return self


@dataclass(frozen=True)
class GridSpec:
    """Score-map locations projected into search-patch pixels.

    Location ``k`` along either axis sits at ``origin + stride * k``.  When
    ``origin`` is omitted the grid is centred in a ``patch_size`` patch.
    """

    size: int = 25
    stride: float = 8.0
    patch_size: int = 255
    origin: float | None = None

    @property
    def offset(self) -> float:
        if self.origin is not None:
            return float(self.origin)
        return (self.patch_size - self.stride * (self.size - 1)) / 2

    def coords(self) -> np.ndarray:
        return self.offset + self.stride * np.arange(self.size, dtype=np.float64)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(px, py)`` meshes of shape ``(size, size)``, indexed ``[y, x]``."""
        c = self.coords()
        return np.meshgrid(c, c, indexing="xy")

    def index_to_point(self, iy: int, ix: int) -> tuple[float, float]:
        return self.offset + self.stride * ix, self.offset + self.stride * iy

    def point_to_index(self, px: float, py: float) -> tuple[float, float]:
        return (py - self.offset) / self.stride, (px - self.offset) / self.stride


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU between broadcastable ``(..., 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """``1 - IoU`` for corner-form tensors of shape ``(..., 4)``.

    Differentiable in ``pred`` wherever the intersection edges are not tied.
    """
    iw = (torch.minimum(pred[..., 2], gt[..., 2]) - torch.maximum(pred[..., 0], gt[..., 0])).clamp(min=0)
    ih = (torch.minimum(pred[..., 3], gt[..., 3]) - torch.maximum(pred[..., 1], gt[..., 1])).clamp(min=0)
    inter = iw * ih
    area_p = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    area_g = (gt[..., 2] - gt[..., 0]) * (gt[..., 3] - gt[..., 1])
    union = area_p + area_g - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    ratio = torch.where(union > 0, inter / (safe + eps), torch.zeros_like(union))
    return 1.0 - ratio


def ellipse_values(gt: BBox, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic-form values of the outer (half-size axes) and inner (quarter-size) ellipses."""
    px, py = grid.points()
    dx2 = (px - gt.cx) ** 2
    dy2 = (py - gt.cy) ** 2
    outer = dx2 / (gt.w / 2) ** 2 + dy2 / (gt.h / 2) ** 2
    inner = dx2 / (gt.w / 4) ** 2 + dy2 / (gt.h / 4) ** 2
    return outer, inner


def assign_labels(gt: BBox, grid: GridSpec) -> np.ndarray:
    """Per-location labels: positive inside the inner ellipse, negative outside the outer one.

    A value of exactly 1 counts as inside either ellipse, so the box centre is
    always positive.  Returns an ``int8`` array of :class:`Label` values.
    """
    gt.require_area()
    outer, inner = ellipse_values(gt, grid)
    labels = np.full(outer.shape, Label.IGNORE, dtype=np.int8)
    labels[outer > 1] = Label.NEGATIVE
    labels[inner <= 1] = Label.POSITIVE
    return labels


def encode_regression(gt: BBox, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Distances ``(left, top, right, bottom)`` from every location to the box sides.

    Returns ``(targets, mask)`` with ``targets`` of shape ``(S, S, 4)`` and the
    boolean validity mask marking positive locations.
    """
    labels = assign_labels(gt, grid)
    px, py = grid.points()
    targets = np.stack([px - gt.x0, py - gt.y0, gt.x1 - px, gt.y1 - py], axis=-1)
    return targets, labels == Label.POSITIVE


def decode_box(point: tuple[float, float], d) -> BBox:
    """Inverse of :func:`encode_regression` at one location.

    If the distances describe an inverted box the result is clamped to a
    zero-area box at the midpoint and a :class:`DegenerateBoxWarning` is issued.
    """
    px, py = point
    dl, dt, dr, db = (float(v) for v in d)
    x0, y0, x1, y1 = px - dl, py - dt, px + dr, py + db
    if x1 < x0 or y1 < y0:
        warnings.warn(f"decoded box ({x0}, {y0}, {x1}, {y1}) is inverted", DegenerateBoxWarning)
        if x1 < x0:
            x0 = x1 = (x0 + x1) / 2
        if y1 < y0:
            y0 = y1 = (y0 + y1) / 2
    return BBox(x0, y0, x1, y1)


def decode_boxes(px, py, d):
    """Vectorised decode for numpy arrays or tensors.

    ``px``/``py`` broadcast against ``d[..., 0]``.  Returns ``(boxes, valid)``
    where ``valid`` is false for boxes with non-positive width or height.
    Inverted boxes are left as produced; callers decide how to treat them.
    """
    if isinstance(d, torch.Tensor):
        boxes = torch.stack([px - d[..., 0], py - d[..., 1], px + d[..., 2], py + d[..., 3]], dim=-1)
    else:
        d = np.asarray(d, dtype=np.float64)
        boxes = np.stack([px - d[..., 0], py - d[..., 1], px + d[..., 2], py + d[..., 3]], axis=-1)
    valid = (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1])
    return boxes, valid


def center_error(a: BBox, b: BBox) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))
