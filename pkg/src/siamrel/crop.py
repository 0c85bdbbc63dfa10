"""Template and search-region crops with their patch<->frame affine records."""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .geometry import BBox

TEMPLATE_SIZE = 127
SEARCH_SIZE = 255


@dataclass
class Patch:
    """Square crop of a frame.

    ``image`` is ``(size, size, 3)`` float32 in ``[0, 1]``.  A patch point
    ``u`` maps to the frame point ``u / scale + origin``.
    """

    image: np.ndarray
    scale: float
    origin: tuple[float, float]
    out_of_frame: bool = False

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def to_frame(self, x, y):
        return x / self.scale + self.origin[0], y / self.scale + self.origin[1]

    def to_patch(self, x, y):
        return (x - self.origin[0]) * self.scale, (y - self.origin[1]) * self.scale

    def box_to_frame(self, box: BBox) -> BBox:
        x0, y0 = self.to_frame(box.x0, box.y0)
        x1, y1 = self.to_frame(box.x1, box.y1)
        return BBox(x0, y0, x1, y1)

    def box_to_patch(self, box: BBox) -> BBox:
        x0, y0 = self.to_patch(box.x0, box.y0)
        x1, y1 = self.to_patch(box.x1, box.y1)
        return BBox(x0, y0, x1, y1)


def as_float_image(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    if frame.ndim == 2:
        frame = np.repeat(frame[..., None], 3, axis=-1)
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return frame.astype(np.float32, copy=False)


def context_size(box: BBox, context: float = 0.5) -> float:
    """Side of the square template region: ``sqrt((w + p)(h + p))`` with ``p = context * (w + h)``."""
    p = context * (box.w + box.h)
    return math.sqrt((box.w + p) * (box.h + p))


def crop_square(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int,
                pad_value=None) -> Patch:
    """Resample the square ``side`` x ``side`` frame region around ``center`` to ``out_size``.

    Pixels outside the frame take ``pad_value`` (per-channel frame mean by default).
    """
    img = as_float_image(frame)
    if side <= 0:
        raise ValueError(f"non-positive crop side {side}")
    if pad_value is None:
        pad_value = img.reshape(-1, img.shape[-1]).mean(axis=0)
    scale = out_size / side
    ox = center[0] - side / 2
    oy = center[1] - side / 2
    # output pixel index u has centre u + 0.5; input pixel index = frame coordinate - 0.5
    a = 1.0 / scale
    m = np.array([[a, 0.0, ox + 0.5 * a - 0.5],
                  [0.0, a, oy + 0.5 * a - 0.5]], dtype=np.float64)
    out = cv2.warpAffine(img, m, (out_size, out_size),
                         flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_CONSTANT,
                         borderValue=tuple(float(v) for v in pad_value))
    h, w = img.shape[:2]
    outside = ox + side <= 0 or oy + side <= 0 or ox >= w or oy >= h
    return Patch(out.astype(np.float32, copy=False), scale, (ox, oy), outside)


def _box_outside(frame: np.ndarray, box: BBox) -> bool:
    h, w = frame.shape[:2]
    return box.x1 <= 0 or box.y1 <= 0 or box.x0 >= w or box.y0 >= h


def crop_template(frame: np.ndarray, box: BBox, size: int = TEMPLATE_SIZE) -> Patch:
    box.require_area()
    s_z = context_size(box)
    patch = crop_square(frame, (box.cx, box.cy), s_z, size)
    patch.out_of_frame = patch.out_of_frame or _box_outside(frame, box)
    return patch


def crop_search(frame: np.ndarray, prev_box: BBox, size: int = SEARCH_SIZE,
                template_size: int = TEMPLATE_SIZE) -> Patch:
    prev_box.require_area()
    s_x = context_size(prev_box) * size / template_size
    patch = crop_square(frame, (prev_box.cx, prev_box.cy), s_x, size)
    patch.out_of_frame = patch.out_of_frame or _box_outside(frame, prev_box)
    return patch
