"""Seeded synthetic sequences: a textured target among look-alike distractors over clutter."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

import cv2
import numpy as np

from ..geometry import BBox

SHAPES = ("ellipse", "rect", "diamond")
TAG_NAMES = ("occluded", "fast_motion", "near_distractor")


@dataclass
class SequenceSpec:
    n_frames: int = 60
    canvas: tuple[int, int] = (240, 320)  # (height, width)
    target_size: tuple[float, float] | None = None  # (w, h); drawn from the seed when None
    target_color: tuple[float, float, float] | None = None
    texture_seed: int | None = None
    shape: str | None = None
    distractors: int = 3
    similarity: float = 0.8
    speed: float = 3.0
    jitter: float = 0.5
    fast_threshold: float = 6.0
    occlusions: list[tuple[int, int]] = field(default_factory=list)  # [start, end) frame spans
    illumination: float = 0.1
    scale_drift: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sequence spec fields {sorted(unknown)}")
        d = dict(d)
        for key in ("canvas", "target_size", "target_color"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "occlusions" in d:
            d["occlusions"] = [tuple(span) for span in d["occlusions"]]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sequence:
    name: str
    frames: list[np.ndarray]  # uint8 (H, W, 3)
    boxes: list[BBox]
    tags: np.ndarray  # (n_frames, len(TAG_NAMES)) bool

    def __len__(self) -> int:
        return len(self.frames)

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.frames:
            h.update(np.ascontiguousarray(f).tobytes())
        return h.hexdigest()


@dataclass
class _Appearance:
    color: np.ndarray  # (3,)
    accent: np.ndarray  # (3,)
    pattern: np.ndarray  # (4, 4) in [0, 1]
    shape: str

    def blend(self, other: "_Appearance", s: float, rng: np.random.Generator) -> "_Appearance":
        """Interpolate from ``other`` (s=0) to a clone of ``self`` (s=1)."""
        shape = self.shape if rng.random() < s else other.shape
        return _Appearance(s * self.color + (1 - s) * other.color,
                           s * self.accent + (1 - s) * other.accent,
                           s * self.pattern + (1 - s) * other.pattern, shape)


def _random_appearance(rng: np.random.Generator, color=None, shape=None) -> _Appearance:
    base = np.asarray(color, dtype=np.float64) if color is not None else rng.uniform(0.1, 0.95, 3)
    accent = rng.uniform(0.05, 0.95, 3)
    pattern = (rng.random((4, 4)) > 0.5).astype(np.float64)
    return _Appearance(base, accent, pattern, shape or SHAPES[rng.integers(len(SHAPES))])


def _mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "ellipse":
        m = u ** 2 + v ** 2 <= 1.0
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    else:
        m = np.ones((h, w), dtype=bool)
    return m


def _sprite(app: _Appearance, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    pat = cv2.resize(app.pattern.astype(np.float32), (w, h), interpolation=cv2.INTER_NEAREST)[..., None]
    img = pat * app.accent[None, None] + (1 - pat) * app.color[None, None]
    return img.astype(np.float32), _mask(app.shape, w, h)


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.7, (6, 8, 3)).astype(np.float32)
    bg = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    for _ in range(int(height * width / 900)):
        x, y = rng.integers(0, width), rng.integers(0, height)
        r = int(rng.integers(2, 7))
        col = rng.uniform(0.2, 0.8, 3)
        col = tuple(float(c) for c in 0.5 * col + 0.5 * bg[y, x])
        if rng.random() < 0.5:
            cv2.circle(bg, (int(x), int(y)), r, col, -1)
        else:
            cv2.rectangle(bg, (int(x), int(y)), (int(x + r), int(y + r)), col, -1)
    return np.clip(bg, 0, 1)


class _Mover:
    def __init__(self, rng, canvas, size, speed, jitter):
        self.rng = rng
        self.h, self.w = canvas
        self.size = np.asarray(size, dtype=np.float64)
        self.pos = np.array([rng.uniform(self.size[0] / 2, self.w - self.size[0] / 2),
                             rng.uniform(self.size[1] / 2, self.h - self.size[1] / 2)])
        ang = rng.uniform(0, 2 * np.pi)
        self.vel = speed * np.array([np.cos(ang), np.sin(ang)])
        self.speed = speed
        self.jitter = jitter

    def step(self, size=None):
        if size is not None:
            self.size = np.asarray(size, dtype=np.float64)
        self.vel = self.vel + self.rng.normal(0, self.jitter, 2)
        norm = np.linalg.norm(self.vel)
        lo, hi = 0.5 * self.speed, 2.5 * self.speed
        if norm > 0 and not lo <= norm <= hi:
            self.vel *= np.clip(norm, lo, hi) / norm
        self.pos = self.pos + self.vel
        half = self.size / 2
        for k, lim in ((0, self.w), (1, self.h)):
            if self.pos[k] < half[k]:
                self.pos[k] = 2 * half[k] - self.pos[k]
                self.vel[k] = abs(self.vel[k])
            elif self.pos[k] > lim - half[k]:
                self.pos[k] = 2 * (lim - half[k]) - self.pos[k]
                self.vel[k] = -abs(self.vel[k])
            self.pos[k] = float(np.clip(self.pos[k], half[k], lim - half[k]))


def _paste(canvas: np.ndarray, sprite: np.ndarray, mask: np.ndarray, x0: int, y0: int):
    h, w = mask.shape
    H, W = canvas.shape[:2]
    xa, ya = max(x0, 0), max(y0, 0)
    xb, yb = min(x0 + w, W), min(y0 + h, H)
    if xa >= xb or ya >= yb:
        return
    sub = canvas[ya:yb, xa:xb]
    m = mask[ya - y0:yb - y0, xa - x0:xb - x0]
    sub[m] = sprite[ya - y0:yb - y0, xa - x0:xb - x0][m]


def _fill_defaults(spec: SequenceSpec, rng: np.random.Generator) -> SequenceSpec:
    h, w = spec.canvas
    size = spec.target_size
    if size is None:
        side = rng.uniform(24, 40)
        aspect = rng.uniform(0.75, 1.33)
        size = (side * np.sqrt(aspect), side / np.sqrt(aspect))
    if size[0] >= w or size[1] >= h or min(size) <= 0:
        raise ValueError(f"target size {size} does not fit canvas {spec.canvas}")
    return replace(spec, target_size=tuple(float(v) for v in size))


def gen_sequence(spec: SequenceSpec, name: str = "seq") -> Sequence:
    """Render a sequence; the same spec always yields byte-identical frames."""
    rng = np.random.default_rng(spec.seed)
    spec = _fill_defaults(spec, rng)
    H, W = spec.canvas
    tex_rng = np.random.default_rng(spec.texture_seed) if spec.texture_seed is not None else rng
    target_app = _random_appearance(tex_rng, spec.target_color, spec.shape)
    background = _background(rng, H, W)

    tw, th = spec.target_size
    target = _Mover(rng, (H, W), (tw, th), spec.speed, spec.jitter)
    distractors = []
    for _ in range(spec.distractors):
        app = target_app.blend(_random_appearance(rng), spec.similarity, rng)
        f = rng.uniform(0.85, 1.15)
        distractors.append((app, _Mover(rng, (H, W), (tw * f, th * f), spec.speed, spec.jitter)))
    scale_phase = rng.uniform(0, 2 * np.pi)
    light_phase = rng.uniform(0, 2 * np.pi)
    occluder_color = rng.uniform(0.2, 0.8, 3)

    frames, boxes, tags = [], [], []
    prev_center = None
    for t in range(spec.n_frames):
        s = 1.0 + spec.scale_drift * np.sin(2 * np.pi * t / 50 + scale_phase)
        if t > 0:
            target.step((tw * s, th * s))
            for _, mover in distractors:
                mover.step()
        canvas = background.copy()
        near = False
        for app, mover in distractors:
            dw, dh = (int(round(v)) for v in mover.size)
            sprite, mask = _sprite(app, max(dw, 2), max(dh, 2))
            _paste(canvas, sprite, mask, int(round(mover.pos[0] - dw / 2)), int(round(mover.pos[1] - dh / 2)))
            if np.linalg.norm(mover.pos - target.pos) < 1.5 * max(target.size):
                near = True
        bw, bh = (max(int(round(v)), 2) for v in target.size)
        x0 = int(round(target.pos[0] - bw / 2))
        y0 = int(round(target.pos[1] - bh / 2))
        sprite, mask = _sprite(target_app, bw, bh)
        _paste(canvas, sprite, mask, x0, y0)
        occluded = any(a <= t < b for a, b in spec.occlusions)
        if occluded:
            ow, oh = int(bw * 1.2), int(bh * 1.2)
            cv2.rectangle(canvas, (x0 - (ow - bw) // 2, y0 - (oh - bh) // 2),
                          (x0 - (ow - bw) // 2 + ow, y0 - (oh - bh) // 2 + oh),
                          tuple(float(c) for c in occluder_color), -1)
        light = 1.0 + spec.illumination * np.sin(2 * np.pi * t / 40 + light_phase)
        frame = np.clip(canvas * light, 0, 1)
        frames.append((frame * 255 + 0.5).astype(np.uint8))
        boxes.append(BBox.from_xywh(float(x0), float(y0), float(bw), float(bh)))
        center = np.array([x0 + bw / 2, y0 + bh / 2])
        fast = prev_center is not None and np.linalg.norm(center - prev_center) > spec.fast_threshold
        prev_center = center
        tags.append((occluded, fast, near))
    return Sequence(name, frames, boxes, np.array(tags, dtype=bool))


def dataset_specs(base: SequenceSpec, count: int, seed: int) -> list[SequenceSpec]:
    """``count`` specs sharing ``base`` settings with independent per-sequence seeds."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(count)]
    return [replace(base, seed=s) for s in seeds]


def gen_dataset(base: SequenceSpec, count: int, seed: int, prefix: str = "seq") -> list[Sequence]:
    return [gen_sequence(spec, f"{prefix}_{i:03d}") for i, spec in enumerate(dataset_specs(base, count, seed))]
