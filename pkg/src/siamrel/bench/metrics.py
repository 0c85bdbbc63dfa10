"""One-pass evaluation and a restart-based robustness count."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..geometry import BBox, center_error, iou

THRESHOLDS = np.linspace(0.0, 1.0, 21)


@dataclass
class OpeResult:
    name: str
    ious: np.ndarray
    center_errors: np.ndarray
    success: np.ndarray = field(init=False)
    auc: float = field(init=False)
    precision20: float = field(init=False)
    failures: int = 0

    def __post_init__(self):
        self.success = success_curve(self.ious)
        self.auc = float(self.success.mean())
        self.precision20 = precision_at(self.center_errors, 20.0)

    def to_dict(self) -> dict:
        return {"name": self.name, "auc": self.auc, "precision20": self.precision20,
                "failures": self.failures, "frames": int(len(self.ious)),
                "success": self.success.tolist()}


def success_curve(ious) -> np.ndarray:
    """Fraction of frames whose IoU strictly exceeds each threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return np.zeros_like(THRESHOLDS)
    return (ious[None, :] > THRESHOLDS[:, None]).mean(axis=1)


def precision_at(center_errors, radius: float = 20.0) -> float:
    errs = np.asarray(center_errors, dtype=np.float64)
    if errs.size == 0:
        return 0.0
    return float((errs <= radius).mean())


def _box_of(result) -> BBox:
    return result[0] if isinstance(result, tuple) else result


def track_sequence(tracker, seq) -> list[BBox]:
    """Initialise on frame 0 and return one box per frame, the first being the init box."""
    tracker.init(seq.frames[0], seq.boxes[0])
    out = [seq.boxes[0]]
    for frame in seq.frames[1:]:
        out.append(_box_of(tracker.update(frame)))
    return out


def evaluate_boxes(name: str, pred: list[BBox], gt: list[BBox]) -> OpeResult:
    """Score frames 1..n-1; frame 0 is the initialisation frame and is excluded."""
    ious = np.array([iou(p, g) for p, g in zip(pred[1:], gt[1:])])
    errs = np.array([center_error(p, g) for p, g in zip(pred[1:], gt[1:])])
    return OpeResult(name, ious, errs)


def summarize(results: Iterable[OpeResult]) -> dict:
    results = list(results)
    if not results:
        return {"auc": 0.0, "precision20": 0.0, "failures": 0}
    ious = np.concatenate([r.ious for r in results])
    errs = np.concatenate([r.center_errors for r in results])
    return {
        "auc": float(success_curve(ious).mean()),
        "precision20": precision_at(errs),
        "failures": int(sum(r.failures for r in results)),
        "sequences": len(results),
    }


def run_ope(tracker_factory: Callable[[], object], sequences) -> tuple[list[OpeResult], dict]:
    results = []
    for seq in sequences:
        pred = track_sequence(tracker_factory(), seq)
        results.append(evaluate_boxes(seq.name, pred, seq.boxes))
    return results, summarize(results)


@dataclass
class RestartResult:
    name: str
    failures: list[int]  # frame indices where a failure was declared
    reinits: list[int]

    @property
    def count(self) -> int:
        return len(self.failures)


def run_restart_sequence(tracker_factory, seq, window: int = 10, delay: int = 5) -> RestartResult:
    """Declare a failure after ``window`` consecutive zero-IoU frames, re-initialise ``delay`` frames later."""
    n = len(seq)
    failures, reinits = [], []
    start = 0
    while start < n:
        tracker = tracker_factory()
        tracker.init(seq.frames[start], seq.boxes[start])
        reinits.append(start)
        zeros = 0
        failed_at = None
        for t in range(start + 1, n):
            box = _box_of(tracker.update(seq.frames[t]))
            zeros = zeros + 1 if iou(box, seq.boxes[t]) <= 0.0 else 0
            if zeros >= window:
                failed_at = t
                break
        if failed_at is None:
            break
        failures.append(failed_at)
        start = failed_at + delay
    return RestartResult(seq.name, failures, reinits)


def run_restart(tracker_factory, sequences, window: int = 10, delay: int = 5) -> dict[str, RestartResult]:
    return {seq.name: run_restart_sequence(tracker_factory, seq, window, delay) for seq in sequences}
