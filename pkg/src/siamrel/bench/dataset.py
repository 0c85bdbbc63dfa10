"""OTB-style sequence directories: ``img/000001.png`` frames plus ``groundtruth.txt``."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import BBox
from .synth import TAG_NAMES, Sequence, SequenceSpec

_SPLIT = re.compile(r"[,\t ]+")


class SequenceFormatError(ValueError):
    pass


def write_sequence(seq: Sequence, root, spec: SequenceSpec | None = None) -> Path:
    root = Path(root)
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames, start=1):
        Image.fromarray(frame).save(img_dir / f"{i:06d}.png")
    with open(root / "groundtruth.txt", "w") as fh:
        for b in seq.boxes:
            fh.write(",".join(f"{v:.10g}" for v in b.xywh()) + "\n")
    with open(root / "attributes.txt", "w") as fh:
        fh.write("# " + ",".join(TAG_NAMES) + "\n")
        for row in seq.tags:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    if spec is not None:
        (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return root


def parse_groundtruth(path) -> list[BBox]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p for p in _SPLIT.split(text) if p]
            try:
                if len(parts) != 4:
                    raise ValueError(f"expected 4 values, got {len(parts)}")
                x, y, w, h = (float(p) for p in parts)
                boxes.append(BBox.from_xywh(x, y, w, h))
            except ValueError as exc:
                raise SequenceFormatError(f"{path}: malformed line {lineno}: {text!r} ({exc})") from None
    return boxes


def _frame_files(img_dir: Path) -> list[Path]:
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    return files


def load_sequence(path) -> Sequence:
    path = Path(path)
    img_dir = path / "img"
    if not img_dir.is_dir():
        raise SequenceFormatError(f"{path}: missing img/ directory")
    files = _frame_files(img_dir)
    boxes = parse_groundtruth(path / "groundtruth.txt")
    if len(files) != len(boxes):
        raise SequenceFormatError(
            f"{path}: {len(files)} frames but {len(boxes)} ground-truth boxes")
    frames = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    tags = np.zeros((len(frames), len(TAG_NAMES)), dtype=bool)
    attr = path / "attributes.txt"
    if attr.exists():
        rows = [line.strip() for line in attr.read_text().splitlines()
                if line.strip() and not line.startswith("#")]
        if len(rows) == len(frames):
            tags = np.array([[bool(int(v)) for v in r.split(",")] for r in rows], dtype=bool)
    return Sequence(path.name, frames, boxes, tags)


def find_sequences(root) -> list[Path]:
    root = Path(root)
    if (root / "groundtruth.txt").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "groundtruth.txt").exists())


def load_dataset(root) -> list[Sequence]:
    return [load_sequence(p) for p in find_sequences(root)]
