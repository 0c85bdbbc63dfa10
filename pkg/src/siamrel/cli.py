"""Command-line entry point: gen-data, train, track, eval, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .bench.ablation import matrix_data, run_ablation, write_table
from .bench.dataset import load_dataset, load_sequence, write_sequence
from .bench.metrics import evaluate_boxes, run_ope, run_restart
from .bench.synth import SequenceSpec, dataset_specs, gen_dataset
from .checkpoint import load_model
from .tracker import Tracker, TrackerConfig
from .training.config import TrainConfig
from .training.trainer import train

log = logging.getLogger("siamrel")


def _write_pgm(path: Path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of a map with values in [0, 1]."""
    img = (np.clip(values, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def format_box(box) -> str:
    return ",".join(f"{v:.4f}" for v in box.xywh())


def _tracker_config(args) -> TrackerConfig:
    cfg = TrackerConfig()
    if getattr(args, "tracker_config", None):
        cfg = TrackerConfig(**json.loads(Path(args.tracker_config).read_text()))
    if getattr(args, "ablate_no_rd", False):
        cfg.ablate_no_rd = True
    if getattr(args, "matching_mode", None):
        cfg.matching_mode = args.matching_mode
    return cfg


def cmd_gen_data(args) -> int:
    spec_json = json.loads(Path(args.spec).read_text())
    count = int(spec_json.pop("count", 1))
    seed = int(spec_json.pop("dataset_seed", spec_json.get("seed", 0)))
    base = SequenceSpec.from_dict(spec_json)
    out = Path(args.out)
    seqs = gen_dataset(base, count, seed)
    for seq, spec in zip(seqs, dataset_specs(base, count, seed)):
        write_sequence(seq, out / seq.name, spec)
    log.info("wrote %d sequences to %s", len(seqs), out)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    data = load_dataset(args.data)
    ckpt = Path(args.out)
    result = train(cfg, data, ckpt.parent, ckpt.name)
    log.info("saved %s (final loss %.4f)", result.checkpoint, result.step_losses[-1] if result.step_losses else float("nan"))
    return 0


def cmd_track(args) -> int:
    torch.set_num_threads(1)
    model = load_model(args.ckpt)
    seq = load_sequence(args.seq)
    tracker = Tracker(model, _tracker_config(args))
    tracker.init(seq.frames[0], seq.boxes[0])
    boxes = [seq.boxes[0]]
    dump = Path(args.dump_dir or args.seq) if args.dump_confidence else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    for idx in range(1, len(seq)):
        box, _, diag = tracker.update(seq.frames[idx])
        boxes.append(box)
        if dump is not None:
            _write_pgm(dump / f"{idx:06d}_matching.pgm", diag["matching_map"])
            _write_pgm(dump / f"{idx:06d}_cls.pgm", diag["cls_map"])
    out = Path(args.out) if args.out else Path(args.seq) / "results.txt"
    out.write_text("".join(format_box(b) + "\n" for b in boxes))
    res = evaluate_boxes(seq.name, boxes, seq.boxes)
    log.info("%s: AUC %.4f precision20 %.4f -> %s", seq.name, res.auc, res.precision20, out)
    return 0


def cmd_eval(args) -> int:
    torch.set_num_threads(1)
    model = load_model(args.ckpt)
    seqs = load_dataset(args.data)
    tcfg = _tracker_config(args)
    factory = lambda: Tracker(model, tcfg)  # noqa: E731
    if args.protocol == "ope":
        results, summary = run_ope(factory, seqs)
        per_seq = [r.to_dict() for r in results]
        summary["failures"] = None
    else:
        restart = run_restart(factory, seqs)
        per_seq = [{"name": r.name, "failures": r.count, "failure_frames": r.failures, "reinits": r.reinits}
                   for r in restart.values()]
        summary = {"auc": None, "precision20": None, "failures": sum(r.count for r in restart.values()),
                   "sequences": len(seqs)}
    report = {"protocol": args.protocol, "per_sequence": per_seq, "summary": summary}
    Path(args.report).write_text(json.dumps(report, indent=2))
    log.info("summary %s", summary)
    return 0


def cmd_ablate(args) -> int:
    torch.set_num_threads(1)
    matrix = json.loads(Path(args.matrix).read_text())
    if args.data:
        data = load_dataset(args.data)
        data = {"train": load_dataset(args.train_data) if args.train_data else data, "eval": data}
    else:
        data = matrix_data(matrix)
    rows = run_ablation(matrix, data, args.work_dir)
    write_table(rows, args.out)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamrel", description="Siamese relation tracker toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic sequences")
    g.add_argument("--spec", required=True, help="JSON SequenceSpec plus optional 'count' and 'dataset_seed'")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; metrics.jsonl goes next to it")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track one sequence and write results.txt")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--seq", required=True)
    k.add_argument("--out", help="results file (default: SEQ/results.txt)")
    k.add_argument("--dump-confidence", action="store_true", help="write per-frame matching/cls PGM maps")
    k.add_argument("--dump-dir", help="directory for the PGM maps (default: SEQ)")
    k.add_argument("--ablate-no-rd", action="store_true", help="fix the matching map to 1")
    k.add_argument("--matching-mode", choices=("all", "topk"))
    k.add_argument("--tracker-config", help="JSON TrackerConfig fields")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="evaluate on a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=("ope", "restart"), default="ope")
    e.add_argument("--report", required=True)
    e.add_argument("--ablate-no-rd", action="store_true")
    e.add_argument("--matching-mode", choices=("all", "topk"))
    e.add_argument("--tracker-config")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate an ablation matrix")
    a.add_argument("--matrix", required=True)
    a.add_argument("--out", required=True, help="CSV table; a JSON twin is written alongside")
    a.add_argument("--data", help="evaluation dataset directory (default: generate from the matrix)")
    a.add_argument("--train-data", help="training dataset directory (default: --data)")
    a.add_argument("--work-dir", help="where per-variant checkpoints and metrics go")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
