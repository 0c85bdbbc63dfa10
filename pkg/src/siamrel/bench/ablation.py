"""Train-and-evaluate harness for ablation matrices.

A matrix is a JSON-able dict::

    {
      "data_seed": 0,
      "seeds": [0, 1, 2],
      "train": {...TrainConfig fields...},
      "tracker": {...TrackerConfig fields...},
      "protocols": ["ope", "restart"],
      "variants": [
        {"name": "full"},
        {"name": "no_rd", "train": {"model": {"use_rd": false}}},
        {"name": "no_rd_same_ckpt", "reuse": "full", "tracker": {"ablate_no_rd": true}},
        ...
      ],
      "sweep": "heads" | "levels"      # optional, expands into one variant per subset
    }

Every row of one matrix is trained and evaluated on the same data, and the
data seed is written into each row.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from ..features import LEVELS
from ..relation import head_subsets
from ..tracker import Tracker, TrackerConfig
from ..training.config import TrainConfig
from ..training.trainer import train
from .metrics import run_ope, run_restart
from .synth import SequenceSpec, gen_dataset

log = logging.getLogger(__name__)

COLUMNS = ("variant", "seed", "data_seed", "auc", "precision20", "failures", "train_seconds", "eval_seconds")


@dataclass
class AblationData:
    train: list
    eval: list


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def level_subsets(levels=LEVELS) -> list[tuple[int, ...]]:
    return [c for r in range(1, len(levels) + 1) for c in itertools.combinations(levels, r)]


def expand_variants(matrix: dict) -> list[dict]:
    """Explicit variants plus those generated by ``sweep``."""
    variants = list(matrix.get("variants", []))
    sweep = matrix.get("sweep")
    if sweep == "heads":
        variants += [{"name": "heads=" + "+".join(h), "train": {"model": {"heads": list(h)}}}
                     for h in head_subsets()]
    elif sweep == "levels":
        variants += [{"name": "levels=" + "+".join(map(str, lv)), "train": {"model": {"levels": list(lv)}}}
                     for lv in level_subsets()]
    elif sweep is not None:
        raise ValueError(f"unknown sweep {sweep!r}")
    if not variants:
        variants = [{"name": "default"}]
    names = [v["name"] for v in variants]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    return variants


def _as_data(data) -> AblationData:
    if isinstance(data, AblationData):
        return data
    if isinstance(data, dict):
        return AblationData(data["train"], data["eval"])
    return AblationData(list(data), list(data))


def matrix_data(matrix: dict) -> AblationData:
    """Generate the train/eval split described by ``matrix["data"]``.

    Eval sequences use ``data_seed``; training sequences use ``data_seed + 1000``
    so the two never share a sequence seed.
    """
    d = matrix.get("data", {})
    base = SequenceSpec.from_dict(d.get("spec", {}))
    seed = matrix.get("data_seed", 0)
    return AblationData(gen_dataset(base, d.get("train_count", 16), seed + 1000, "train"),
                        gen_dataset(base, d.get("eval_count", 50), seed, "eval"))


def evaluate_model(model, sequences, tracker_cfg: TrackerConfig, protocols=("ope", "restart")) -> dict:
    factory = lambda: Tracker(model, tracker_cfg)  # noqa: E731
    out = {"auc": float("nan"), "precision20": float("nan"), "failures": None}
    if "ope" in protocols:
        _, summary = run_ope(factory, sequences)
        out["auc"], out["precision20"] = summary["auc"], summary["precision20"]
    if "restart" in protocols:
        res = run_restart(factory, sequences)
        out["failures"] = sum(r.count for r in res.values())
    return out


def run_ablation(matrix: dict, data, work_dir=None) -> list[dict]:
    """Train and evaluate every variant for every seed; one row per (variant, seed)."""
    data = _as_data(data)
    seeds = list(matrix.get("seeds", [0]))
    data_seed = matrix.get("data_seed", 0)
    protocols = tuple(matrix.get("protocols", ("ope", "restart")))
    base_train = matrix.get("train", {})
    base_tracker = matrix.get("tracker", {})
    variants = expand_variants(matrix)
    work_dir = Path(work_dir) if work_dir is not None else None
    log.info("ablation: %d variants x %d seeds, data seed %s", len(variants), len(seeds), data_seed)
    rows = []
    for seed in seeds:
        models = {}
        for var in variants:
            t0 = time.perf_counter()
            if "reuse" in var:
                if var["reuse"] not in models:
                    raise ValueError(f"variant {var['name']!r} reuses unknown or later variant {var['reuse']!r}")
                model = models[var["reuse"]]
            else:
                cfg = TrainConfig.from_dict(_merge(base_train, {**var.get("train", {}), "seed": seed}))
                out = work_dir / var["name"] / f"seed{seed}" if work_dir is not None else None
                model = train(cfg, data.train, out).model
            models[var["name"]] = model
            t1 = time.perf_counter()
            tcfg = TrackerConfig(**_merge(base_tracker, var.get("tracker", {})))
            metrics = evaluate_model(model, data.eval, tcfg, protocols)
            row = {"variant": var["name"], "seed": seed, "data_seed": data_seed, **metrics,
                   "train_seconds": round(t1 - t0, 3), "eval_seconds": round(time.perf_counter() - t1, 3)}
            log.info("ablation row %s", row)
            rows.append(row)
    return rows


def median_by_variant(rows: list[dict]) -> dict[str, dict]:
    """Median AUC / precision / failures over seeds for each variant."""
    out: dict[str, dict] = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        agg = {}
        for key in ("auc", "precision20", "failures"):
            vals = [r[key] for r in sel if r[key] is not None]
            agg[key] = statistics.median(vals) if vals else None
        agg["seeds"] = [r["seed"] for r in sel]
        out[name] = agg
    return out


def write_table(rows: list[dict], path) -> Path:
    """CSV table plus a JSON twin (``.json`` next to it) with per-variant medians."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k) for k in COLUMNS})
    path.with_suffix(".json").write_text(json.dumps({"rows": rows, "median": median_by_variant(rows)}, indent=2))
    return path
