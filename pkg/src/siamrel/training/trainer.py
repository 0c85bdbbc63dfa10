"""End-to-end training loop: triplets -> forward -> three losses -> SGD with momentum."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import save_model
from ..features import patch_tensor, patch_to_feature
from ..geometry import BBox, assign_labels, box_iou, decode_boxes
from ..model import SiamRelationNet
from ..roi_pool import prroi_pool
from .config import TrainConfig, backbone_lr, lr_at
from .episodes import (EmptyProposalPool, Triplet, build_gallery, build_relation_pairs, build_triplet,
                       mine_hard_online, sample_cls_reg)
from .losses import LossWeights, cls_loss, matching_loss, reg_loss, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SiamRelationNet
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def jitter_boxes(box: BBox, rng: np.random.Generator, n: int, min_iou: float) -> np.ndarray:
    """Small random perturbations of ``box`` that keep IoU >= ``min_iou``."""
    if n <= 0:
        return np.zeros((0, 4))
    cx = box.cx + rng.uniform(-0.1, 0.1, n) * box.w
    cy = box.cy + rng.uniform(-0.1, 0.1, n) * box.h
    w = box.w * np.exp(rng.uniform(-0.15, 0.15, n))
    h = box.h * np.exp(rng.uniform(-0.15, 0.15, n))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return out[box_iou(out, box.as_array()[None]) >= min_iou]


def _box_tensor(boxes: list[BBox]) -> torch.Tensor:
    return torch.tensor([[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=torch.float32)


def episode_losses(model: SiamRelationNet, triplets: list[Triplet], cfg: TrainConfig,
                   rng: np.random.Generator, online_hnm: bool, counters: Counter):
    """Losses for one batch of triplets; returns ``(cls, reg, matching)`` tensors."""
    grid = model.grid
    s = grid.size
    n_batch = len(triplets)
    pyr_z = model.template(patch_tensor([t.template for t in triplets]))
    pyr_x = model.search(patch_tensor([t.search for t in triplets]))
    out = model.correlate(pyr_z, pyr_x)
    px, py = grid.points()
    ptx = torch.tensor(px.reshape(-1), dtype=torch.float32)
    pty = torch.tensor(py.reshape(-1), dtype=torch.float32)
    boxes_all, _ = decode_boxes(ptx, pty, out.reg.permute(0, 2, 3, 1).reshape(n_batch, s * s, 4))
    cls_flat = out.cls_corr.flatten(2).transpose(1, 2)  # (B, S*S, C)
    use_rd = model.rd is not None

    if use_rd:
        troi = model.template_roi(pyr_z, _box_tensor([t.template_box for t in triplets]))
        nroi = None
        if cfg.strategy == "contrastive":
            pyr_n = model.search(patch_tensor([t.negative for t in triplets]))
            nroi = model.template_roi(pyr_n, _box_tensor([t.negative_box for t in triplets]))
        with torch.no_grad():
            plain_prob = torch.softmax(model.refine(out.cls_corr), dim=1)[:, 1].flatten(1).numpy()

    cls_vecs, cls_labels, cls_owner = [], [], []
    reg_pred, reg_gt = [], []
    sup_b, sup_neg, queries, pair_labels = [], [], [], []
    m_slices = []
    n_query = 0
    for b, t in enumerate(triplets):
        gt = t.search_box
        pos, neg = sample_cls_reg(assign_labels(gt, grid), rng, cfg.n_pos, cfg.n_neg)
        if len(pos) == 0:
            counters["skipped_no_positive"] += 1
            continue
        sel = np.concatenate([pos, neg])
        cls_vecs.append(cls_flat[b, sel])
        cls_labels.append(torch.tensor([1] * len(pos) + [0] * len(neg)))
        reg_pred.append(boxes_all[b, pos])
        reg_gt.append(_box_tensor([gt]).expand(len(pos), 4))
        if not use_rd:
            continue
        props = boxes_all[b].detach().double().numpy()
        qboxes = [props[sel]]
        sup_b.extend([b] * len(sel))
        sup_neg.extend([False] * len(sel))
        m_slices.append((n_query, n_query + len(sel)))
        n_query += len(sel)
        hard = None
        if online_hnm:
            mined = mine_hard_online(props, gt, plain_prob[b], cfg.online_hnm_count)
            hard = mined.indices
            counters["online_mined"] += len(hard)
        pool = np.concatenate([props, jitter_boxes(gt, rng, cfg.gt_jitter_proposals, cfg.pos_iou)])
        try:
            pairs = build_relation_pairs(pool, gt, rng, cfg.relation_pairs, cfg.pos_iou, cfg.neg_iou,
                                         hard, strategy=cfg.strategy)
        except EmptyProposalPool:
            counters["skipped_pairs"] += 1
            pairs = None
        if pairs is not None:
            qboxes.append(pairs.query_boxes)
            sup_b.extend([b] * len(pairs))
            sup_neg.extend(pairs.negative_support.tolist())
            pair_labels.append(torch.tensor(pairs.labels, dtype=torch.float32))
            n_query += len(pairs)
            for k in pairs.kinds:
                counters[f"pairs_{k}"] += 1
        queries.append((b, np.concatenate(qboxes)))

    if not cls_vecs:
        zero = out.cls_corr.sum() * 0.0
        return zero, zero, zero

    cls_in = torch.cat(cls_vecs)
    l_match = cls_in.new_zeros(())
    if use_rd:
        qfeat = {lvl: [] for lvl in model.levels}
        for b, qb in queries:
            fb = patch_to_feature(torch.tensor(qb, dtype=torch.float32))
            for lvl in model.levels:
                qfeat[lvl].append(prroi_pool(pyr_x.full[lvl][b], fb))
        sb = torch.tensor(sup_b)
        sn = torch.tensor(sup_neg)
        is_m = torch.zeros(n_query, dtype=torch.bool)
        for a, c in m_slices:
            is_m[a:c] = True
        support, query = {}, {}
        for lvl in model.levels:
            sup = troi[lvl][sb]
            if nroi is not None and bool(sn.any()):
                sup = torch.where(sn[:, None, None, None], nroi[lvl][sb], sup)
            support[lvl] = sup
            query[lvl] = torch.cat(qfeat[lvl])
        if cfg.cls_through_rd:
            scores = model.relation(support, query)
            m, pair_scores = scores[is_m], scores[~is_m]
        else:
            with torch.no_grad():
                m = model.relation({k: v[is_m] for k, v in support.items()},
                                   {k: v[is_m] for k, v in query.items()})
            pair_scores = None
            if pair_labels:
                pair_scores = model.relation({k: v[~is_m] for k, v in support.items()},
                                             {k: v[~is_m] for k, v in query.items()})
        cls_in = cls_in * m[:, None]
        if pair_labels:
            l_match = matching_loss(pair_scores, torch.cat(pair_labels))
    logits = model.refine.cls_out(cls_in[:, :, None, None]).flatten(1)
    l_cls = cls_loss(logits, torch.cat(cls_labels))
    l_reg = reg_loss(torch.cat(reg_pred), torch.cat(reg_gt))
    return l_cls, l_reg, l_match


def _param_groups(model: SiamRelationNet, cfg: TrainConfig):
    for p in model.backbone_stage_parameters(cfg.frozen_stages):
        p.requires_grad_(False)
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    backbone = [p for p in model.backbone.parameters() if p.requires_grad]
    rest = [p for p in model.parameters() if id(p) not in backbone_ids]
    return [{"params": backbone, "name": "backbone"}, {"params": rest, "name": "head"}]


def train(cfg: TrainConfig, dataset, out_dir=None, checkpoint_name: str = "model.ckpt",
          model: SiamRelationNet | None = None, max_steps: int | None = None) -> TrainResult:
    """Run the full schedule on ``dataset`` (a list of sequences).

    Writes ``metrics.jsonl`` and the checkpoint to ``out_dir`` when given.
    Deterministic for a fixed seed in a single thread.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or SiamRelationNet(cfg.model)
    model.train()
    groups = _param_groups(model, cfg)
    opt = torch.optim.SGD(groups, lr=cfg.lr_warmup[0], momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    weights = LossWeights(*cfg.loss_weights)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    result = TrainResult(model)
    use_rd = model.rd is not None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        online = cfg.hnm and use_rd and epoch >= cfg.online_hnm_epoch
        offline = cfg.hnm and use_rd and epoch >= cfg.offline_hnm_epoch and cfg.strategy == "contrastive"
        if online and epoch == cfg.online_hnm_epoch:
            result.events.append({"epoch": epoch, "event": "online_hnm_start"})
        gallery = None
        if offline:
            if epoch == cfg.offline_hnm_epoch:
                result.events.append({"epoch": epoch, "event": "offline_hnm_start"})
            model.eval()
            gallery = build_gallery(dataset, model, cfg.gallery_frames)
            model.train()
        if epoch == cfg.backbone_release_epoch:
            result.events.append({"epoch": epoch, "event": "backbone_release"})
        counters: Counter = Counter()
        sums = np.zeros(4)
        n_steps = 0
        for it in range(cfg.steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            frac = it / cfg.steps_per_epoch
            lr = lr_at(epoch, frac, cfg)
            blr = backbone_lr(epoch, frac, cfg)
            opt.param_groups[0]["lr"] = blr
            opt.param_groups[1]["lr"] = lr
            triplets = [build_triplet(dataset, rng, cfg.max_gap, cfg.search_shift, cfg.scale_jitter,
                                      gallery, cfg.offline_hnm_prob, cfg.offline_hnm_n)
                        for _ in range(cfg.batch_size)]
            counters["offline_draws"] += sum(t.hard_negative for t in triplets)
            l_cls, l_reg, l_match = episode_losses(model, triplets, cfg, rng, online, counters)
            loss = total_loss(l_cls, l_reg, l_match, weights)
            if not torch.isfinite(loss):
                snap = None
                if out_dir is not None:
                    snap = save_model(out_dir / "nan_snapshot.ckpt", model, cfg,
                                      {"epoch": epoch, "step": step})
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}"
                                       f" (cls={l_cls.item()}, reg={l_reg.item()}, matching={l_match.item()});"
                                       f" snapshot: {snap}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if blr == 0.0:
                for p in groups[0]["params"]:
                    p.grad = None
            opt.step()
            vals = [float(v.detach()) for v in (loss, l_cls, l_reg, l_match)]
            sums += vals
            n_steps += 1
            step += 1
            result.step_losses.append(vals[0])
        if n_steps == 0:
            break
        mean = sums / n_steps
        record = {"epoch": epoch, "steps": n_steps, "loss": mean[0], "cls": mean[1], "reg": mean[2],
                  "matching": mean[3], "lr": lr_at(epoch, 0.0, cfg), "backbone_lr": backbone_lr(epoch, 0.0, cfg),
                  "online_hnm": online, "offline_hnm": offline, "counters": dict(counters)}
        result.epochs.append(record)
        log.info("epoch %d loss %.4f (cls %.4f reg %.4f match %.4f)", epoch, *mean)
        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_model(out_dir / checkpoint_name, model, cfg, {"events": result.events})
    return result
