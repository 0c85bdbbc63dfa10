"""Training episodes: triplets, location sampling, relation pairs and hard negative mining."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..bench.synth import Sequence
from ..crop import SEARCH_SIZE, TEMPLATE_SIZE, Patch, context_size, crop_square, crop_template
from ..features import patch_tensor
from ..geometry import BBox, Label, box_iou

PP, PN, NN = "PP", "PN", "NN"


class EmptyProposalPool(ValueError):
    """No usable positive (or negative) proposals for an episode."""


@dataclass
class Triplet:
    template: Patch
    search: Patch
    negative: Patch
    template_box: BBox  # all boxes in their own patch coordinates
    search_box: BBox
    negative_box: BBox
    seq: int
    neg_seq: int
    frames: tuple[int, int]
    neg_frame: int
    hard_negative: bool = False


def _jittered_search(frame, box: BBox, rng: np.random.Generator, shift: float, scale_jitter: float) -> Patch:
    side = context_size(box) * SEARCH_SIZE / TEMPLATE_SIZE
    side *= math.exp(rng.uniform(-scale_jitter, scale_jitter)) if scale_jitter else 1.0
    px_per_patch = side / SEARCH_SIZE
    dx, dy = (rng.uniform(-shift, shift, 2) * px_per_patch) if shift else (0.0, 0.0)
    return crop_square(frame, (box.cx + dx, box.cy + dy), side, SEARCH_SIZE)


def build_triplet(dataset: list[Sequence], rng: np.random.Generator, max_gap: int = 100,
                  search_shift: float = 32.0, scale_jitter: float = 0.15,
                  gallery: "Gallery | None" = None, offline_prob: float = 0.5,
                  offline_n: int = 8) -> Triplet:
    """Draw ``(template, search, negative)`` patches.

    Template and search come from one sequence at most ``max_gap`` frames apart;
    the negative comes from another sequence, uniformly or, when ``gallery`` is
    given, with probability ``offline_prob`` from its nearest neighbours.
    """
    if len(dataset) < 2:
        raise ValueError("triplets need at least two sequences")
    si = int(rng.integers(len(dataset)))
    seq = dataset[si]
    t1 = int(rng.integers(len(seq)))
    lo, hi = max(0, t1 - max_gap), min(len(seq) - 1, t1 + max_gap)
    t2 = int(rng.integers(lo, hi + 1))

    hard = False
    if gallery is not None and rng.random() < offline_prob:
        target = gallery.lookup(si, t1)
        hits, _ = mine_hard_offline(gallery, gallery.embeddings[target], si, offline_n)
        pick = int(hits[rng.integers(len(hits))])
        ni, nt = int(gallery.seq_ids[pick]), int(gallery.frame_ids[pick])
        hard = True
    else:
        ni = int(rng.integers(len(dataset) - 1))
        ni = ni + 1 if ni >= si else ni
        nt = int(rng.integers(len(dataset[ni])))

    zbox = seq.boxes[t1]
    template = crop_template(seq.frames[t1], zbox)
    search = _jittered_search(seq.frames[t2], seq.boxes[t2], rng, search_shift, scale_jitter)
    nbox = dataset[ni].boxes[nt]
    negative = _jittered_search(dataset[ni].frames[nt], nbox, rng, search_shift, scale_jitter)
    return Triplet(template, search, negative,
                   template.box_to_patch(zbox), search.box_to_patch(seq.boxes[t2]),
                   negative.box_to_patch(nbox), si, ni, (t1, t2), nt, hard)


def sample_cls_reg(labels: np.ndarray, rng: np.random.Generator, n_pos: int = 16, n_neg: int = 48):
    """Flat indices of at most ``n_pos`` positive and ``n_neg`` negative locations."""
    flat = labels.reshape(-1)
    pos = np.flatnonzero(flat == Label.POSITIVE)
    neg = np.flatnonzero(flat == Label.NEGATIVE)
    if len(pos) > n_pos:
        pos = np.sort(rng.choice(pos, n_pos, replace=False))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    return pos, neg


def pair_counts(n: int, strategy: str = "contrastive") -> tuple[int, int, int]:
    """Kind counts ``(PP, PN, NN)``: 1:2:1 by floor rule, remainder to NN.

    The one-way ``naive`` strategy has no negative support and splits 1:2
    between PP and PN with the remainder to PN.
    """
    if strategy == "naive":
        n_pp = n // 3
        return n_pp, n - n_pp, 0
    n_pp, n_pn = n // 4, n // 2
    return n_pp, n_pn, n - n_pp - n_pn


@dataclass
class RelationPairBatch:
    """Pairs for one episode.  ``negative_support[k]`` selects the negative-sequence ROI
    as support instead of the template; ``query_boxes`` are search-patch boxes."""

    kinds: list[str]
    labels: np.ndarray
    negative_support: np.ndarray
    query_boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.kinds)


def build_relation_pairs(proposals: np.ndarray, gt: BBox, rng: np.random.Generator, n: int = 16,
                         pos_iou: float = 0.5, neg_iou: float = 0.3,
                         hard_negatives: np.ndarray | None = None, hard_prob: float = 0.5,
                         strategy: str = "contrastive") -> RelationPairBatch:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    ious = box_iou(proposals, gt.as_array()[None])
    pos_pool = np.flatnonzero(ious >= pos_iou)
    neg_pool = np.flatnonzero(ious < neg_iou)
    if len(pos_pool) == 0:
        raise EmptyProposalPool("no positive proposals")
    if len(neg_pool) == 0:
        raise EmptyProposalPool("no negative proposals")
    n_pp, n_pn, n_nn = pair_counts(n, strategy)

    def draw(pool, k):
        return rng.choice(pool, k, replace=len(pool) < k)

    def draw_neg(k):
        idx = draw(neg_pool, k)
        if hard_negatives is not None and len(hard_negatives):
            use_hard = rng.random(k) < hard_prob
            idx = np.where(use_hard, rng.choice(hard_negatives, k), idx)
        return idx

    q_pp = draw(pos_pool, n_pp)
    q_pn = draw_neg(n_pn)
    nn_from_pos = rng.random(n_nn) < 0.5
    q_nn = np.where(nn_from_pos, draw(pos_pool, n_nn), draw_neg(n_nn)) if n_nn else np.zeros(0, dtype=int)
    kinds = [PP] * n_pp + [PN] * n_pn + [NN] * n_nn
    queries = np.concatenate([q_pp, q_pn, q_nn]).astype(int)
    labels = np.array([1.0 if k == PP else 0.0 for k in kinds])
    neg_support = np.array([k == NN for k in kinds])
    return RelationPairBatch(kinds, labels, neg_support, proposals[queries])


@dataclass
class HardNegatives:
    indices: np.ndarray
    short: bool


def mine_hard_online(proposals: np.ndarray, gt: BBox, cls_scores: np.ndarray, count: int,
                     max_iou: float = 0.2) -> HardNegatives:
    """Highest-confidence proposals among those with IoU <= ``max_iou`` to ``gt``."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        raise ValueError("no proposals to mine")
    scores = np.asarray(cls_scores, dtype=np.float64).reshape(-1)
    keep = np.flatnonzero(box_iou(proposals, gt.as_array()[None]) <= max_iou)
    order = keep[np.argsort(-scores[keep], kind="stable")]
    chosen = order[:count]
    return HardNegatives(chosen, len(chosen) < count)


@dataclass
class Gallery:
    embeddings: np.ndarray  # (N, C), unit rows
    seq_ids: np.ndarray
    frame_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.embeddings)

    def lookup(self, seq: int, frame: int) -> int:
        """Gallery row of ``seq`` closest in time to ``frame``."""
        rows = np.flatnonzero(self.seq_ids == seq)
        return int(rows[np.argmin(np.abs(self.frame_ids[rows] - frame))])


def embed_templates(model, patches: list[Patch], level: int = 4) -> np.ndarray:
    with torch.no_grad():
        feats = model.backbone(patch_tensor(patches))[level]
        lo = (feats.shape[-1] - 7) // 2
        v = feats[:, :, lo:lo + 7, lo:lo + 7].mean(dim=(2, 3)).double().numpy()
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0)


def build_gallery(dataset: list[Sequence], model, frames_per_seq: int = 4) -> Gallery:
    """One unit embedding per (sequence, evenly spaced frame) from the stage-4 template feature."""
    seq_ids, frame_ids, patches = [], [], []
    for si, seq in enumerate(dataset):
        picks = np.unique(np.linspace(0, len(seq) - 1, frames_per_seq).round().astype(int))
        for t in picks:
            patches.append(crop_template(seq.frames[t], seq.boxes[t]))
            seq_ids.append(si)
            frame_ids.append(int(t))
    emb = np.concatenate([embed_templates(model, patches[i:i + 32]) for i in range(0, len(patches), 32)])
    return Gallery(emb, np.array(seq_ids), np.array(frame_ids))


def mine_hard_offline(gallery: Gallery, target: np.ndarray, exclude_seq: int, n: int):
    """Indices of the ``n`` most cosine-similar gallery rows outside ``exclude_seq``.

    Returns ``(indices, short)`` where ``short`` flags fewer than ``n`` candidates.
    """
    target = np.asarray(target, dtype=np.float64)
    target = target / max(np.linalg.norm(target), 1e-12)
    rows = np.flatnonzero(gallery.seq_ids != exclude_seq)
    sims = gallery.embeddings[rows] @ target
    order = rows[np.argsort(-sims, kind="stable")]
    return order[:n], len(order) < n
