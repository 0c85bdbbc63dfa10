"""Relation detector: aligns a support/query ROI pair and scores how related they are."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import torch
import torch.nn as nn

HEADS = ("global", "local", "patch")
# fixed 3x3 partition of a 7x7 map
PATCH_SPLITS = ((0, 3), (3, 5), (5, 7))


@dataclass
class RoiFeaturePair:
    support: torch.Tensor  # (N, C, 7, 7) or (C, 7, 7)
    query: torch.Tensor
    aligned: bool = False

    def __post_init__(self):
        if self.support.shape != self.query.shape:
            raise ValueError(f"pair shapes differ: {tuple(self.support.shape)} vs {tuple(self.query.shape)}")


@dataclass
class RelationScore:
    heads: dict[str, torch.Tensor]
    combined: torch.Tensor


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """``(N, C, H, W) -> (N, H*W, C)``."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], h, w)


class AlignmentBlock(nn.Module):
    """Non-local attention shared by both members of a pair.

    The attention map over the 49 positions is computed from the channel
    concatenation of support and query, then applied with the same value and
    output projections to each member, with a residual connection.  Works on
    token layout ``(N, P, C)``.
    """

    def __init__(self, channels: int, inner: int | None = None):
        super().__init__()
        inner = inner or max(channels // 4, 8)
        self.inner = inner
        self.theta = nn.Linear(2 * channels, inner)
        self.phi = nn.Linear(2 * channels, inner)
        self.g = nn.Linear(channels, inner)
        self.out = nn.Linear(inner, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attention(self, support: torch.Tensor, query: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
        n, p, _ = support.shape
        if math.isinf(temperature):
            return support.new_full((n, p, p), 1.0 / p)
        pair = torch.cat([support, query], dim=2)
        logits = torch.bmm(self.theta(pair), self.phi(pair).transpose(1, 2))
        return torch.softmax(logits / (math.sqrt(self.inner) * temperature), dim=-1)  # rows sum to 1

    def _attend(self, x: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
        return x + self.out(torch.bmm(attn, self.g(x)))

    def forward(self, support, query, temperature: float = 1.0):
        attn = self.attention(support, query, temperature)
        return self._attend(support, attn), self._attend(query, attn)


class GlobalHead(nn.Module):
    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, support, query):
        v = torch.cat([support.mean(dim=1), query.mean(dim=1)], dim=1)
        return torch.sigmoid(self.mlp(v)).squeeze(1)


class LocalHead(nn.Module):
    """Per-position comparison of the concatenated pair (1x1 convolutions as linear maps)."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, support, query):
        per_pos = self.net(torch.cat([support, query], dim=2))
        return torch.sigmoid(per_pos.mean(dim=(1, 2)))


def patch_pooling_matrix(size: int = 7) -> torch.Tensor:
    """``(size*size, 9)`` matrix averaging each patch of the fixed 3x3 split, row-major patch order."""
    mat = torch.zeros(size * size, len(PATCH_SPLITS) ** 2)
    k = 0
    for y0, y1 in PATCH_SPLITS:
        for x0, x1 in PATCH_SPLITS:
            cells = [y * size + x for y in range(y0, y1) for x in range(x0, x1)]
            mat[cells, k] = 1.0 / len(cells)
            k += 1
    return mat


class PatchHead(nn.Module):
    def __init__(self, channels: int, embed: int = 32):
        super().__init__()
        self.register_buffer("pool", patch_pooling_matrix(), persistent=False)
        self.embed = nn.Sequential(nn.Linear(channels, embed), nn.ReLU(inplace=True))
        self.bilinear = nn.Parameter(torch.eye(embed) / embed)
        self.bias = nn.Parameter(torch.zeros(()))

    def patches(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.matmul(self.pool.t(), tokens)  # (N, 9, C)

    def score_matrix(self, support, query) -> torch.Tensor:
        es = self.embed(self.patches(support))  # (N, 9, E)
        eq = self.embed(self.patches(query))
        return torch.bmm(es @ self.bilinear, eq.transpose(1, 2)) + self.bias

    def forward(self, support, query):
        return torch.sigmoid(self.score_matrix(support, query).mean(dim=(1, 2)))


class RelationDetector(nn.Module):
    def __init__(self, channels: int = 64, heads: tuple[str, ...] = HEADS, hidden: int = 64):
        super().__init__()
        heads = tuple(heads)
        if not heads:
            raise ValueError("at least one relation head must be enabled")
        unknown = set(heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown relation heads {sorted(unknown)}")
        self.enabled = tuple(h for h in HEADS if h in heads)
        self.align_block = AlignmentBlock(channels)
        builders = {"global": lambda: GlobalHead(channels, hidden),
                    "local": lambda: LocalHead(channels, hidden),
                    "patch": lambda: PatchHead(channels)}
        self.heads = nn.ModuleDict({h: builders[h]() for h in self.enabled})

    def align(self, pair: RoiFeaturePair, temperature: float = 1.0) -> RoiFeaturePair:
        if pair.aligned:
            raise ValueError("pair is already aligned")
        s, q = pair.support, pair.query
        single = s.dim() == 3
        if single:
            s, q = s.unsqueeze(0), q.unsqueeze(0)
        h, w = s.shape[-2:]
        ts, tq = self.align_block(to_tokens(s), to_tokens(q), temperature)
        s, q = from_tokens(ts, h, w), from_tokens(tq, h, w)
        if single:
            s, q = s[0], q[0]
        return RoiFeaturePair(s, q, aligned=True)

    def score(self, support: torch.Tensor, query: torch.Tensor,
              heads: tuple[str, ...] | None = None, temperature: float = 1.0) -> RelationScore:
        heads = self.enabled if heads is None else tuple(heads)
        if not heads:
            raise ValueError("at least one relation head must be enabled")
        missing = set(heads) - set(self.enabled)
        if missing:
            raise ValueError(f"heads {sorted(missing)} are not part of this detector")
        if support.shape != query.shape:
            raise ValueError(f"pair shapes differ: {tuple(support.shape)} vs {tuple(query.shape)}")
        single = support.dim() == 3
        if single:
            support, query = support.unsqueeze(0), query.unsqueeze(0)
        s, q = self.align_block(to_tokens(support), to_tokens(query), temperature)
        scores = {h: self.heads[h](s, q) for h in heads}
        combined = torch.stack(list(scores.values()), 0).mean(0)
        if single:
            scores = {h: v[0] for h, v in scores.items()}
            combined = combined[0]
        return RelationScore(scores, combined)

    def forward(self, support: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        return self.score(support, query).combined


def relation_score(detector: RelationDetector, f_s: torch.Tensor, f_q: torch.Tensor,
                   heads: tuple[str, ...] | None = None) -> RelationScore:
    return detector.score(f_s, f_q, heads)


def head_subsets() -> list[tuple[str, ...]]:
    """The seven non-empty head combinations, singles first."""
    return [c for k in (1, 2, 3) for c in combinations(HEADS, k)]
