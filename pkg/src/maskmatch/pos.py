from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .encoder import FeaturePyramid
from .nn import DecoderLayer, LayerNorm, Linear, ParamStore, sine_positions
from .tensor import Tensor, sigmoid
from .utils import ConfigError, DimensionError, DomainError

logger = logging.getLogger(__name__)

POS_LEVELS = 3
DICE_SMOOTH = 1.0


@dataclass
class ProposalSet:
    masks: Tensor  # [N, H/4, W/4], post-sigmoid
    embeddings: Tensor  # [N, d]

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def hw(self) -> Tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        return self.masks.data >= threshold


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]] = field(default_factory=list)  # (proposal, ground truth)
    total_cost: float = 0.0


def downsample_nearest(mask: np.ndarray, stride: int) -> np.ndarray:
    return np.ascontiguousarray(mask[::stride, ::stride])


def upsample_nearest(mask: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; 1 when both are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"iou: pred {pred.shape} vs gt {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def proposal_ious(masks: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """IoU of every proposal, binarized at ``threshold``, against a mask at proposal resolution."""
    return np.array([iou(m >= threshold, gt) for m in np.asarray(masks)], dtype=np.float64)


class PotentialObjectsSegmenter:
    """N learnable embeddings refined over F3, F4, F5 and projected onto F2.

    There is no classification head: proposals are class-agnostic masks.
    """

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        d_model: int = 32,
        heads: int = 4,
        d_ffn: int = 64,
        num_proposals: int = 16,
        positional_encoding: str = "off",
        dropout: float = 0.0,
        prefix: str = "pos",
    ):
        if num_proposals < 1:
            raise ConfigError("num_proposals", f"must be >= 1, got {num_proposals}")
        if positional_encoding not in ("off", "sine"):
            raise ConfigError("positional_encoding", f"expected off|sine, got {positional_encoding!r}")
        self.d_model = d_model
        self.num_proposals = num_proposals
        self.positional_encoding = positional_encoding
        self.query_embed = store.register(f"{prefix}.query_embed", rng.normal(0.0, 1.0, size=(num_proposals, d_model)))
        self.layers = [
            DecoderLayer(store, f"{prefix}.decoder.{i}", d_model, heads, d_ffn, rng, dropout=dropout)
            for i in range(POS_LEVELS)
        ]
        self.norm = LayerNorm(store, f"{prefix}.decoder_norm", d_model)
        self.mask_proj = Linear(store, f"{prefix}.mask_proj", d_model, d_model, rng)

    def propose(self, pyramid: FeaturePyramid, rng: Optional[np.random.Generator] = None) -> ProposalSet:
        if pyramid.channels != self.d_model:
            raise DimensionError(f"pyramid width {pyramid.channels} != d_model {self.d_model}")
        e = self.query_embed
        for layer, feat in zip(self.layers, pyramid.levels):
            c, h, w = feat.shape
            memory = feat.reshape(c, h * w).T
            pos = Tensor(sine_positions(h, w, c)) if self.positional_encoding == "sine" else None
            e = layer(e, memory, pos, rng)
        emb = self.mask_proj(self.norm(e))
        c, h, w = pyramid.F2.shape
        logits = emb @ pyramid.F2.reshape(c, h * w)
        masks = sigmoid(logits).reshape(self.num_proposals, h, w)
        return ProposalSet(masks=masks, embeddings=e)


def dice_loss(pred: Tensor, gt: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(p*g) + s) / (sum p + sum g + s)."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice_loss: pred {pred.shape} vs gt {gt.shape}")
    inter = (pred * Tensor(gt)).sum()
    return 1.0 - (inter * 2.0 + smooth) / (pred.sum() + (float(gt.sum()) + smooth))


def dice_cost_matrix(masks: np.ndarray, gts: Sequence[np.ndarray], smooth: float = DICE_SMOOTH) -> np.ndarray:
    """Dice loss for every (proposal, ground truth) pair, shape [N x G]."""
    p = masks.reshape(masks.shape[0], -1)
    g = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in gts], axis=1)
    inter = p @ g
    return 1.0 - (2.0 * inter + smooth) / (p.sum(axis=1)[:, None] + g.sum(axis=0)[None, :] + smooth)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective map from ground truths (columns) to proposals (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"hungarian expects a matrix, got shape {cost.shape}")
    n_prop, n_gt = cost.shape
    if n_gt < 1:
        raise DimensionError("hungarian: need at least one ground truth")
    if n_gt > n_prop:
        raise ConfigError("num_proposals", f"{n_gt} objects but only {n_prop} proposals")
    if not np.isfinite(cost).all():
        raise DomainError("hungarian: non-finite cost")

    # potentials formulation over rows = ground truths, columns = proposals (1-based, 0 is the virtual root)
    a = cost.T
    rows, cols = n_gt, n_prop
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    owner = np.zeros(cols + 1, dtype=np.int64)
    way = np.zeros(cols + 1, dtype=np.int64)
    for i in range(1, rows + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    by_gt = {int(owner[j]) - 1: j - 1 for j in range(1, cols + 1) if owner[j] != 0}
    pairs = [(by_gt[g], g) for g in range(n_gt)]
    total = 0.0
    for n, g in pairs:
        total += float(cost[n, g])
    return Assignment(pairs=pairs, total_cost=total)


def pos_loss(proposals: ProposalSet, gts: Sequence[np.ndarray]) -> Tensor:
    """Mean dice over Hungarian-matched (proposal, ground truth) pairs; unmatched proposals are free."""
    if not gts:
        raise DimensionError("pos_loss needs at least one ground-truth mask")
    for g in gts:
        if tuple(np.shape(g)) != proposals.hw:
            raise DimensionError(f"pos_loss: gt shape {np.shape(g)} != proposal shape {proposals.hw}")
    assignment = hungarian(dice_cost_matrix(proposals.masks.data, gts))
    total = None
    for n, g in assignment.pairs:
        term = dice_loss(proposals.masks[n], gts[g])
        total = term if total is None else total + term
    return total * (1.0 / len(assignment.pairs))
