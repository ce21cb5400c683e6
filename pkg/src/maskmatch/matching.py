from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .encoder import FeaturePyramid
from .nn import MLP, DecoderLayer, LayerNorm, MultiHeadAttention, ParamStore, sine_positions
from .pos import ProposalSet, dice_loss
from .tensor import Tensor, as_tensor, avg_pool2d, clamp, concat, log, resize_bilinear, softmax, sqrt, stack
from .utils import ConfigError, DimensionError, DomainError

logger = logging.getLogger(__name__)

GAP_EPS = 1e-7
MINMAX_EPS = 1e-7
LOG_FLOOR = 1e-7
LAMBDA_MASK = 10.0
LAMBDA_CONTRAST = 6.0
CA_MODES = ("learned", "nonparametric")
BLEND_MODES = ("softmax", "linear")


@dataclass
class AlignedFeatures:
    levels: List[Tensor]  # [d, h, w] per level, levels 3..5

    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self.levels]


@dataclass
class Prototype:
    vector: Tensor  # [levels * d]
    empty: bool = False

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class MatchResult:
    S: Tensor
    S_hat: Tensor
    weights: Tensor
    blended: Tensor
    zero_norm: List[int] = field(default_factory=list)

    @property
    def selected(self) -> int:
        return int(np.argmax(self.S.data))


@dataclass
class MatcherFlags:
    sa: bool = True
    ca: bool = True
    lm: bool = True
    ca_mode: str = "learned"
    blend: str = "softmax"

    def __post_init__(self):
        if self.ca_mode not in CA_MODES:
            raise ConfigError("ca_mode", f"expected one of {CA_MODES}, got {self.ca_mode!r}")
        if self.blend not in BLEND_MODES:
            raise ConfigError("blend", f"expected one of {BLEND_MODES}, got {self.blend!r}")

    @property
    def all_off(self) -> bool:
        return not (self.sa or self.ca or self.lm)


# ---------------------------------------------------------------------------
# Feature alignment
# ---------------------------------------------------------------------------
def self_align(F: Tensor) -> Tensor:
    """Reweight channels of F [c x hw] by their affinity to the channel-mean anchor."""
    if F.ndim != 2:
        raise DimensionError(f"self_align expects [c x hw], got {F.shape}")
    anchor = F.mean(axis=0, keepdims=True)  # 1 x hw
    weights = F @ anchor.T  # c x 1
    return weights * F


def self_align_map(feat: Tensor) -> Tensor:
    c, h, w = feat.shape
    return self_align(feat.reshape(c, h * w)).reshape(c, h, w)


class CrossAlignment:
    """Weight-shared decoding of query features against support features and back.

    Each level has its own stack of ``layers`` cross-attention + MLP blocks;
    the same stack serves both directions. Keys/values are average-pooled to
    the stride-32 grid before attention.
    """

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        d_model: int = 32,
        heads: int = 4,
        d_ffn: int = 64,
        layers: int = 1,
        mode: str = "learned",
        positional_encoding: str = "off",
        dropout: float = 0.0,
        zero_out: bool = False,
        prefix: str = "mm.ca",
    ):
        if mode not in CA_MODES:
            raise ConfigError("ca_mode", f"expected one of {CA_MODES}, got {mode!r}")
        if layers < 1:
            raise ConfigError("ca_layers", f"must be >= 1, got {layers}")
        self.mode = mode
        self.positional_encoding = positional_encoding
        if mode == "learned":
            self.blocks = [
                [
                    DecoderLayer(
                        store,
                        f"{prefix}.level{lvl}.{i}",
                        d_model,
                        heads,
                        d_ffn,
                        rng,
                        self_attn=False,
                        dropout=dropout,
                        zero_out=zero_out,
                    )
                    for i in range(layers)
                ]
                for lvl in (3, 4, 5)
            ]
        else:
            self.attn = MultiHeadAttention(None, f"{prefix}.attn", d_model, 1, None, projections=False)
            self.norm = LayerNorm(None, f"{prefix}.norm", d_model, affine=False)

    def _align_level(
        self,
        idx: int,
        x_feat: Tensor,
        other: Tensor,
        kv_hw: Tuple[int, int],
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        c, h, w = x_feat.shape
        k = h // kv_hw[0]
        pooled = avg_pool2d(other, k)
        _, kh, kw = pooled.shape
        memory = pooled.reshape(c, kh * kw).T
        x = x_feat.reshape(c, h * w).T
        if self.mode == "learned":
            pos = Tensor(sine_positions(kh, kw, c)) if self.positional_encoding == "sine" else None
            for layer in self.blocks[idx]:
                x = layer(x, memory, pos, rng)
        else:
            m = self.norm(memory)
            x = x + self.attn(self.norm(x), m, m)
        return x.T.reshape(c, h, w)

    def __call__(
        self,
        F_Q: Sequence[Tensor],
        F_S: Sequence[Tensor],
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[AlignedFeatures, AlignedFeatures]:
        if len(F_Q) != 3 or len(F_S) != 3:
            raise DimensionError("cross_align expects levels 3, 4, 5 for both images")
        for fq, fs in zip(F_Q, F_S):
            if fq.shape != fs.shape:
                raise DimensionError(f"cross_align: query level {fq.shape} vs support level {fs.shape}")
        kv_hw = F_Q[-1].shape[1:]
        q_out = [self._align_level(i, fq, fs, kv_hw, rng) for i, (fq, fs) in enumerate(zip(F_Q, F_S))]
        s_out = [self._align_level(i, fs, fq, kv_hw, rng) for i, (fq, fs) in enumerate(zip(F_Q, F_S))]
        return AlignedFeatures(q_out), AlignedFeatures(s_out)


def cross_align(
    ca: CrossAlignment,
    F_Q: Sequence[Tensor],
    F_S: Sequence[Tensor],
    rng: Optional[np.random.Generator] = None,
) -> Tuple[AlignedFeatures, AlignedFeatures]:
    return ca(F_Q, F_S, rng)


# ---------------------------------------------------------------------------
# Prototypes and matching
# ---------------------------------------------------------------------------
def masked_gap(levels: Sequence[Tensor], mask: Union[Tensor, np.ndarray], eps: float = GAP_EPS) -> Prototype:
    """Concatenate per-level sum(F * mask) / (sum(mask) + eps), mask resized bilinearly to each level."""
    m = as_tensor(mask)
    if m.ndim != 2:
        raise DimensionError(f"masked_gap expects a 2-D mask, got {m.shape}")
    if m.data.min() < 0.0 or m.data.max() > 1.0:
        raise DomainError("masked_gap: mask values must lie in [0, 1]")
    empty = not bool(m.data.any())
    if empty:
        logger.warning("masked_gap: all-zero mask, prototype is the zero vector")
    parts = []
    for feat in levels:
        c, h, w = feat.shape
        mr = resize_bilinear(m, (h, w))
        num = (feat * mr.reshape(1, h, w)).sum(axis=(1, 2))
        parts.append(num / (mr.sum() + eps))
    return Prototype(vector=parts[0] if len(parts) == 1 else concat(parts), empty=empty)


def cosine(a: Tensor, b: Tensor) -> Tuple[Tensor, bool]:
    """Cosine similarity; (0, True) when either vector has zero norm."""
    na = (a * a).sum()
    nb = (b * b).sum()
    if na.item() == 0.0 or nb.item() == 0.0:
        return Tensor(0.0), True
    return clamp((a * b).sum() / sqrt(na * nb), -1.0, 1.0), False


def similarities(P_S: Prototype, P_Q: Sequence[Prototype]) -> Tuple[Tensor, List[int]]:
    values, flagged = [], []
    for n, p in enumerate(P_Q):
        if p.dim != P_S.dim:
            raise DimensionError(f"prototype {n} has length {p.dim}, support has {P_S.dim}")
        s, zero = cosine(P_S.vector, p.vector)
        values.append(s)
        if zero:
            flagged.append(n)
    if flagged:
        logger.warning("zero-norm prototypes at %s, cosine set to 0", flagged)
    return stack(values), flagged


def minmax_norm(S: Tensor, eps: float = MINMAX_EPS) -> Tensor:
    if S.size < 1:
        raise DimensionError("minmax_norm needs at least one entry")
    lo = S.min()
    return (S - lo) / (S.max() - lo + eps)


def blend(weights: Tensor, proposals: ProposalSet) -> Tensor:
    n = proposals.count
    h, w = proposals.hw
    return (weights.reshape(1, n) @ proposals.masks.reshape(n, h * w)).reshape(h, w)


def match(
    P_S: Prototype,
    P_Q: Sequence[Prototype],
    proposals: ProposalSet,
    head: Optional[MLP] = None,
    blend_mode: str = "softmax",
) -> MatchResult:
    """Blend proposals by weights derived from support/proposal cosine similarities.

    Without a learnable head the weights are one-hot at the most similar
    proposal, which is exactly the heuristic baseline.
    """
    n = len(P_Q)
    if n < 1:
        raise DimensionError("match needs at least one proposal prototype")
    if n != proposals.count:
        raise DimensionError(f"{n} prototypes for {proposals.count} proposals")
    S, flagged = similarities(P_S, P_Q)
    S_hat = minmax_norm(S)
    if head is None:
        onehot = np.zeros(n)
        onehot[int(np.argmax(S.data))] = 1.0
        weights = Tensor(onehot)
    else:
        logits = head(S.reshape(1, n)).reshape(n)
        weights = softmax(logits, axis=0) if blend_mode == "softmax" else logits
    return MatchResult(S=S, S_hat=S_hat, weights=weights, blended=blend(weights, proposals), zero_norm=flagged)


def heuristic_match(P_S: Prototype, P_Q: Sequence[Prototype], proposals: ProposalSet) -> Tuple[int, Tensor]:
    """Index and mask of the proposal with the highest cosine similarity (lowest index on ties)."""
    S, _ = similarities(P_S, P_Q)
    best = int(np.argmax(S.data))
    return best, proposals.masks[best]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def contrastive_loss(S_hat: Tensor, ious: Sequence[float]) -> Tensor:
    """-1/2 (log S_hat[pos] + log(1 - S_hat[neg])), pos/neg at the max/min IoU proposal."""
    ious = np.asarray(ious, dtype=np.float64)
    if S_hat.size < 2:
        raise ConfigError("num_proposals", "contrastive loss needs at least two proposals")
    if ious.shape != (S_hat.size,):
        raise DimensionError(f"contrastive_loss: {ious.shape[0] if ious.ndim else 0} IoUs for {S_hat.size} proposals")
    pos = int(np.argmax(ious))
    neg = int(np.argmin(ious))
    if pos == neg:
        logger.warning("contrastive_loss: all IoUs equal, positive and negative coincide at %d", pos)
    term_pos = log(clamp(S_hat[pos], LOG_FLOOR, None))
    term_neg = log(clamp(1.0 - S_hat[neg], LOG_FLOOR, None))
    return (term_pos + term_neg) * -0.5


def mm_loss_terms(
    blended: Tensor,
    query_gt: np.ndarray,
    S_hat: Tensor,
    ious: Sequence[float],
    lambda_mask: float = LAMBDA_MASK,
    lambda_contrast: float = LAMBDA_CONTRAST,
    use_contrastive: bool = True,
) -> Dict[str, Tensor]:
    terms = {"L_M": dice_loss(blended, query_gt) * lambda_mask}
    if use_contrastive:
        terms["L_co"] = contrastive_loss(S_hat, ious) * lambda_contrast
    return terms


def mm_loss(
    blended: Tensor,
    query_gt: np.ndarray,
    S_hat: Tensor,
    ious: Sequence[float],
    lambda_mask: float = LAMBDA_MASK,
    lambda_contrast: float = LAMBDA_CONTRAST,
    use_contrastive: bool = True,
) -> Tensor:
    terms = mm_loss_terms(blended, query_gt, S_hat, ious, lambda_mask, lambda_contrast, use_contrastive)
    total = terms["L_M"]
    if "L_co" in terms:
        total = total + terms["L_co"]
    return total


# ---------------------------------------------------------------------------
# Module
# ---------------------------------------------------------------------------
class MaskMatcher:
    """Self-Alignment, Cross-Alignment and Learnable Matching, each switchable."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        num_proposals: int = 16,
        d_model: int = 32,
        heads: int = 4,
        ca_ffn: int = 64,
        ca_layers: int = 1,
        flags: Optional[MatcherFlags] = None,
        positional_encoding: str = "off",
        dropout: float = 0.0,
        prefix: str = "mm",
    ):
        self.flags = flags or MatcherFlags()
        self.num_proposals = num_proposals
        self.ca: Optional[CrossAlignment] = None
        self.head: Optional[MLP] = None
        if self.flags.ca:
            self.ca = CrossAlignment(
                store,
                rng,
                d_model=d_model,
                heads=heads,
                d_ffn=ca_ffn,
                layers=ca_layers,
                mode=self.flags.ca_mode,
                positional_encoding=positional_encoding,
                dropout=dropout,
                prefix=f"{prefix}.ca",
            )
        if self.flags.lm:
            self.head = MLP(store, f"{prefix}.lm", [num_proposals, 2 * num_proposals, num_proposals], rng)

    @property
    def learnable(self) -> bool:
        return self.head is not None or (self.ca is not None and self.ca.mode == "learned")

    def align(
        self,
        query: FeaturePyramid,
        support: FeaturePyramid,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[AlignedFeatures, AlignedFeatures]:
        F_Q, F_S = list(query.levels), list(support.levels)
        if self.flags.sa:
            F_Q = [self_align_map(f) for f in F_Q]
            F_S = [self_align_map(f) for f in F_S]
        if self.ca is not None:
            return self.ca(F_Q, F_S, rng)
        return AlignedFeatures(F_Q), AlignedFeatures(F_S)

    def prototypes(
        self,
        support: FeaturePyramid,
        support_mask: np.ndarray,
        query: FeaturePyramid,
        proposals: ProposalSet,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Prototype, List[Prototype]]:
        aligned_q, aligned_s = self.align(query, support, rng)
        p_s = masked_gap(aligned_s.levels, support_mask)
        p_q = [masked_gap(aligned_q.levels, proposals.masks[n]) for n in range(proposals.count)]
        return p_s, p_q

    def forward(
        self,
        supports: Sequence[Tuple[FeaturePyramid, np.ndarray]],
        query: FeaturePyramid,
        proposals: ProposalSet,
        rng: Optional[np.random.Generator] = None,
    ) -> MatchResult:
        k = len(supports)
        if k < 1:
            raise ConfigError("shots", "k-shot matching needs at least one support")
        per_support = [self.prototypes(pyr, mask, query, proposals, rng) for pyr, mask in supports]
        if k == 1:
            p_s, p_q = per_support[0]
        else:
            p_s = _mean_prototype([ps for ps, _ in per_support])
            p_q = [_mean_prototype([pq[n] for _, pq in per_support]) for n in range(proposals.count)]
        return match(p_s, p_q, proposals, self.head, self.flags.blend)


def _mean_prototype(protos: Sequence[Prototype]) -> Prototype:
    total = protos[0].vector
    for p in protos[1:]:
        total = total + p.vector
    return Prototype(vector=total * (1.0 / len(protos)), empty=all(p.empty for p in protos))


def kshot_match(
    matcher: MaskMatcher,
    supports: Sequence[Tuple[FeaturePyramid, np.ndarray]],
    query: FeaturePyramid,
    proposals: ProposalSet,
    rng: Optional[np.random.Generator] = None,
) -> MatchResult:
    return matcher.forward(supports, query, proposals, rng)
