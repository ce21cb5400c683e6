from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .checkpoint import file_digest
from .episodes import EpisodeSample, sample_episode
from .matching import MaskMatcher, MatcherFlags
from .nn import ParamStore
from .pos import upsample_nearest
from .tensor import no_grad
from .training import MM_INIT_STREAM, PROPOSAL_STRIDE, Model, load_model, train_joint, train_stage1, train_stage2
from .utils import DimensionError, derive_rng, ensure_dir

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
_EPISODE_STREAM = 401


@dataclass
class Prediction:
    mask: np.ndarray  # bool, image resolution
    baseline: Optional[np.ndarray] = None
    proposals: Optional[np.ndarray] = None  # bool [N, H, W]


@dataclass
class Overlap:
    intersection: int
    union: int

    @property
    def iou(self) -> float:
        return 1.0 if self.union == 0 else self.intersection / self.union


def _overlap(pred: np.ndarray, gt: np.ndarray) -> Overlap:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return Overlap(int(np.logical_and(pred, gt).sum()), int(np.logical_or(pred, gt).sum()))


@dataclass
class EpisodeOutcome:
    index: int
    seed: int
    class_id: int
    prediction: Overlap
    baseline: Optional[Overlap] = None
    oracle: Optional[Overlap] = None
    oracle_index: Optional[int] = None


def episode_seed(base: int, index: int) -> int:
    return int(derive_rng(base, _EPISODE_STREAM, index).integers(0, 2**31 - 1))


def select_oracle(proposals: np.ndarray, gt: np.ndarray) -> Tuple[int, Overlap]:
    """Proposal with the highest IoU against ``gt``; lowest index on ties."""
    overlaps = [_overlap(p, gt) for p in proposals]
    best = int(np.argmax([o.iou for o in overlaps]))
    return best, overlaps[best]


def score_episode(index: int, seed: int, sample: EpisodeSample, pred: Prediction) -> EpisodeOutcome:
    gt = sample.query_gt.astype(bool)
    outcome = EpisodeOutcome(index=index, seed=seed, class_id=sample.class_id, prediction=_overlap(pred.mask, gt))
    if pred.baseline is not None:
        outcome.baseline = _overlap(pred.baseline, gt)
    if pred.proposals is not None:
        outcome.oracle_index, outcome.oracle = select_oracle(pred.proposals, gt)
    return outcome


def run_episodes(
    predict: Callable[[EpisodeSample], Prediction],
    split: str,
    episodes: int,
    k: int,
    seed: int,
    image_size: int = 64,
    fold: int = 0,
    mismatched: bool = False,
    workers: int = 1,
) -> List[EpisodeOutcome]:
    """Score ``episodes`` sampled episodes; results come back in episode-index order."""

    def one(i: int) -> EpisodeOutcome:
        s = episode_seed(seed, i)
        sample = sample_episode(s, split, k, image_size, fold, mismatched=mismatched)
        return score_episode(i, s, sample, predict(sample))

    if workers <= 1 or episodes <= 2:
        return [one(i) for i in range(episodes)]
    results: Dict[int, EpisodeOutcome] = {}
    with ThreadPoolExecutor(max_workers=min(workers, episodes)) as ex:
        fut_map = {ex.submit(one, i): i for i in range(episodes)}
        for fut in as_completed(fut_map):
            results[fut_map[fut]] = fut.result()
    return [results[i] for i in range(episodes)]


def aggregate(outcomes: Sequence[EpisodeOutcome], attr: str = "prediction", mode: str = "pixels") -> Tuple[Dict[int, float], float]:
    """Per-class IoU and their unweighted mean.

    ``pixels`` accumulates intersection and union per class over all episodes;
    ``episodes`` averages per-episode IoU within each class.
    """
    inter: Dict[int, int] = {}
    union: Dict[int, int] = {}
    scores: Dict[int, List[float]] = {}
    for o in outcomes:
        ov: Optional[Overlap] = getattr(o, attr)
        if ov is None:
            continue
        inter[o.class_id] = inter.get(o.class_id, 0) + ov.intersection
        union[o.class_id] = union.get(o.class_id, 0) + ov.union
        scores.setdefault(o.class_id, []).append(ov.iou)
    if mode == "pixels":
        per_class = {c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in sorted(union)}
    elif mode == "episodes":
        per_class = {c: float(np.mean(v)) for c, v in sorted(scores.items())}
    else:
        raise DimensionError(f"unknown miou mode {mode!r}")
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, miou


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------
@dataclass
class EvalReport:
    per_class: Dict[int, float]
    miou: float
    episodes: int
    k: int
    split: str
    miou_mode: str
    config_fingerprint: str = ""
    checkpoint: str = ""
    oracle_miou: Optional[float] = None
    baseline_miou: Optional[float] = None
    outcomes: List[EpisodeOutcome] = field(default_factory=list, repr=False)

    @property
    def oracle_dominates(self) -> Optional[bool]:
        if self.oracle_miou is None or self.baseline_miou is None:
            return None
        return self.oracle_miou >= self.baseline_miou

    def header(self) -> str:
        return (
            f"mIoU over {self.episodes} {self.split} episodes, k={self.k}, "
            f"mode={self.miou_mode} ({'per-class accumulated intersection/union' if self.miou_mode == 'pixels' else 'per-class mean of episode IoU'})"
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "header": self.header(),
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "miou": self.miou,
            "oracle_miou": self.oracle_miou,
            "baseline_miou": self.baseline_miou,
            "oracle_dominates": self.oracle_dominates,
            "episodes": self.episodes,
            "k": self.k,
            "split": self.split,
            "miou_mode": self.miou_mode,
            "config_fingerprint": self.config_fingerprint,
            "checkpoint": self.checkpoint,
        }

    def to_table(self) -> str:
        lines = [f"# {self.header()}"]
        for c, v in self.per_class.items():
            lines.append(f"class {c:<3d} {v:.4f}")
        lines.append(f"mIoU      {self.miou:.4f}")
        if self.baseline_miou is not None:
            lines.append(f"baseline  {self.baseline_miou:.4f}")
        if self.oracle_miou is not None:
            lines.append(f"oracle    {self.oracle_miou:.4f}")
        if self.oracle_dominates is not None:
            lines.append(f"oracle>=baseline {'OK' if self.oracle_dominates else 'FAIL'}")
        return "\n".join(lines)

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "seed", "class_id", "iou", "baseline_iou", "oracle_iou", "oracle_index"])
        for o in self.outcomes:
            w.writerow(
                [
                    o.index,
                    o.seed,
                    o.class_id,
                    repr(o.prediction.iou),
                    repr(o.baseline.iou) if o.baseline else "",
                    repr(o.oracle.iou) if o.oracle else "",
                    "" if o.oracle_index is None else o.oracle_index,
                ]
            )
        return buf.getvalue()

    def write(self, out_dir: Path, stem: str = "report") -> List[Path]:
        ensure_dir(out_dir)
        paths = [out_dir / f"{stem}.json", out_dir / f"{stem}.txt", out_dir / f"{stem}.episodes.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths[1].write_text(self.to_table() + "\n", encoding="utf-8")
        paths[2].write_text(self.episodes_csv(), encoding="utf-8")
        return paths


def build_report(
    outcomes: Sequence[EpisodeOutcome],
    k: int,
    split: str,
    miou_mode: str = "pixels",
    config_fingerprint: str = "",
    checkpoint: str = "",
) -> EvalReport:
    per_class, miou = aggregate(outcomes, "prediction", miou_mode)
    report = EvalReport(
        per_class=per_class,
        miou=miou,
        episodes=len(outcomes),
        k=k,
        split=split,
        miou_mode=miou_mode,
        config_fingerprint=config_fingerprint,
        checkpoint=checkpoint,
        outcomes=list(outcomes),
    )
    if any(o.baseline is not None for o in outcomes):
        report.baseline_miou = aggregate(outcomes, "baseline", miou_mode)[1]
    if any(o.oracle is not None for o in outcomes):
        report.oracle_miou = aggregate(outcomes, "oracle", miou_mode)[1]
    return report


# ---------------------------------------------------------------------------
# model predictors
# ---------------------------------------------------------------------------
def heuristic_matcher(cfg: TrainConfig) -> MaskMatcher:
    """Matcher with every component off: argmax-cosine selection of one proposal, no parameters."""
    return MaskMatcher(
        ParamStore(),
        derive_rng(0),
        num_proposals=cfg.num_proposals,
        d_model=cfg.d_model,
        heads=cfg.heads,
        flags=MatcherFlags(sa=False, ca=False, lm=False),
    )


def matcher_with_flags(model: Model, flags: MatcherFlags) -> MaskMatcher:
    """A matcher under ``flags`` that reuses every trained tensor ``model`` has for it."""
    cfg = model.config
    store = ParamStore()
    matcher = MaskMatcher(
        store,
        derive_rng(cfg.seed, MM_INIT_STREAM),
        num_proposals=cfg.num_proposals,
        d_model=cfg.d_model,
        heads=cfg.heads,
        ca_ffn=cfg.ca_ffn,
        ca_layers=cfg.ca_layers,
        flags=flags,
        positional_encoding=cfg.positional_encoding,
    )
    missing = [n for n in store.names() if n not in model.store or model.store[n].shape != store[n].shape]
    if missing:
        logger.warning("%d matcher tensors have no trained counterpart, evaluating them at initialisation", len(missing))
    for name, t in store.parameters():
        if name not in missing:
            t.data[...] = model.store[name].data
    return matcher


def _binarize(soft: np.ndarray) -> np.ndarray:
    return upsample_nearest(soft >= THRESHOLD, PROPOSAL_STRIDE)


def model_predictor(
    model: Model,
    baseline: bool = True,
    oracle: bool = True,
    matcher: Optional[MaskMatcher] = None,
) -> Callable[[EpisodeSample], Prediction]:
    heuristic = heuristic_matcher(model.config) if baseline else None
    matcher = matcher or model.matcher

    def predict(sample: EpisodeSample) -> Prediction:
        with no_grad():
            q = model.encode(sample.query)
            proposals = model.propose(q)
            supports = [(model.encode(img), mask) for img, mask in sample.supports]
            result = matcher.forward(supports, q, proposals)
            base = heuristic.forward(supports, q, proposals) if baseline else None
        pred = Prediction(mask=_binarize(result.blended.data))
        if base is not None:
            pred.baseline = _binarize(base.blended.data)
        if oracle:
            pred.proposals = np.stack([_binarize(m) for m in proposals.masks.data])
        return pred

    return predict


def evaluate(
    model: Model,
    split: str = "test",
    episodes: Optional[int] = None,
    k: Optional[int] = None,
    flags: Optional[MatcherFlags] = None,
    seed: Optional[int] = None,
    baseline: bool = True,
    oracle: bool = True,
    mismatched: Optional[bool] = None,
    checkpoint: str = "",
) -> EvalReport:
    """Episodic mIoU of ``model``; ``flags`` re-evaluates its proposals under another matcher configuration."""
    cfg = model.config
    matcher = matcher_with_flags(model, flags) if flags is not None and flags != cfg.flags else None
    episodes = episodes or cfg.episodes
    k = k or cfg.shots
    outcomes = run_episodes(
        model_predictor(model, baseline=baseline, oracle=oracle, matcher=matcher),
        split,
        episodes,
        k,
        cfg.eval_seed if seed is None else seed,
        image_size=cfg.image_size,
        fold=cfg.fold,
        mismatched=cfg.mismatched_support if mismatched is None else mismatched,
        workers=cfg.workers,
    )
    return build_report(outcomes, k, split, cfg.miou_mode, cfg.fingerprint(), checkpoint)


def evaluate_checkpoint(path: Path, cfg: Optional[TrainConfig] = None, **kwargs) -> EvalReport:
    model, _ = load_model(path, cfg)
    return evaluate(model, checkpoint=file_digest(path), **kwargs)


def oracle(model: Model, split: str = "test", episodes: Optional[int] = None, seed: Optional[int] = None) -> float:
    """mIoU when each episode scores its best proposal against the ground truth."""
    cfg = model.config
    outcomes = run_episodes(
        model_predictor(model, baseline=False, oracle=True, matcher=heuristic_matcher(cfg)),
        split,
        episodes or cfg.episodes,
        cfg.shots,
        cfg.eval_seed if seed is None else seed,
        image_size=cfg.image_size,
        fold=cfg.fold,
        workers=cfg.workers,
    )
    return aggregate(outcomes, "oracle", cfg.miou_mode)[1]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GridRow:
    sa: bool
    ca: bool
    lm: bool
    ca_mode: str = "learned"

    @property
    def label(self) -> str:
        ca = ("on*" if self.ca_mode == "nonparametric" else "on") if self.ca else "off"
        return f"sa={'on' if self.sa else 'off'} ca={ca} lm={'on' if self.lm else 'off'}"


def grid_rows() -> List[GridRow]:
    rows = [GridRow(sa, ca, lm) for sa in (False, True) for ca in (False, True) for lm in (False, True)]
    rows.append(GridRow(True, True, False, "nonparametric"))
    return rows


GRID_COLUMNS = ("sa", "ca", "lm", "ca_mode", "miou", "miou_std", "baseline_miou", "oracle_miou", "seeds", "per_seed")


@dataclass
class GridResult:
    row: GridRow
    miou: float
    miou_std: float
    baseline_miou: float
    oracle_miou: float
    seeds: List[int]
    per_seed: List[float]

    def to_record(self) -> Dict[str, object]:
        rec = {**asdict(self.row), **{k: getattr(self, k) for k in GRID_COLUMNS[4:]}}
        return {k: rec[k] for k in GRID_COLUMNS}


@dataclass
class AblationTable:
    results: List[GridResult]
    episodes: int
    k: int
    miou_mode: str

    def to_json(self) -> str:
        payload = {
            "columns": list(GRID_COLUMNS),
            "episodes": self.episodes,
            "k": self.k,
            "miou_mode": self.miou_mode,
            "rows": [r.to_record() for r in self.results],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AblationTable":
        data = json.loads(text)
        results = []
        for rec in data["rows"]:
            row = GridRow(rec["sa"], rec["ca"], rec["lm"], rec["ca_mode"])
            results.append(GridResult(row, rec["miou"], rec["miou_std"], rec["baseline_miou"], rec["oracle_miou"], list(rec["seeds"]), list(rec["per_seed"])))
        return cls(results, data["episodes"], data["k"], data["miou_mode"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in self.results:
            rec = r.to_record()
            rec["seeds"] = " ".join(str(s) for s in rec["seeds"])
            rec["per_seed"] = " ".join(repr(v) for v in rec["per_seed"])
            w.writerow([rec[c] for c in GRID_COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"# ablation over {self.episodes} test episodes, k={self.k}, mode={self.miou_mode}"]
        for r in self.results:
            lines.append(f"{r.row.label:<30} {r.miou:.4f} +- {r.miou_std:.4f}")
        return "\n".join(lines)

    def write(self, out_dir: Path, stem: str = "ablation") -> List[Path]:
        ensure_dir(out_dir)
        paths = [out_dir / f"{stem}.json", out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"]
        paths[0].write_text(self.to_json(), encoding="utf-8")
        paths[1].write_text(self.to_csv(), encoding="utf-8")
        paths[2].write_text(self.to_text() + "\n", encoding="utf-8")
        return paths


def ablation_grid(
    stage1: Path,
    cfg: TrainConfig,
    out_dir: Path,
    seeds: Optional[Sequence[int]] = None,
    rows: Optional[Sequence[GridRow]] = None,
) -> AblationTable:
    """Train and evaluate every matcher configuration on one shared stage-1 checkpoint."""
    seeds = list(seeds) if seeds else [cfg.seed]
    results = []
    for i, row in enumerate(rows or grid_rows()):
        per_seed, base, orc = [], [], []
        for s in seeds:
            row_cfg = cfg.with_overrides(stage="mm", sa=row.sa, ca=row.ca, lm=row.lm, ca_mode=row.ca_mode, seed=s)
            logger.info("ablation row %d (%s) seed %d", i, row.label, s)
            trained = train_stage2(row_cfg, stage1, out_dir / f"row{i}-seed{s}.ckpt")
            report = evaluate(trained.model)
            per_seed.append(report.miou)
            base.append(report.baseline_miou)
            orc.append(report.oracle_miou)
        results.append(
            GridResult(row, float(np.mean(per_seed)), float(np.std(per_seed)), float(np.mean(base)), float(np.mean(orc)), seeds, per_seed)
        )
    return AblationTable(results, cfg.episodes, cfg.shots, cfg.miou_mode)


def proposal_sweep(
    cfg: TrainConfig,
    out_dir: Path,
    counts: Sequence[int] = (4, 8, 16),
    seeds: Sequence[int] = (0, 1, 2),
) -> Dict[int, Dict[str, object]]:
    """Oracle mIoU per proposal count, each from its own stage-1 run, averaged over ``seeds``."""
    out: Dict[int, Dict[str, object]] = {}
    for n in counts:
        scores = []
        for s in seeds:
            run_cfg = cfg.with_overrides(stage="pos", num_proposals=n, seed=s)
            trained = train_stage1(run_cfg, out_dir / f"pos-n{n}-seed{s}.ckpt")
            scores.append(oracle(trained.model))
        out[n] = {"oracle_miou": float(np.mean(scores)), "per_seed": scores, "seeds": list(seeds)}
        logger.info("proposals=%d oracle mIoU %.4f", n, out[n]["oracle_miou"])
    return out


def compare_training_modes(
    cfg: TrainConfig,
    out_dir: Path,
    seeds: Sequence[int] = (0, 1, 2),
) -> Dict[str, Dict[str, object]]:
    """Two-stage against end-to-end training at the same total iteration budget."""
    budget = cfg.iterations_for("pos") + cfg.iterations_for("mm")
    two, joint = [], []
    for s in seeds:
        s1 = train_stage1(cfg.with_overrides(stage="pos", seed=s), out_dir / f"two-stage-pos-seed{s}.ckpt")
        s2 = train_stage2(cfg.with_overrides(stage="mm", seed=s), s1.checkpoint, out_dir / f"two-stage-mm-seed{s}.ckpt")
        two.append(evaluate(s2.model, baseline=False, oracle=False).miou)
        j = train_joint(cfg.with_overrides(stage="joint", seed=s, iterations=budget), out_dir / f"joint-seed{s}.ckpt")
        joint.append(evaluate(j.model, baseline=False, oracle=False).miou)
    return {
        "two_stage": {"miou": float(np.mean(two)), "per_seed": two},
        "joint": {"miou": float(np.mean(joint)), "per_seed": joint},
        "budget": {"iterations": budget, "seeds": list(seeds)},
    }
