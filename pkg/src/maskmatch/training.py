from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, file_digest, load_checkpoint, save_checkpoint
from .config import TrainConfig, from_dict
from .encoder import Encoder, FeaturePyramid
from .episodes import EpisodeSample, Scene, augment, augment_scene, generate_scene, sample_episode
from .matching import MaskMatcher, MatchResult, mm_loss_terms
from .nn import ParamStore
from .optim import OptimizerState, adamw_step, clip_grad_norm, collect_grads, poly_lr
from .pos import PotentialObjectsSegmenter, ProposalSet, downsample_nearest, pos_loss, proposal_ious
from .tensor import Tensor, backward, no_grad
from .utils import CheckpointError, ConfigError, ContractError, derive_rng

logger = logging.getLogger(__name__)

PROPOSAL_STRIDE = 4
# architecture keys a stage-1 checkpoint must agree on
ARCH_KEYS = ("image_size", "d_model", "heads", "pos_ffn", "num_proposals", "encoder_seed", "positional_encoding")

_POS_INIT = 201
MM_INIT_STREAM = 202
_SAMPLE_STREAM = 301
_DROPOUT_STREAM = 302
_PROBE_STREAM = 303


@dataclass
class Model:
    config: TrainConfig
    store: ParamStore
    encoder: Encoder
    pos: PotentialObjectsSegmenter
    matcher: MaskMatcher

    def encode(self, image: np.ndarray) -> FeaturePyramid:
        return self.encoder.encode(image)

    def propose(self, pyramid: FeaturePyramid, rng: Optional[np.random.Generator] = None) -> ProposalSet:
        return self.pos.propose(pyramid, rng)

    def match(self, sample: EpisodeSample, rng: Optional[np.random.Generator] = None) -> Tuple[ProposalSet, MatchResult]:
        q = self.encode(sample.query)
        proposals = self.propose(q, rng)
        supports = [(self.encode(img), mask) for img, mask in sample.supports]
        return proposals, self.matcher.forward(supports, q, proposals, rng)


def build_model(cfg: TrainConfig) -> Model:
    store = ParamStore()
    encoder = Encoder(channels=cfg.d_model, seed=cfg.encoder_seed)
    pos = PotentialObjectsSegmenter(
        store,
        derive_rng(cfg.seed, _POS_INIT),
        d_model=cfg.d_model,
        heads=cfg.heads,
        d_ffn=cfg.pos_ffn,
        num_proposals=cfg.num_proposals,
        positional_encoding=cfg.positional_encoding,
        dropout=cfg.dropout,
    )
    matcher = MaskMatcher(
        store,
        derive_rng(cfg.seed, MM_INIT_STREAM),
        num_proposals=cfg.num_proposals,
        d_model=cfg.d_model,
        heads=cfg.heads,
        ca_ffn=cfg.ca_ffn,
        ca_layers=cfg.ca_layers,
        flags=cfg.flags,
        positional_encoding=cfg.positional_encoding,
        dropout=cfg.dropout,
    )
    return Model(config=cfg, store=store, encoder=encoder, pos=pos, matcher=matcher)


def check_compatible(cfg: TrainConfig, stored: Dict[str, object], source: Path) -> None:
    for key in ARCH_KEYS:
        if key in stored and stored[key] != getattr(cfg, key):
            raise ConfigError(key, f"{source} was trained with {key}={stored[key]!r}, config has {getattr(cfg, key)!r}")


def load_model(path: Path, cfg: Optional[TrainConfig] = None) -> Tuple[Model, Checkpoint]:
    """Model with every parameter the checkpoint holds; ``cfg`` defaults to the stored config."""
    ckpt = load_checkpoint(path)
    if cfg is None:
        cfg = from_dict(ckpt.config)
    else:
        check_compatible(cfg, ckpt.config, Path(path))
    model = build_model(cfg)
    for prefix in ("pos", "mm"):
        names = model.store.names(prefix)
        if names and all(n in ckpt.params for n in names):
            model.store.load_state_dict(ckpt.params, prefix=prefix)
        elif prefix == "pos":
            raise CheckpointError(f"{path} has no proposal segmenter parameters")
    return model, ckpt


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------
def _sample_seed(seed: int, stream: int, index: int) -> int:
    return int(derive_rng(seed, stream, index).integers(0, 2**31 - 1))


def proposal_targets(masks: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Instance masks at proposal resolution; objects lost by the stride are dropped."""
    out = [downsample_nearest(np.asarray(m, dtype=bool), PROPOSAL_STRIDE) for m in masks]
    return [m for m in out if m.any()]


def training_scene(cfg: TrainConfig, index: int, stream: int = _SAMPLE_STREAM) -> Scene:
    attempt = 0
    while True:
        seed = _sample_seed(cfg.seed, stream, index * 64 + attempt)
        scene = generate_scene(seed, "train", cfg.image_size, cfg.fold)
        if cfg.augment and stream == _SAMPLE_STREAM:
            scene = augment_scene(scene, seed)
        if proposal_targets([o.mask for o in scene.objects]):
            return scene
        attempt += 1


def training_episode(cfg: TrainConfig, index: int, stream: int = _SAMPLE_STREAM) -> EpisodeSample:
    seed = _sample_seed(cfg.seed, stream, index)
    sample = sample_episode(seed, "train", cfg.shots, cfg.image_size, cfg.fold)
    if cfg.augment and stream == _SAMPLE_STREAM:
        sample = augment(sample, seed)
    return sample


class SampleQueue:
    """Bounded producer/consumer feed; items come out in index order."""

    _DONE = object()

    def __init__(self, produce: Callable[[int], object], count: int, capacity: int):
        self._q: "queue.Queue" = queue.Queue(maxsize=max(1, capacity))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(produce, count), daemon=True)
        self._thread.start()

    def _run(self, produce: Callable[[int], object], count: int) -> None:
        try:
            for i in range(count):
                item = produce(i)
                while not self._stop.is_set():
                    try:
                        self._q.put(("ok", item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as e:  # surfaced to the consumer
            self._q.put(("err", e))
            return
        self._q.put(("ok", self._DONE))

    def get(self) -> object:
        kind, item = self._q.get()
        if kind == "err":
            raise item
        if item is self._DONE:
            raise StopIteration
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)

    def __iter__(self) -> Iterator[object]:
        while True:
            try:
                yield self.get()
            except StopIteration:
                return


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def scene_loss_terms(model: Model, scene: Scene, rng: Optional[np.random.Generator] = None) -> Dict[str, Tensor]:
    proposals = model.propose(model.encode(scene.image), rng)
    return {"L_P": pos_loss(proposals, proposal_targets([o.mask for o in scene.objects]))}


def episode_loss_terms(
    model: Model,
    sample: EpisodeSample,
    rng: Optional[np.random.Generator] = None,
    with_pos: bool = False,
) -> Dict[str, Tensor]:
    cfg = model.config
    proposals, result = model.match(sample, rng)
    gt = downsample_nearest(sample.query_gt, PROPOSAL_STRIDE)
    terms: Dict[str, Tensor] = {}
    if with_pos:
        targets = proposal_targets(sample.query_objects)
        if targets:
            terms["L_P"] = pos_loss(proposals, targets)
        else:
            logger.debug("episode %d: no object survives the proposal stride, L_P skipped", sample.seed)
    terms.update(
        mm_loss_terms(
            result.blended,
            gt,
            result.S_hat,
            proposal_ious(proposals.masks.data, gt),
            lambda_mask=cfg.lambda_mask,
            lambda_contrast=cfg.lambda_contrast,
            use_contrastive=cfg.use_contrastive,
        )
    )
    return terms


def total_loss(terms: Dict[str, Tensor]) -> Tensor:
    total = None
    for key in sorted(terms):
        total = terms[key] if total is None else total + terms[key]
    return total


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
@dataclass
class LossRecord:
    iteration: int
    lr: float
    components: Dict[str, float]
    total: float
    grad_norm: float = 0.0


@dataclass
class TrainResult:
    checkpoint: Path
    curve: Path
    records: List[LossRecord]
    model: Model
    fingerprints: Dict[str, Tuple[str, str]] = field(default_factory=dict)  # prefix -> (before, after)


CURVE_COLUMNS = ("it", "lr", "L_P", "L_M", "L_co", "total", "grad_norm")


def write_curve(records: Sequence[LossRecord], path: Path) -> Path:
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for r in records:
            row = [r.iteration, repr(r.lr)]
            row += [repr(r.components[k]) if k in r.components else "" for k in ("L_P", "L_M", "L_co")]
            row += [repr(r.total), repr(r.grad_norm)]
            w.writerow(row)
    return path


def curve_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.stem + ".loss.csv")


def run_updates(
    model: Model,
    params: List[Tuple[str, Tensor]],
    produce: Callable[[int], object],
    loss_fn: Callable[[object, np.random.Generator], Dict[str, Tensor]],
    iterations: int,
    state: Optional[OptimizerState] = None,
) -> Tuple[List[LossRecord], OptimizerState]:
    cfg = model.config
    state = state or OptimizerState.for_params(params)
    records: List[LossRecord] = []
    if iterations == 0 or not params:
        return records, state
    batch = cfg.batch_size
    feed = SampleQueue(produce, iterations * batch, capacity=2 * batch)
    try:
        for it in range(iterations):
            lr = poly_lr(it, iterations, cfg.base_lr, cfg.poly_power)
            model.store.zero_grad()
            summed: Dict[str, Tensor] = {}
            for b in range(batch):
                terms = loss_fn(feed.get(), derive_rng(cfg.seed, _DROPOUT_STREAM, it, b))
                for k, v in terms.items():
                    summed[k] = v if k not in summed else summed[k] + v
            terms = {k: v * (1.0 / batch) for k, v in summed.items()}
            loss = total_loss(terms)
            norm = 0.0
            if loss.requires_grad:
                backward(loss)
                grads = collect_grads(params)
                norm = clip_grad_norm(grads, cfg.grad_clip)
                adamw_step(params, grads, state, lr, cfg.weight_decay)
            elif it == 0:
                logger.warning("loss does not depend on any trainable parameter; no updates will happen")
            rec = LossRecord(it, lr, {k: v.item() for k, v in terms.items()}, loss.item(), norm)
            records.append(rec)
            if it % cfg.log_every == 0 or it == iterations - 1:
                parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.components.items()))
                logger.info("it %d/%d lr=%.3g %s total=%.4f", it + 1, iterations, lr, parts, rec.total)
    finally:
        feed.close()
    return records, state


def _save(model: Model, out: Path, records: List[LossRecord], state: OptimizerState, meta: Dict[str, object]) -> Tuple[Path, Path]:
    cfg = model.config
    meta = {"encoder": model.encoder.fingerprint(), **meta}
    save_checkpoint(
        out,
        model.store.state_dict(),
        config=cfg.to_dict(),
        seeds={"seed": cfg.seed, "encoder_seed": cfg.encoder_seed},
        optimizer=state,
        meta=meta,
    )
    return out, write_curve(records, curve_path(out))


def _fingerprints(model: Model) -> Dict[str, str]:
    return {"encoder": model.encoder.fingerprint(), "pos": model.store.fingerprint("pos"), "mm": model.store.fingerprint("mm")}


def _probe_meta(model: Model, stage: str, start: float) -> Dict[str, object]:
    end = probe_loss(model, stage)
    logger.info("%s probe loss %.4f -> %.4f", stage, start, end)
    return {"probe": [start, end]}


def _check_frozen(before: Dict[str, str], after: Dict[str, str], frozen: Sequence[str]) -> Dict[str, Tuple[str, str]]:
    for key in frozen:
        if before[key] != after[key]:
            raise ContractError(f"frozen parameters under {key!r} changed during training")
    return {k: (before[k], after[k]) for k in before}


def train_stage1(cfg: TrainConfig, out: Path) -> TrainResult:
    """Optimise the proposal segmenter on L_P over training scenes; the encoder stays fixed."""
    if cfg.stage != "pos":
        raise ConfigError("stage", f"stage 1 needs stage=pos, got {cfg.stage!r}")
    model = build_model(cfg)
    model.store.freeze("mm")
    before = _fingerprints(model)
    start = probe_loss(model, "pos")
    params = model.store.trainable()
    records, state = run_updates(
        model,
        params,
        lambda i: training_scene(cfg, i),
        lambda scene, rng: scene_loss_terms(model, scene, rng),
        cfg.iterations_for("pos"),
    )
    prints = _check_frozen(before, _fingerprints(model), ("encoder", "mm"))
    ckpt, curve = _save(model, out, records, state, {"stage": "pos", **_probe_meta(model, "pos", start)})
    return TrainResult(ckpt, curve, records, model, prints)


def train_stage2(cfg: TrainConfig, stage1: Path, out: Path) -> TrainResult:
    """Optimise only the matching module; encoder and proposal segmenter come from ``stage1`` and stay fixed."""
    if cfg.stage != "mm":
        raise ConfigError("stage", f"stage 2 needs stage=mm, got {cfg.stage!r}")
    stage1 = Path(stage1)
    if not stage1.is_file():
        raise CheckpointError(f"stage-1 checkpoint not found: {stage1}")
    ckpt = load_checkpoint(stage1)
    check_compatible(cfg, ckpt.config, stage1)
    model = build_model(cfg)
    model.store.load_state_dict(ckpt.params, prefix="pos")
    model.store.freeze("pos")
    before = _fingerprints(model)
    start = probe_loss(model, "mm")
    params = model.store.trainable()
    if not params:
        logger.warning("matching module has nothing learnable with sa=%s ca=%s(%s) lm=%s; checkpoint only", cfg.sa, cfg.ca, cfg.ca_mode, cfg.lm)
    records, state = run_updates(
        model,
        params,
        lambda i: training_episode(cfg, i),
        lambda sample, rng: episode_loss_terms(model, sample, rng),
        cfg.iterations_for("mm"),
    )
    prints = _check_frozen(before, _fingerprints(model), ("encoder", "pos"))
    path, curve = _save(model, out, records, state, {"stage": "mm", "stage1": file_digest(stage1), **_probe_meta(model, "mm", start)})
    return TrainResult(path, curve, records, model, prints)


def train_joint(cfg: TrainConfig, out: Path, init: Optional[Path] = None) -> TrainResult:
    """Proposal segmenter and matching module together on L_P + lambda_mask L_M + lambda_contrast L_co."""
    if cfg.stage != "joint":
        raise ConfigError("stage", f"joint training needs stage=joint, got {cfg.stage!r}")
    model = build_model(cfg)
    meta: Dict[str, object] = {"stage": "joint"}
    if init is not None:
        ckpt = load_checkpoint(Path(init))
        check_compatible(cfg, ckpt.config, Path(init))
        model.store.load_state_dict(ckpt.params, prefix="pos")
        meta["stage1"] = file_digest(Path(init))
    before = _fingerprints(model)
    start = probe_loss(model, "joint")
    records, state = run_updates(
        model,
        model.store.trainable(),
        lambda i: training_episode(cfg, i),
        lambda sample, rng: episode_loss_terms(model, sample, rng, with_pos=True),
        cfg.iterations_for("joint"),
    )
    prints = _check_frozen(before, _fingerprints(model), ("encoder",))
    meta.update(_probe_meta(model, "joint", start))
    path, curve = _save(model, out, records, state, meta)
    return TrainResult(path, curve, records, model, prints)


def train(cfg: TrainConfig, out: Path, stage1: Optional[Path] = None) -> TrainResult:
    if cfg.stage == "pos":
        return train_stage1(cfg, out)
    if cfg.stage == "mm":
        if stage1 is None:
            raise ConfigError("stage1", "stage=mm needs a stage-1 checkpoint")
        return train_stage2(cfg, stage1, out)
    return train_joint(cfg, out, stage1)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------
def probe_loss(model: Model, stage: str, count: int = 4) -> float:
    """Mean loss on a fixed, unaugmented batch drawn apart from the training stream."""
    cfg = model.config
    values = []
    with no_grad():
        for i in range(count):
            if stage == "pos":
                terms = scene_loss_terms(model, training_scene(cfg, i, _PROBE_STREAM))
            else:
                terms = episode_loss_terms(model, training_episode(cfg, i, _PROBE_STREAM), with_pos=(stage == "joint"))
            values.append(total_loss(terms).item())
    return float(np.mean(values))
