from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import TrainConfig, from_dict, load_config
from .manifest import RunManifest, write_manifest
from .utils import ConfigError, MaskMatchError, ensure_dir


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return value == "on"


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _parse_set(items: Optional[List[str]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "iterations": "iterations",
    "k": "shots",
    "sa": "sa",
    "ca": "ca",
    "lm": "lm",
    "ca_mode": "ca_mode",
    "blend": "blend",
    "num_proposals": "num_proposals",
    "image_size": "image_size",
    "d_model": "d_model",
    "heads": "heads",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "weight_decay": "weight_decay",
    "grad_clip": "grad_clip",
    "fold": "fold",
    "episodes": "episodes",
    "workers": "workers",
    "miou_mode": "miou_mode",
    "positional_encoding": "positional_encoding",
    "dropout": "dropout",
}


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out = _parse_set(getattr(args, "set", None))
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    if getattr(args, "no_contrastive", False):
        out["use_contrastive"] = False
    if getattr(args, "no_augment", False):
        out["augment"] = False
    return out


def _resolve(args: argparse.Namespace, stage: Optional[str] = None) -> TrainConfig:
    overrides = _overrides(args)
    if stage is not None:
        overrides["stage"] = stage
    return load_config(args.config, overrides)


def _manifest(args: argparse.Namespace, cfg: TrainConfig, **kwargs) -> RunManifest:
    return RunManifest(
        command=args.cmd,
        config=cfg.to_dict(),
        seeds={"seed": cfg.seed, "encoder_seed": cfg.encoder_seed, "eval_seed": cfg.eval_seed},
        argv=list(args.argv),
        **kwargs,
    )


def cmd_train_pos(args: argparse.Namespace) -> int:
    from .checkpoint import file_digest
    from .training import train

    cfg = _resolve(args, "pos")
    out_dir = Path(args.out).resolve()
    ckpt = out_dir / f"pos-seed{cfg.seed}.ckpt"
    result = train(cfg, ckpt)
    m = _manifest(args, cfg, checkpoints={"stage1": str(result.checkpoint)})
    m.add_outputs([result.checkpoint, result.curve])
    write_manifest(out_dir, m)
    print(f"OK {result.checkpoint} {file_digest(result.checkpoint)}")
    return 0


def cmd_train_mm(args: argparse.Namespace) -> int:
    from .checkpoint import file_digest
    from .training import train

    out_dir = Path(args.out).resolve()
    if not (args.joint or args.stage1):
        print("train-mm needs --stage1 (or --joint to train from scratch)", file=sys.stderr)
        return 2
    stage = "joint" if args.joint else "mm"
    cfg = _resolve(args, stage)
    ckpt = out_dir / f"{stage}-k{cfg.shots}-seed{cfg.seed}.ckpt"
    init = Path(args.stage1).resolve() if args.stage1 else None
    result = train(cfg, ckpt, init)
    roles = {"output": str(result.checkpoint)}
    if args.stage1:
        roles["stage1"] = str(Path(args.stage1).resolve())
    m = _manifest(args, cfg, checkpoints=roles)
    m.add_outputs([result.checkpoint, result.curve])
    write_manifest(out_dir, m)
    print(f"OK {result.checkpoint} {file_digest(result.checkpoint)}")
    return 0


def _eval_config(args: argparse.Namespace, stored: Dict[str, Any]) -> TrainConfig:
    data = dict(stored)
    if args.config:
        from .config import read_config_file, resolve_config_path

        data.update(read_config_file(resolve_config_path(args.config)))
    data.update(_overrides(args))
    if args.seed is not None:
        # for eval, --seed picks the episodes
        data["seed"] = stored.get("seed", 0)
        data["eval_seed"] = args.seed
    if args.mismatched:
        data["mismatched_support"] = True
    return from_dict(data)


def cmd_eval(args: argparse.Namespace) -> int:
    from .checkpoint import file_digest, load_checkpoint
    from .evaluation import ablation_grid, evaluate
    from .training import load_model

    path = Path(args.checkpoint).resolve()
    stored = load_checkpoint(path)
    cfg = _eval_config(args, stored.config)
    out_dir = Path(args.out).resolve()
    m = _manifest(args, cfg, checkpoints={"input": str(path)})
    if args.ablation_grid:
        table = ablation_grid(path, cfg.with_overrides(stage="mm"), out_dir / "grid", seeds=args.seeds)
        print(table.to_text())
        m.add_outputs(table.write(out_dir))
        write_manifest(out_dir, m)
        return 0
    model, _ = load_model(path, cfg)
    report = evaluate(
        model,
        split=args.split,
        baseline=args.baseline or args.oracle,
        oracle=args.oracle,
        checkpoint=file_digest(path),
    )
    print(report.to_table())
    m.add_outputs(report.write(out_dir, stem=f"report-{args.split}-k{cfg.shots}-seed{cfg.eval_seed}"))
    write_manifest(out_dir, m)
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    from .episodes import dump_episode, sample_episode, verify_dump

    if args.verify:
        root = Path(args.verify).resolve()
        if not root.exists():
            print(f"not found: {root}", file=sys.stderr)
            return 1
        dirs = [d for d in sorted(root.iterdir()) if d.is_dir()]
        results: Dict[str, tuple] = {}
        with ThreadPoolExecutor(max_workers=max(1, min(16, len(dirs)))) as ex:
            fut_map = {ex.submit(verify_dump, d): d for d in dirs}
            for fut in as_completed(fut_map):
                results[fut_map[fut].name] = fut.result()
        bad = 0
        for d in dirs:
            ok, msg = results[d.name]
            print(f"{'OK' if ok else 'FAIL'} {d.name}: {msg}")
            bad += 0 if ok else 1
        return 0 if bad == 0 else 1

    cfg = _resolve(args)
    out_dir = Path(args.out).resolve()
    ensure_dir(out_dir)
    written = []
    for i in range(cfg.episodes):
        sample = sample_episode(cfg.seed + i, args.split, cfg.shots, cfg.image_size, cfg.fold, mismatched=cfg.mismatched_support or args.mismatched)
        path = dump_episode(sample, out_dir)
        written.append(path)
        if not args.quiet:
            print(f"OK {path}")
    m = _manifest(args, cfg)
    m.add_outputs([p / "meta.json" for p in written])
    write_manifest(out_dir, m)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .evaluation import compare_training_modes, proposal_sweep

    cfg = _resolve(args)
    out_dir = Path(args.out).resolve()
    ensure_dir(out_dir)
    payload: Dict[str, Any] = {}
    if args.proposals:
        res = proposal_sweep(cfg, out_dir / "proposals", counts=args.proposals, seeds=args.seeds)
        payload["proposals"] = {str(n): v for n, v in res.items()}
        for n, v in res.items():
            print(f"N={n:<3d} oracle mIoU {v['oracle_miou']:.4f}")
    if args.modes:
        res = compare_training_modes(cfg, out_dir / "modes", seeds=args.seeds)
        payload["modes"] = res
        print(f"two-stage {res['two_stage']['miou']:.4f}  joint {res['joint']['miou']:.4f}")
    if not payload:
        print("sweep: pass --proposals and/or --modes", file=sys.stderr)
        return 2
    path = out_dir / "sweep.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    m = _manifest(args, cfg)
    m.add_outputs([path])
    write_manifest(out_dir, m)
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file, or NAME under $MASKMATCH_CONFIG_DIR")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--k", type=int, help="shots per episode")
    p.add_argument("--sa", type=_on_off, metavar="on|off")
    p.add_argument("--ca", type=_on_off, metavar="on|off")
    p.add_argument("--lm", type=_on_off, metavar="on|off")
    p.add_argument("--ca-mode", dest="ca_mode", choices=["learned", "nonparametric"])
    p.add_argument("--blend", choices=["softmax", "linear"])
    p.add_argument("--num-proposals", dest="num_proposals", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--fold", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--miou-mode", dest="miou_mode", choices=["pixels", "episodes"])
    p.add_argument("--positional-encoding", dest="positional_encoding", choices=["off", "sine"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-contrastive", dest="no_contrastive", action="store_true")
    p.add_argument("--no-augment", dest="no_augment", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="maskmatch",
        description="Few-shot segmentation by matching support prototypes against mask proposals",
    )
    sp = ap.add_subparsers(dest="cmd", required=True)

    p = sp.add_parser("train-pos", help="stage 1: train the proposal segmenter")
    _common(p)
    p.set_defaults(func=cmd_train_pos)

    p = sp.add_parser("train-mm", help="stage 2: train the matching module on a frozen stage-1 checkpoint")
    _common(p)
    p.add_argument("--stage1", help="stage-1 checkpoint")
    p.add_argument("--joint", action="store_true", help="train proposals and matching together")
    p.set_defaults(func=cmd_train_mm)

    p = sp.add_parser("eval", help="episodic mIoU of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--oracle", action="store_true", help="also score the best proposal per episode")
    p.add_argument("--baseline", action="store_true", help="also score argmax-cosine selection")
    p.add_argument("--ablation-grid", dest="ablation_grid", action="store_true", help="train and score every matcher configuration on this stage-1 checkpoint")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds for --ablation-grid")
    p.add_argument("--mismatched", action="store_true", help="supports from a different class than the query")
    p.set_defaults(func=cmd_eval)

    p = sp.add_parser("gen-data", help="dump synthetic episodes, or verify a dump")
    _common(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--mismatched", action="store_true")
    p.add_argument("--verify", metavar="ROOT", help="check dumped episode directories under ROOT")
    p.set_defaults(func=cmd_gen_data)

    p = sp.add_parser("sweep", help="proposal-count and training-mode experiments")
    _common(p)
    p.add_argument("--proposals", type=_int_list, help="comma-separated proposal counts, e.g. 4,8,16")
    p.add_argument("--modes", action="store_true", help="two-stage vs joint at equal budget")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    raw = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(raw)
    args.argv = raw
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MaskMatchError as e:
        print(str(e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
