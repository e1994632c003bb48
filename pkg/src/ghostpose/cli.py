"""Command-line entry points: gen, train, eval, gradcheck, inspect.

Every command that produces output also writes a JSON run manifest next to it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import MAGIC as CKPT_MAGIC
from .checkpoint import CheckpointError
from .checkpoint import load as load_checkpoint
from .config import ConfigError, dump_config, load_config
from .dataset import MAGIC as DATA_MAGIC
from .dataset import DatasetError, read_dataset, write_dataset
from .scene import SCENE_MAGIC, read_scene

log = logging.getLogger("ghostpose")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set optim.lr=0.0005 (repeatable)")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def cmd_gen(args) -> int:
    from .training import demo_records, generate_demos, run_manifest, write_manifest

    cfg = load_config(args.config, args.overrides)
    t = time.perf_counter()
    records = demo_records(generate_demos(cfg, args.n_demos, args.seed_start))
    write_dataset(args.out, records)
    info = {"demos": len(records), "seconds": time.perf_counter() - t, "output": str(args.out)}
    write_manifest(_manifest_path(args.out), run_manifest("gen", cfg, **info))
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .model import KeyposeDetector
    from .training import (
        build_samples,
        demo_records,
        generate_demos,
        load_model,
        restore_optimizer,
        run_manifest,
        save_model,
        train,
        write_manifest,
    )

    cfg = load_config(args.config, args.overrides)
    if args.resume:
        model, ckpt = load_model(args.resume, cfg)
        opt = restore_optimizer(model, ckpt)
    else:
        model = KeyposeDetector(cfg, np.random.default_rng([cfg.seeds.seed, 0]))
        opt = None
    records = read_dataset(args.data) if args.data else demo_records(generate_demos(cfg))
    samples = build_samples(model, records)
    loss_log = open(args.out.with_name(args.out.name + ".loss.jsonl"), "w", encoding="utf-8")

    def on_step(step, parts):
        loss_log.write(json.dumps({"step": step, **parts}, sort_keys=True) + "\n")

    with loss_log:
        result = train(cfg, samples, model, steps=args.steps, callback=on_step, optimizer=opt)
    save_model(args.out, model, result.optimizer, {"train_seconds": result.seconds})
    info = {
        "steps": len(result.losses),
        "samples": len(samples),
        "train_seconds": result.seconds,
        "final_loss": result.losses[-1] if result.losses else None,
        "parameters": model.num_parameters(),
        "output": str(args.out),
    }
    write_manifest(_manifest_path(args.out), run_manifest("train", cfg, **info))
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate_model, load_model, run_manifest, write_manifest

    model, _ = load_model(args.checkpoint)
    t = time.perf_counter()
    result = evaluate_model(model, args.episodes, args.points, args.seed_start, args.log, args.policy_seed)
    info = {**result.summary(), "points": args.points or model.cfg.ghosts.eval_points,
            "seconds": time.perf_counter() - t, "checkpoint": str(args.checkpoint)}
    out = args.log or args.checkpoint.with_name(args.checkpoint.name + ".eval")
    write_manifest(_manifest_path(Path(out)), run_manifest("eval", model.cfg, **info))
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import op_suite, tied_stack_check

    worst = {}
    for seed in range(args.seeds):
        for name, err in op_suite(seed, args.step).items():
            worst[name] = max(worst.get(name, 0.0), err)
        if not args.ops_only:
            worst["tied_stack"] = max(worst.get("tied_stack", 0.0), tied_stack_check(seed, args.step))
    for name, err in sorted(worst.items()):
        print(f"{name:22s} {err:.3e}")
    bad = {k: v for k, v in worst.items() if not v < args.tolerance}
    print(f"{'FAIL' if bad else 'PASS'}: worst relative error {max(worst.values()):.3e} over {args.seeds} seeds")
    return 1 if bad else 0


def cmd_inspect(args) -> int:
    head = args.path.read_bytes()[:8]
    if head == CKPT_MAGIC:
        ckpt = load_checkpoint(args.path)
        info = {
            "kind": "checkpoint",
            "arrays": len(ckpt.params),
            "parameters": int(sum(a.size for a in ckpt.params.values())),
            "optimizer_state": bool(ckpt.adam_m),
            "meta": {k: v for k, v in ckpt.meta.items() if k != "config"},
        }
        if "config" in ckpt.meta:
            info["model"] = ckpt.meta["config"].get("model")
    elif head == DATA_MAGIC:
        records = read_dataset(args.path)
        info = {
            "kind": "dataset",
            "demos": len(records),
            "steps": [len(r.demo) for r in records],
            "keyposes": [r.keyposes for r in records],
            "instructions": sorted({r.demo.instruction for r in records}),
        }
    elif head == SCENE_MAGIC:
        views = read_scene(args.path)
        info = {"kind": "scene", "views": len(views), "size": list(views[0].hw),
                "valid_depth": [float((v.depth > 0).mean()) for v in views]}
    else:
        print(f"error: {args.path}: unrecognized file type", file=sys.stderr)
        return 2
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return 0


def cmd_config(args) -> int:
    print(dump_config(load_config(args.config, args.overrides)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghostpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate scripted demonstrations into a dataset file")
    _config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-demos", type=int)
    p.add_argument("--seed-start", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a detector and write a checkpoint")
    _config_args(p)
    p.add_argument("--data", type=Path, help="dataset file; generated from the config when omitted")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint with optimizer state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation on held-out seeds")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--points", type=int, help="ghost point budget at inference")
    p.add_argument("--seed-start", type=int)
    p.add_argument("--policy-seed", type=int, default=0)
    p.add_argument("--log", type=Path, help="JSONL per-episode log")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the tied stack")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="summarize a checkpoint, dataset or scene file")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("config", help="print the resolved config")
    _config_args(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
