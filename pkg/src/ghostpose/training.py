"""Data pipeline, training loop, checkpoint round-trips and evaluation helpers."""

from __future__ import annotations

import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, CheckpointError
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .config import RunConfig, from_dict
from .dataset import DemoRecord
from .head import KeyposeAction
from .keyposes import Demonstration, demo_keyposes, make_tuples
from .model import KeyposeDetector, ModelPolicy, Sample
from .optim import AdamW, scheduled_lr
from .scene import CameraView
from .synth import EvalResult, SceneGenerationError, evaluate, generate_scene, script_demo

log = logging.getLogger(__name__)


def generate_demos(cfg: RunConfig, n: int | None = None, seed_start: int | None = None) -> list[Demonstration]:
    """Scripted demonstrations for consecutive training seeds; seeds whose scenes cannot be built are skipped."""
    n = cfg.train.n_demos if n is None else n
    seed = cfg.seeds.train_start if seed_start is None else seed_start
    synth, ws = cfg.scene.build(), cfg.workspace.build()
    demos = []
    while len(demos) < n:
        if seed >= cfg.seeds.train_end:
            raise RuntimeError(f"ran out of training seeds after {len(demos)} demos")
        try:
            scene = generate_scene(seed, cfg.task, synth, ws)
        except SceneGenerationError as exc:
            log.debug("skipping seed %d: %s", seed, exc)
        else:
            demos.append(script_demo(scene, synth))
        seed += 1
    return demos


def demo_records(demos: Sequence[Demonstration]) -> list[DemoRecord]:
    return [DemoRecord(d, demo_keyposes(d)) for d in demos]


def build_samples(model: KeyposeDetector, records: Sequence[DemoRecord]) -> list[Sample]:
    """One sample per (observation, next keypose) tuple.  Geometry is lifted once per distinct view set."""
    cache: dict[int, tuple] = {}
    samples = []
    for i, rec in enumerate(records):
        for tp in make_tuples(rec.demo, rec.keyposes, i):
            views = rec.demo.observations[tp.t]
            key = id(views)
            if key not in cache:
                cache[key] = model.lift(views)
            samples.append(Sample(views, cache[key], rec.demo.tokens, tp.proprio, tp.target))
    if not samples:
        raise ValueError("no training tuples; every demonstration ended on its first keypose")
    return samples


def crop_views(views: Sequence[CameraView], rng: np.random.Generator, min_scale: float) -> list[CameraView]:
    """Random crop shared by all views, resized back with nearest-neighbour sampling; intrinsics follow."""
    h, w = views[0].hw
    s = rng.uniform(min_scale, 1.0)
    ch, cw = max(16, int(round(h * s))), max(16, int(round(w * s)))
    y0, x0 = int(rng.integers(h - ch + 1)), int(rng.integers(w - cw + 1))
    sx, sy = w / cw, h / ch
    # nearest source pixel to each output pixel center, matching the intrinsics update below
    rows = y0 + np.clip(np.round((np.arange(h) + 0.5) / sy - 0.5), 0, ch - 1).astype(int)
    cols = x0 + np.clip(np.round((np.arange(w) + 0.5) / sx - 0.5), 0, cw - 1).astype(int)
    out = []
    for v in views:
        K = v.intrinsics.copy()
        # pixel centers: u_new = (u_old - x0 + 0.5) * sx - 0.5
        K[0, 0] *= sx
        K[0, 2] = (K[0, 2] - x0 + 0.5) * sx - 0.5
        K[1, 1] *= sy
        K[1, 2] = (K[1, 2] - y0 + 0.5) * sy - 0.5
        out.append(CameraView(v.rgb[np.ix_(rows, cols)], v.depth[np.ix_(rows, cols)], K, v.extrinsics))
    return out


@dataclass
class TrainResult:
    model: KeyposeDetector
    optimizer: AdamW
    losses: list[float] = field(default_factory=list)
    parts: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def make_optimizer(model: KeyposeDetector, cfg: RunConfig) -> AdamW:
    o = cfg.optim
    return AdamW(
        model.named_parameters(),
        lr=o.lr,
        betas=(o.beta1, o.beta2),
        weight_decay=o.weight_decay,
        grad_clip=o.grad_clip or None,
    )


def train(
    cfg: RunConfig,
    samples: Sequence[Sample],
    model: KeyposeDetector | None = None,
    steps: int | None = None,
    callback: Callable[[int, dict], None] | None = None,
    optimizer: AdamW | None = None,
) -> TrainResult:
    """Minibatch AdamW on the combined loss.  Bit-reproducible for a fixed config and sample list."""
    steps = cfg.train.steps if steps is None else steps
    model = model if model is not None else KeyposeDetector(cfg, np.random.default_rng([cfg.seeds.seed, 0]))
    opt = optimizer if optimizer is not None else make_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seeds.seed, 1, opt.step_count])
    batch = min(cfg.train.batch_size, len(samples))
    result = TrainResult(model, opt)
    start = time.perf_counter()
    with threadpool_limits(limits=cfg.train.threads):
        for step in range(steps):
            idx = rng.choice(len(samples), size=batch, replace=False)
            chosen = [samples[i] for i in idx]
            if cfg.train.crop_augment:
                chosen = [_cropped(model, s, rng, cfg.train.crop_min_scale) for s in chosen]
            o = cfg.optim
            opt.lr = scheduled_lr(o.lr, opt.step_count, cfg.train.steps, o.warmup_steps, o.schedule, o.min_lr_ratio)
            opt.zero_grad()
            loss, parts = model.loss(chosen, rng)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
            loss.backward()
            opt.step()
            result.losses.append(loss.item())
            result.parts.append(parts)
            if callback is not None:
                callback(step, parts)
            if cfg.train.log_every and (step + 1) % cfg.train.log_every == 0:
                log.info("step %d loss %.4f", step + 1, float(np.mean(result.losses[-cfg.train.log_every :])))
    result.seconds = time.perf_counter() - start
    return result


def _cropped(model: KeyposeDetector, s: Sample, rng: np.random.Generator, min_scale: float) -> Sample:
    views = crop_views(s.views, rng, min_scale)
    return Sample(views, model.lift(views), s.tokens, s.proprio, s.target)


# -- checkpoints ------------------------------------------------------------------

def save_model(path: str | Path, model: KeyposeDetector, optimizer: AdamW | None = None, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "format": "keypose-detector"}
    if optimizer is not None:
        meta["optimizer_step"] = optimizer.step_count
    meta.update(extra or {})
    ckpt = Checkpoint(model.state_dict(), meta)
    if optimizer is not None:
        ckpt.adam_m, ckpt.adam_v = dict(optimizer.m), dict(optimizer.v)
    save_checkpoint(path, ckpt)


def load_model(path: str | Path, expect: RunConfig | None = None) -> tuple[KeyposeDetector, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "config" not in ckpt.meta:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    cfg = from_dict(ckpt.meta["config"])
    if expect is not None and expect.model != cfg.model:
        raise CheckpointError(f"{path}: checkpoint model {cfg.model} does not match requested {expect.model}")
    model = KeyposeDetector(cfg, np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    return model, ckpt


def restore_optimizer(model: KeyposeDetector, ckpt: Checkpoint) -> AdamW:
    opt = make_optimizer(model, model.cfg)
    if ckpt.adam_m:
        opt.load_state(ckpt.meta.get("optimizer_step", 0), ckpt.adam_m, ckpt.adam_v)
    return opt


# -- evaluation ---------------------------------------------------------------------

def evaluate_model(
    model: KeyposeDetector,
    episodes: int | None = None,
    total_points: int | None = None,
    seed_start: int | None = None,
    log_path: str | Path | None = None,
    policy_seed: int = 0,
) -> EvalResult:
    cfg = model.cfg
    with threadpool_limits(limits=cfg.train.threads):
        return evaluate(
            ModelPolicy(model, total_points or cfg.ghosts.eval_points, policy_seed),
            cfg.task,
            cfg.eval.episodes if episodes is None else episodes,
            cfg.seeds.eval_start if seed_start is None else seed_start,
            cfg.scene.build(),
            cfg.workspace.build(),
            log_path=log_path,
        )


def predict_action(model: KeyposeDetector, obs, total_points: int | None = None, seed: int = 0) -> KeyposeAction:
    return model.predict(obs, total_points, np.random.default_rng(seed))


def run_manifest(command: str, cfg: RunConfig | None, **fields) -> dict:
    manifest = {
        "command": command,
        "argv": sys.argv,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if cfg is not None:
        manifest["config"] = cfg.to_dict()
    manifest.update(fields)
    return manifest


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
