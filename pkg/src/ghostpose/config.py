"""Run configuration with strict schema validation.

Configs are YAML files whose keys mirror the dataclasses below.  Unknown keys
are errors.  ``apply_overrides`` accepts ``section.key=value`` strings whose
values are parsed as YAML scalars/lists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .geometry import Workspace
from .synth import TASKS, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorkspaceConfig:
    lo: list[float] = field(default_factory=lambda: [-0.5, -0.5, -0.1])
    hi: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.9])

    def build(self) -> Workspace:
        return Workspace(tuple(self.lo), tuple(self.hi))


@dataclass
class SceneConfig:
    image_size: int = 128
    n_views: int = 2
    n_distractors: int = 2
    depth_noise: float = 0.0
    variations: int = 1

    def build(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size,
            n_views=self.n_views,
            n_distractors=self.n_distractors,
            depth_noise=self.depth_noise,
            variations=self.variations,
        )


@dataclass
class ModelConfig:
    d: int = 60
    heads: int = 2
    layers: int = 2
    ffn_mult: int = 2
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    position_scale: float = 100.0  # rotary angles are computed on positions in centimeters
    rotary_base: float = 10000.0


@dataclass
class GhostConfig:
    diameters: list[float] = field(default_factory=lambda: [0.16, 0.04])
    train_points: int = 1000
    eval_points: int = 10000
    local_k: int = 128  # 0: coarse tokens per view x views
    center_jitter: float = 0.5  # training centers of later stages: ground truth within this fraction of the stage radius
    soft_targets: bool = False
    soft_temperature: float = 0.01


@dataclass
class LossConfig:
    position: float = 1.0
    rotation: float = 10.0
    open: float = 1.0
    collision: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    grad_clip: float = 0.0  # 0 disables
    warmup_steps: int = 0
    schedule: str = "constant"  # "constant" | "cosine" (decays over train.steps)
    min_lr_ratio: float = 0.05


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    n_demos: int = 50
    crop_augment: bool = True
    crop_min_scale: float = 0.8
    yaw_augment: bool = False
    log_every: int = 50
    threads: int = 1


@dataclass
class EvalConfig:
    episodes: int = 500


@dataclass
class SeedConfig:
    seed: int = 0
    train_start: int = 0
    train_end: int = 1_000_000
    eval_start: int = 1_000_000
    eval_end: int = 2_000_000


@dataclass
class AblationConfig:
    untie_weights: bool = False
    absolute_pe: bool = False
    global_coarse_only: bool = False
    lattice: bool = False


@dataclass
class RunConfig:
    task: str = "reach-above"
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ghosts: GhostConfig = field(default_factory=GhostConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        m = self.model
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task {self.task!r}; expected one of {TASKS}")
        if m.d % (6 * m.heads):
            raise ConfigError(f"model.d: {m.d} must be a multiple of 6 x heads ({6 * m.heads})")
        if self.optim.schedule not in ("constant", "cosine"):
            raise ConfigError(f"optim.schedule: expected 'constant' or 'cosine', got {self.optim.schedule!r}")
        if len(m.encoder_widths) != 3:
            raise ConfigError("model.encoder_widths: need three widths")
        if self.scene.image_size % 16:
            raise ConfigError("scene.image_size: must be divisible by 16")
        g = self.ghosts
        if len(g.diameters) < 1 or any(b >= a for a, b in zip(g.diameters, g.diameters[1:])):
            raise ConfigError(f"ghosts.diameters: must strictly decrease, got {g.diameters}")
        if not 0.0 <= g.center_jitter <= 1.0:
            raise ConfigError(f"ghosts.center_jitter: must be in [0, 1], got {g.center_jitter}")
        n_stages = len(g.diameters) + 1
        if g.train_points < n_stages or g.eval_points < n_stages:
            raise ConfigError("ghosts: need at least one point per stage")
        s = self.seeds
        if not (s.train_end <= s.eval_start or s.eval_end <= s.train_start):
            raise ConfigError("seeds: training and evaluation seed ranges overlap")
        if self.train.n_demos > s.train_end - s.train_start:
            raise ConfigError("train.n_demos: exceeds the training seed range")
        if self.eval.episodes > s.eval_end - s.eval_start:
            raise ConfigError("eval.episodes: exceeds the evaluation seed range")
        try:
            self.workspace.build()
            self.scene.build()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def n_stages(self) -> int:
        return len(self.ghosts.diameters) + 1


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {full!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, full)
        else:
            kwargs[key] = _coerce(default, value, full)
    return cls(**kwargs)


def _coerce(default: Any, value: Any, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and isinstance(default[0], float):
            return [_coerce(0.0, v, path) for v in value]
        if default and isinstance(default[0], int):
            return [_coerce(0, v, path) for v in value]
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        data = loaded or {}
    return apply_overrides(data, overrides or [])


def apply_overrides(data: dict, overrides: list[str]) -> RunConfig:
    data = _deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def _deepcopy(d):
    if isinstance(d, dict):
        return {k: _deepcopy(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_deepcopy(v) for v in d]
    return d


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
