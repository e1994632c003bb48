"""Coarse-to-fine ghost point sampling and the iterative position search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Workspace


@dataclass(frozen=True)
class StageConfig:
    index: int  # 1-based
    diameter: float | None  # None: whole workspace box
    source: str = "coarse"  # "coarse" | "local-fine"
    local_k: int | None = None

    def __post_init__(self):
        if self.source not in ("coarse", "local-fine"):
            raise ValueError(f"unknown attention source {self.source!r}")
        if self.diameter is not None and self.diameter < 0:
            raise ValueError("ball diameter must be non-negative")


def default_stages(
    diameters: Sequence[float] = (0.16, 0.04), local_k: int | None = None, global_only: bool = False
) -> list[StageConfig]:
    if any(b >= a for a, b in zip(diameters, diameters[1:])):
        raise ValueError(f"stage diameters must strictly decrease, got {tuple(diameters)}")
    stages = [StageConfig(1, None, "coarse")]
    for i, dia in enumerate(diameters, start=2):
        stages.append(StageConfig(i, float(dia), "coarse" if global_only else "local-fine", local_k))
    return stages


@dataclass
class GhostBatch:
    positions: np.ndarray  # n x 3
    stage: int
    center: np.ndarray
    features: object = None  # Tensor once featurized
    logits: np.ndarray | None = None


def allocate(total_points: int, n_stages: int = 3) -> tuple[int, ...]:
    """Equal split across stages; the remainder goes to the earliest stages."""
    if n_stages < 1 or total_points < n_stages:
        raise ValueError(f"need at least one point per stage: total={total_points}, stages={n_stages}")
    base, rem = divmod(total_points, n_stages)
    return tuple(base + (1 if i < rem else 0) for i in range(n_stages))


def sample_box(workspace: Workspace, n: int, rng: np.random.Generator) -> np.ndarray:
    return workspace.lo_arr + rng.random((n, 3)) * workspace.extent


def sample_ball(center: np.ndarray, diameter: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a ball by rejection from its bounding cube."""
    center = np.asarray(center, dtype=np.float64)
    r = 0.5 * diameter
    if r == 0.0:
        return np.repeat(center[None], n, axis=0)
    out = np.empty((0, 3))
    while len(out) < n:
        # acceptance rate is pi/6 ~ 0.52
        cand = rng.uniform(-1.0, 1.0, (2 * (n - len(out)) + 8, 3))
        cand = cand[(cand * cand).sum(axis=1) <= 1.0]
        out = np.concatenate([out, cand])
    return center + r * out[:n]


def _lattice(n: int, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator, keep=None) -> np.ndarray:
    m = max(1, int(np.ceil(n ** (1.0 / 3.0))))
    while True:
        step = (hi - lo) / m
        shift = rng.random(3) * step
        axes = [lo[i] + shift[i] + step[i] * np.arange(m) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        if keep is not None:
            grid = grid[keep(grid)]
        if len(grid) >= n:
            break
        m += 1
    pick = np.round(np.linspace(0, len(grid) - 1, n)).astype(int)
    return grid[pick]


def sample_stage(
    stage: StageConfig,
    center,
    n: int,
    rng: np.random.Generator,
    workspace: Workspace,
    lattice: bool = False,
) -> GhostBatch:
    if n < 1:
        raise ValueError("need at least one ghost point")
    center = np.asarray(center, dtype=np.float64)
    if stage.diameter is None:
        if lattice:
            pos = _lattice(n, workspace.lo_arr, workspace.hi_arr, rng)
        else:
            pos = sample_box(workspace, n, rng)
    elif lattice and stage.diameter > 0:
        r = 0.5 * stage.diameter
        pos = _lattice(n, center - r, center + r, rng, keep=lambda g: ((g - center) ** 2).sum(1) <= r * r)
    else:
        pos = sample_ball(center, stage.diameter, n, rng)
    return GhostBatch(pos, stage.index, center)


def training_targets(positions: np.ndarray, ground_truth) -> int:
    """Index of the ghost nearest to the ground-truth position; ties go to the lowest index."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise ValueError("empty ghost batch")
    d2 = ((positions - np.asarray(ground_truth, dtype=np.float64)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def soft_targets(positions: np.ndarray, ground_truth, temperature: float) -> np.ndarray:
    """Distance-weighted target distribution, an alternative to the nearest-index target."""
    d2 = ((np.asarray(positions) - np.asarray(ground_truth)) ** 2).sum(axis=1)
    w = np.exp(-(d2 - d2.min()) / (temperature**2))
    return w / w.sum()


def jittered_center(ground_truth, diameter: float, rng: np.random.Generator, fraction: float = 0.5) -> np.ndarray:
    """Ground truth displaced uniformly within a ball of radius ``fraction`` times the stage radius."""
    return sample_ball(np.asarray(ground_truth, dtype=np.float64), fraction * diameter, 1, rng)[0]


@dataclass
class StageTrace:
    stage: int
    center: np.ndarray
    positions: np.ndarray
    logits: np.ndarray
    selected: int

    @property
    def selected_position(self) -> np.ndarray:
        return self.positions[self.selected]


@dataclass
class SearchResult:
    position: np.ndarray
    stages: list[StageTrace] = field(default_factory=list)
    query: object = None  # final query feature (Tensor), consumed by the regression head


def infer_position(
    model,
    scene,
    context,
    total_points: int,
    rng: np.random.Generator,
    stages: Sequence[StageConfig] | None = None,
    lattice: bool = False,
) -> SearchResult:
    """Run the stages in order, centering each on the previous stage's best-scoring ghost.

    ``model`` must provide ``workspace``, ``stages`` and
    ``run_stage(stage, scene, context, ghosts, query, query_pos) -> (logits, query)``.
    """
    stages = list(stages if stages is not None else model.stages)
    counts = allocate(total_points, len(stages))
    center = model.workspace.center
    query, query_pos = None, None
    traces = []
    for stage, n in zip(stages, counts):
        ghosts = sample_stage(stage, center, n, rng, model.workspace, lattice)
        logits, query = model.run_stage(stage, scene, context, ghosts, query, query_pos)
        best = int(np.argmax(logits))
        traces.append(StageTrace(stage.index, center, ghosts.positions, logits, best))
        center = ghosts.positions[best]
        query_pos = center
    return SearchResult(center.copy(), traces, query)
