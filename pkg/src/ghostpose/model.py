"""The keypose detector: visual lifting, weight-tied coarse-to-fine ghost attention, and heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionStack, ContextSet, run_stage
from .config import RunConfig
from .geometry import Workspace
from .ghosts import (
    GhostBatch,
    StageConfig,
    allocate,
    default_stages,
    infer_position,
    jittered_center,
    sample_stage,
    soft_targets,
    training_targets,
)
from .head import KeyposeAction, LossWeights, RegressionHead, regress, score, total_loss
from .nn import Embedding, Linear, Module, Parameter
from .scene import CameraView, LiftedGeometry, VisualEncoder, lift_geometry, nearest_indices, token_grid_shape
from .synth import VOCAB, Observation, SceneSpec
from .tensor import Tensor, concat, no_grad, softmax


@dataclass
class SceneBatch:
    coarse: Tensor  # B x Mc x d, padded
    coarse_pos: np.ndarray
    coarse_mask: np.ndarray
    fine_tokens: Tensor  # B x (views * fine tokens) x d, unfiltered
    fine_geo: list[LiftedGeometry]
    coarse_geo: list[LiftedGeometry]
    local_k: int

    @property
    def batch(self) -> int:
        return self.coarse.shape[0]


@dataclass
class Conditioning:
    """Per-sample inputs other than the scene: language tokens and the proprioception token."""

    lang: Tensor
    lang_mask: np.ndarray
    proprio_feat: Tensor  # B x 1 x d
    proprio_pos: np.ndarray  # B x 3


@dataclass
class Sample:
    views: list[CameraView]
    geometry: tuple[LiftedGeometry, LiftedGeometry]
    tokens: np.ndarray
    proprio: np.ndarray  # x y z qw qx qy qz open
    target: KeyposeAction


def _pad_indices(rows: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    m = max(1, max(len(r) for r in rows))
    idx = np.zeros((len(rows), m), dtype=np.int64)
    mask = np.zeros((len(rows), m), dtype=bool)
    for b, r in enumerate(rows):
        idx[b, : len(r)] = r
        mask[b, : len(r)] = True
    return idx, mask


class KeyposeDetector(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seeds.seed)
        m = cfg.model
        self.cfg = cfg
        self.d = m.d
        self.workspace: Workspace = cfg.workspace.build()
        self.stages: list[StageConfig] = default_stages(
            cfg.ghosts.diameters, global_only=cfg.ablation.global_coarse_only
        )
        self.encoder = VisualEncoder(m.d, rng, m.encoder_widths)
        self.language = Embedding(len(VOCAB), m.d, rng)
        self.proprio = Linear(5, m.d, rng)
        self.ghost_embed = Parameter(rng.normal(0.0, 1.0, m.d))
        self.query_embed = Parameter(rng.normal(0.0, 1.0, m.d))
        n_stacks = len(self.stages) if cfg.ablation.untie_weights else 1
        self.stacks = [
            AttentionStack(
                m.d, m.heads, m.layers, rng, m.ffn_mult, m.position_scale, use_rotary=not cfg.ablation.absolute_pe
            )
            for _ in range(n_stacks)
        ]
        self.head = RegressionHead(m.d, rng)
        self.loss_weights = LossWeights(cfg.loss.position, cfg.loss.rotation, cfg.loss.open, cfg.loss.collision)

    # -- inputs -----------------------------------------------------------------
    def lift(self, views: Sequence[CameraView]) -> tuple[LiftedGeometry, LiftedGeometry]:
        coarse_stride, fine_stride = VisualEncoder.strides
        return lift_geometry(views, coarse_stride, self.workspace), lift_geometry(views, fine_stride, self.workspace)

    def encode_scenes(self, views: Sequence[Sequence[CameraView]], geometry=None) -> SceneBatch:
        if geometry is None:
            geometry = [self.lift(v) for v in views]
        n_views = len(views[0])
        if any(len(v) != n_views for v in views):
            raise ValueError("all samples in a batch need the same number of views")
        sizes = {view.hw for vs in views for view in vs}
        if len(sizes) != 1:
            raise ValueError(f"all views must share one image size, got {sorted(sizes)}")
        b = len(views)
        images = np.stack([view.rgb for vs in views for view in vs])
        coarse, fine = self.encoder(images)
        coarse = coarse.reshape(b, n_views * coarse.shape[1], self.d)
        fine = fine.reshape(b, n_views * fine.shape[1], self.d)
        coarse_geo = [g[0] for g in geometry]
        fine_geo = [g[1] for g in geometry]
        if any(len(g.positions) == 0 for g in coarse_geo):
            raise ValueError("a scene has no coarse tokens inside the workspace")
        idx, mask = _pad_indices([g.flat_index for g in coarse_geo])
        pos = np.zeros(idx.shape + (3,))
        for i, g in enumerate(coarse_geo):
            pos[i, : len(g.positions)] = g.positions
        feats = coarse[np.arange(b)[:, None], idx]
        k = self.local_k(n_views, views[0][0].hw)
        return SceneBatch(feats, pos, mask, fine, fine_geo, coarse_geo, k)

    def condition(self, tokens: Sequence[np.ndarray], proprio: np.ndarray) -> Conditioning:
        ids, lang_mask = _pad_indices([np.asarray(t, dtype=np.int64) for t in tokens])
        lang = self.language(ids)
        proprio = np.asarray(proprio, dtype=np.float64).reshape(-1, 8)
        feat = self.proprio(Tensor(proprio[:, 3:8])).reshape(len(proprio), 1, self.d)
        return Conditioning(lang, lang_mask, feat, proprio[:, :3].copy())

    def local_k(self, views_per_scene: int, hw: tuple[int, int]) -> int:
        if self.cfg.ghosts.local_k > 0:
            return self.cfg.ghosts.local_k
        gh, gw = token_grid_shape(hw, VisualEncoder.strides[0])
        return gh * gw * views_per_scene

    def context(self, stage: StageConfig, scene: SceneBatch, centers: np.ndarray, cond: Conditioning) -> ContextSet:
        b = scene.batch
        if stage.source == "coarse":
            feats, pos, mask = scene.coarse, scene.coarse_pos, scene.coarse_mask
        else:
            k = scene.local_k
            picks = [nearest_indices(g.positions, centers[i], min(k, len(g.positions))) for i, g in enumerate(scene.fine_geo)]
            idx, mask = _pad_indices([g.flat_index[p] for g, p in zip(scene.fine_geo, picks)])
            pos = np.zeros(idx.shape + (3,))
            for i, (g, p) in enumerate(zip(scene.fine_geo, picks)):
                pos[i, : len(p)] = g.positions[p]
            feats = scene.fine_tokens[np.arange(b)[:, None], idx]
        feats = concat([feats, cond.proprio_feat], axis=1)
        pos = np.concatenate([pos, cond.proprio_pos[:, None, :]], axis=1)
        mask = np.concatenate([mask, np.ones((b, 1), dtype=bool)], axis=1)
        return ContextSet(feats, pos, mask, cond.lang, cond.lang_mask)

    def stack_for(self, stage: StageConfig) -> AttentionStack:
        return self.stacks[0] if len(self.stacks) == 1 else self.stacks[stage.index - 1]

    def stage_forward(
        self, stage: StageConfig, ghost_pos: np.ndarray, query: Tensor | None, query_pos: np.ndarray, ctx: ContextSet
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (ghost logits B x n, ghost features, refined query B x 1 x d)."""
        b, n, _ = ghost_pos.shape
        ghosts = self.ghost_embed * np.ones((b, n, 1))
        if query is None:
            query = self.query_embed * np.ones((b, 1, 1))
        g, q = run_stage(self.stack_for(stage), ghosts, ghost_pos, query, query_pos, ctx)
        return score(q, g), g, q

    # -- training -----------------------------------------------------------------
    def loss(self, samples: Sequence[Sample], rng: np.random.Generator, total_points: int | None = None):
        cfg = self.cfg
        total_points = total_points or cfg.ghosts.train_points
        b = len(samples)
        scene = self.encode_scenes([s.views for s in samples], [s.geometry for s in samples])
        cond = self.condition([s.tokens for s in samples], np.stack([s.proprio for s in samples]))
        gt = np.stack([s.target.position for s in samples])
        query, query_pos = None, cond.proprio_pos
        logits_all, targets_all = [], []
        for stage, n in zip(self.stages, allocate(total_points, len(self.stages))):
            if stage.diameter is None:
                centers = np.repeat(self.workspace.center[None], b, axis=0)
            else:
                centers = np.stack([jittered_center(gt[i], stage.diameter, rng, cfg.ghosts.center_jitter) for i in range(b)])
                query_pos = centers
            ghost_pos = np.stack(
                [sample_stage(stage, centers[i], n, rng, self.workspace, cfg.ablation.lattice).positions for i in range(b)]
            )
            ctx = self.context(stage, scene, centers, cond)
            logits, _, query = self.stage_forward(stage, ghost_pos, query, query_pos, ctx)
            logits_all.append(logits)
            if cfg.ghosts.soft_targets:
                targets_all.append(np.stack([soft_targets(ghost_pos[i], gt[i], cfg.ghosts.soft_temperature) for i in range(b)]))
            else:
                targets_all.append(np.array([training_targets(ghost_pos[i], gt[i]) for i in range(b)]))
        raw = self.head(query.reshape(b, self.d))
        return total_loss(
            logits_all,
            targets_all,
            raw,
            np.stack([s.target.rotation for s in samples]),
            np.array([s.target.open for s in samples]),
            np.array([s.target.collision for s in samples]),
            self.loss_weights,
            len(self.stages),
        )

    # -- inference ------------------------------------------------------------------
    def run_stage(self, stage: StageConfig, scene: SceneBatch, cond: Conditioning, ghosts: GhostBatch, query, query_pos):
        """Single-scene stage used by :func:`ghosts.infer_position`; returns (logits[n], query)."""
        if query_pos is None:
            query_pos = cond.proprio_pos[0]
        ctx = self.context(stage, scene, ghosts.center[None], cond)
        logits, g, q = self.stage_forward(stage, ghosts.positions[None], query, np.asarray(query_pos)[None], ctx)
        ghosts.features = g
        ghosts.logits = logits.data[0]
        return logits.data[0], q

    def stage_logits(self, obs: Observation, ghost_sets: Sequence[np.ndarray], centers: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Scores of caller-chosen ghosts for every stage, with stage ``s`` centered at ``centers[s]``.

        ``centers[0]`` is ignored (the first stage spans the workspace).
        """
        if len(ghost_sets) != len(self.stages) or len(centers) != len(self.stages):
            raise ValueError(f"need one ghost set and one center per stage ({len(self.stages)})")
        out = []
        with no_grad():
            scene = self.encode_scenes([obs.views])
            cond = self.condition([obs.tokens], obs.proprio[None])
            query, query_pos = None, cond.proprio_pos
            for stage, ghosts, center in zip(self.stages, ghost_sets, centers):
                center = np.asarray(center, dtype=np.float64)
                if stage.diameter is not None:
                    query_pos = center[None]
                ctx = self.context(stage, scene, center[None], cond)
                logits, _, query = self.stage_forward(stage, np.asarray(ghosts)[None], query, query_pos, ctx)
                out.append(logits.data[0])
        return out

    def predict(self, obs: Observation, total_points: int | None = None, rng: np.random.Generator | None = None, return_search: bool = False):
        total_points = total_points or self.cfg.ghosts.eval_points
        rng = rng if rng is not None else np.random.default_rng(0)
        with no_grad():
            scene = self.encode_scenes([obs.views])
            cond = self.condition([obs.tokens], obs.proprio[None])
            search = infer_position(self, scene, cond, total_points, rng, self.stages, self.cfg.ablation.lattice)
            raw = self.head(search.query.reshape(1, self.d)).data[0]
        q, p_open, p_col, open_bit, col_bit = regress(raw)
        last = search.stages[-1].logits
        conf = float(softmax(Tensor(last)).data.max())
        action = KeyposeAction(search.position, q, open_bit, col_bit, p_open, p_col, conf)
        return (action, search) if return_search else action


class ModelPolicy:
    """Adapter exposing a trained detector through the evaluation policy interface."""

    def __init__(self, model: KeyposeDetector, total_points: int | None = None, seed: int = 0):
        self.model = model
        self.total_points = total_points
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, scene: SceneSpec) -> None:
        self.rng = np.random.default_rng([self.seed, scene.seed])

    def act(self, obs: Observation) -> KeyposeAction:
        return self.model.predict(obs, self.total_points, self.rng)
