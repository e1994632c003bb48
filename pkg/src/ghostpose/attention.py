"""Relative rotary cross-attention from queries (ghost points + parametric query) to a context.

Queries never attend to each other, so each query row is computed
independently of every other row.  Spatial context tokens and queries are
rotary-encoded per head after projection; language tokens carry no position
and are matched against the un-rotated query, which keeps every logit a
function of relative positions only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotary
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, concat, gelu, softmax

MASKED = -1e18


@dataclass
class ContextSet:
    """Batched context: spatial tokens (scene + proprioception) and position-free language tokens."""

    feats: Tensor  # B x m x d
    pos: np.ndarray  # B x m x 3
    mask: np.ndarray  # B x m, True = valid
    lang: Tensor | None = None  # B x L x d
    lang_mask: np.ndarray | None = None  # B x L

    def __post_init__(self):
        b, m, _ = self.feats.shape
        if m == 0 or not self.mask.any(axis=1).all():
            raise ValueError("attention context is empty")
        if self.pos.shape != (b, m, 3) or self.mask.shape != (b, m):
            raise ValueError("context positions/mask do not match features")
        if not np.all(np.isfinite(self.pos[self.mask])):
            raise ValueError("context positions must be finite")
        if self.lang is not None and self.lang_mask is None:
            self.lang_mask = np.ones(self.lang.shape[:2], dtype=bool)

    def key_bias(self) -> np.ndarray:
        masks = [self.mask] if self.lang is None else [self.mask, self.lang_mask]
        valid = np.concatenate(masks, axis=1)
        return np.where(valid, 0.0, MASKED)[:, None, None, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class CrossAttentionLayer(Module):
    """Pre-norm multi-head cross-attention followed by a pre-norm feed-forward block."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2, position_scale: float = 1.0):
        if d % heads or (d // heads) % 6:
            raise ValueError(f"per-head dimension d/heads = {d}/{heads} must be a multiple of 6")
        self.heads = heads
        self.head_dim = d // heads
        self.rot = rotary.RotaryConfig(self.head_dim)
        self.position_scale = position_scale
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng)
        self.norm_ff = LayerNorm(d)
        self.ff1 = Linear(d, ffn_mult * d, rng)
        self.ff2 = Linear(ffn_mult * d, d, rng)

    def _rotate(self, x: Tensor, pos: np.ndarray) -> Tensor:
        c, s = rotary.cos_sin(pos * self.position_scale, self.rot)  # B x n x dh/2
        return rotary.rotate_pairs(x, c[:, None], s[:, None])

    def logits(self, x: Tensor, x_pos: np.ndarray, ctx: ContextSet, use_rotary: bool = True) -> tuple[Tensor, Tensor]:
        """Scaled attention logits (B, heads, n, m [+ L]) and the stacked value heads."""
        h = self.heads
        q = _split_heads(self.wq(self.norm_q(x)), h)
        kv_in = self.norm_kv(ctx.feats)
        k = _split_heads(self.wk(kv_in), h)
        v = _split_heads(self.wv(kv_in), h)
        if use_rotary:
            q_sp = self._rotate(q, x_pos)
            k_sp = self._rotate(k, ctx.pos)
        else:
            q_sp, k_sp = q, k
        scale = 1.0 / np.sqrt(self.head_dim)
        logit = (q_sp @ k_sp.swapaxes(-1, -2)) * scale
        if ctx.lang is not None:
            lang_in = self.norm_kv(ctx.lang)
            k_l = _split_heads(self.wk(lang_in), h)
            v_l = _split_heads(self.wv(lang_in), h)
            logit = concat([logit, (q @ k_l.swapaxes(-1, -2)) * scale], axis=-1)
            v = concat([v, v_l], axis=2)
        return logit + ctx.key_bias(), v

    def __call__(self, x: Tensor, x_pos: np.ndarray, ctx: ContextSet, use_rotary: bool = True) -> Tensor:
        logit, v = self.logits(x, x_pos, ctx, use_rotary)
        attn = softmax(logit, axis=-1)
        x = x + self.wo(_merge_heads(attn @ v))
        return x + self.ff2(gelu(self.ff1(self.norm_ff(x))))


class AttentionStack(Module):
    def __init__(
        self,
        d: int,
        heads: int,
        layers: int,
        rng: np.random.Generator,
        ffn_mult: int = 2,
        position_scale: float = 1.0,
        use_rotary: bool = True,
    ):
        self.layers = [CrossAttentionLayer(d, heads, rng, ffn_mult, position_scale) for _ in range(layers)]
        self.final_norm = LayerNorm(d)
        self.use_rotary = use_rotary
        self.position_scale = position_scale
        self.abs_config = rotary.RotaryConfig(d)

    def absolute_features(self, pos: np.ndarray) -> np.ndarray:
        return rotary.sinusoidal(pos * self.position_scale, self.abs_config)

    def __call__(self, x: Tensor, x_pos: np.ndarray, ctx: ContextSet) -> Tensor:
        if not self.use_rotary:
            x = x + self.absolute_features(x_pos)
            ctx = ContextSet(ctx.feats + self.absolute_features(ctx.pos), ctx.pos, ctx.mask, ctx.lang, ctx.lang_mask)
        for layer in self.layers:
            x = layer(x, x_pos, ctx, self.use_rotary)
        return self.final_norm(x)

    def first_layer_logits(self, x: Tensor, x_pos: np.ndarray, ctx: ContextSet) -> np.ndarray:
        """Raw first-layer attention logits, for inspection and invariance checks."""
        if not self.use_rotary:
            x = x + self.absolute_features(x_pos)
            ctx = ContextSet(ctx.feats + self.absolute_features(ctx.pos), ctx.pos, ctx.mask, ctx.lang, ctx.lang_mask)
        return self.layers[0].logits(x, x_pos, ctx, self.use_rotary)[0].data


def cross_attend(stack: AttentionStack, queries: Tensor, query_pos: np.ndarray, ctx: ContextSet) -> Tensor:
    """Refine query features (B, n, d) against the context; rows are independent."""
    if queries.shape[-1] != ctx.feats.shape[-1]:
        raise ValueError(f"query dim {queries.shape[-1]} != context dim {ctx.feats.shape[-1]}")
    return stack(queries, query_pos, ctx)


def run_stage(
    stack: AttentionStack,
    ghost_feats: Tensor,
    ghost_pos: np.ndarray,
    query_feat: Tensor,
    query_pos: np.ndarray,
    ctx: ContextSet,
) -> tuple[Tensor, Tensor]:
    """Featurize ghosts (B, n, d) and the parametric query (B, 1, d) together; returns both."""
    x = concat([query_feat, ghost_feats], axis=1)
    pos = np.concatenate([query_pos[:, None, :], ghost_pos], axis=1)
    out = cross_attend(stack, x, pos, ctx)
    return out[:, 1:], out[:, :1]
