import numpy as np
import pytest

from ghostpose.attention import AttentionStack, ContextSet, CrossAttentionLayer, cross_attend, run_stage
from ghostpose.rotary import RotaryConfig, encode
from ghostpose.tensor import Tensor


def make_ctx(rng, b=2, m=7, d=12, lang=3, masked=2):
    feats = Tensor(rng.normal(size=(b, m, d)))
    pos = rng.uniform(-0.5, 0.5, (b, m, 3))
    mask = np.ones((b, m), dtype=bool)
    if masked:
        mask[0, -masked:] = False
    lang_t = Tensor(rng.normal(size=(b, lang, d))) if lang else None
    return ContextSet(feats, pos, mask, lang_t)


def test_ghost_rows_are_independent(rng):
    stack = AttentionStack(12, 2, 2, rng, position_scale=10.0)
    ctx = make_ctx(rng)
    x = rng.normal(size=(2, 9, 12))
    pos = rng.uniform(-0.5, 0.5, (2, 9, 3))
    full = cross_attend(stack, Tensor(x), pos, ctx).data
    perm = rng.permutation(9)
    permuted = cross_attend(stack, Tensor(x[:, perm]), pos[:, perm], ctx).data
    assert np.abs(permuted - full[:, perm]).max() <= 1e-12
    sub = [2, 5]
    alone = cross_attend(stack, Tensor(x[:, sub]), pos[:, sub], ctx).data
    assert np.abs(alone - full[:, sub]).max() <= 1e-12


def test_rotary_logits_depend_only_on_offsets(rng):
    layer = CrossAttentionLayer(12, 2, rng, position_scale=100.0)
    ctx = make_ctx(rng, lang=0)
    x = Tensor(rng.normal(size=(2, 4, 12)))
    pos = rng.uniform(-0.5, 0.5, (2, 4, 3))
    base = layer.logits(x, pos, ctx)[0].data
    t = np.array([0.31, -0.77, 0.52])
    moved = ContextSet(ctx.feats, ctx.pos + t, ctx.mask)
    shifted = layer.logits(x, pos + t, moved)[0].data
    valid = np.broadcast_to(ctx.mask[:, None, None, :], base.shape)
    assert np.abs(shifted - base)[valid].max() <= 1e-9


def test_logit_matches_hand_rotary(rng):
    d, heads = 12, 2
    layer = CrossAttentionLayer(d, heads, rng, position_scale=1.0)
    ctx = make_ctx(rng, b=1, m=3, lang=0, masked=0)
    x = Tensor(rng.normal(size=(1, 1, d)))
    xp = rng.uniform(-1, 1, (1, 1, 3))
    logits = layer.logits(x, xp, ctx)[0].data
    q = layer.wq(layer.norm_q(x)).data[0, 0]
    k = layer.wk(layer.norm_kv(ctx.feats)).data[0]
    cfg = RotaryConfig(d // heads)
    for h in range(heads):
        sl = slice(h * 6, h * 6 + 6)
        for j in range(3):
            ref = encode(xp[0, 0], q[sl], cfg) @ encode(ctx.pos[0, j], k[j, sl], cfg) / np.sqrt(6)
            assert logits[0, h, 0, j] == pytest.approx(ref, abs=1e-12)


def test_language_tokens_are_not_rotated(rng):
    layer = CrossAttentionLayer(12, 2, rng, position_scale=100.0)
    ctx = make_ctx(rng, b=1, m=2, lang=2, masked=0)
    x = Tensor(rng.normal(size=(1, 1, 12)))
    a = layer.logits(x, np.zeros((1, 1, 3)), ctx)[0].data[..., 2:]
    b = layer.logits(x, np.full((1, 1, 3), 0.4), ctx)[0].data[..., 2:]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_masked_keys_get_no_weight(rng):
    stack = AttentionStack(12, 2, 1, rng)
    ctx = make_ctx(rng, b=1, m=4, lang=0, masked=0)
    ctx.mask[0, 3] = False
    x = Tensor(rng.normal(size=(1, 2, 12)))
    pos = rng.uniform(size=(1, 2, 3))
    base = cross_attend(stack, x, pos, ctx).data
    garbage = ctx.feats.data.copy()
    garbage[0, 3] = 1e6
    changed = ContextSet(Tensor(garbage), ctx.pos, ctx.mask)
    np.testing.assert_allclose(cross_attend(stack, x, pos, changed).data, base, rtol=0, atol=1e-12)


def test_empty_context_rejected(rng):
    with pytest.raises(ValueError):
        ContextSet(Tensor(np.zeros((1, 2, 6))), np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=bool))


def test_head_dim_must_be_multiple_of_six(rng):
    with pytest.raises(ValueError):
        CrossAttentionLayer(12, 4, rng)


def test_run_stage_splits_query_and_ghosts(rng):
    stack = AttentionStack(12, 2, 2, rng)
    ctx = make_ctx(rng)
    g, q = run_stage(
        stack, Tensor(rng.normal(size=(2, 5, 12))), rng.uniform(size=(2, 5, 3)),
        Tensor(rng.normal(size=(2, 1, 12))), rng.uniform(size=(2, 3)), ctx,
    )
    assert g.shape == (2, 5, 12) and q.shape == (2, 1, 12)


def test_absolute_mode_is_not_translation_invariant(rng):
    stack = AttentionStack(12, 2, 1, rng, position_scale=10.0, use_rotary=False)
    ctx = make_ctx(rng, lang=0)
    x = Tensor(rng.normal(size=(2, 3, 12)))
    pos = rng.uniform(size=(2, 3, 3))
    t = np.array([0.2, 0.0, 0.0])
    a = stack.first_layer_logits(x, pos, ctx)
    b = stack.first_layer_logits(x, pos + t, ContextSet(ctx.feats, ctx.pos + t, ctx.mask))
    assert np.abs(a - b)[np.broadcast_to(ctx.mask[:, None, None], a.shape)].max() > 1e-3
