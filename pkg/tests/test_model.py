import dataclasses

import numpy as np
import pytest

from ghostpose.config import from_dict
from ghostpose.checkpoint import CheckpointError
from ghostpose.geometry import Workspace
from ghostpose.model import KeyposeDetector
from ghostpose.nn import Conv2d, Embedding, LayerNorm, Linear, Module
from ghostpose.optim import AdamW
from ghostpose.synth import Observation, generate_scene, render
from ghostpose.tensor import Tensor
from ghostpose.training import (
    build_samples,
    crop_views,
    demo_records,
    evaluate_model,
    generate_demos,
    load_model,
    restore_optimizer,
    save_model,
    train,
)


def observation(cfg, seed=1_000_000):
    scene = generate_scene(seed, cfg.task, cfg.scene.build(), cfg.workspace.build())
    return Observation(render(scene), scene.tokens, np.concatenate([scene.start_position, scene.start_rotation, [1.0]]))


def test_layers_shapes_and_errors(rng):
    assert Linear(3, 5, rng)(Tensor(np.ones((2, 3)))).shape == (2, 5)
    assert LayerNorm(4)(Tensor(rng.normal(size=(2, 4)))).shape == (2, 4)
    assert Conv2d(3, 2, 3, rng, stride=2, padding=1)(Tensor(np.zeros((1, 3, 8, 8)))).shape == (1, 2, 4, 4)
    emb = Embedding(5, 3, rng)
    assert emb(np.array([[0, 4]])).shape == (1, 2, 3)
    with pytest.raises(IndexError):
        emb(np.array([5]))


def test_state_dict_mismatch_errors(rng):
    a, b = Linear(3, 4, rng), Linear(3, 5, rng)
    with pytest.raises(ValueError, match="shape"):
        b.load_state_dict(a.state_dict())
    with pytest.raises(KeyError):
        Linear(3, 4, rng, bias=False).load_state_dict(a.state_dict())


def test_shared_parameters_counted_once(rng):
    class Twice(Module):
        def __init__(self):
            self.a = Linear(2, 2, rng)
            self.items = [self.a]

    assert len(Twice().parameters()) == 2


def test_adamw_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)


def test_adamw_grad_clip_scales_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([("p", p)], grad_clip=1.0)
    p.grad = np.array([3.0, 4.0])
    assert opt.grad_norm() == pytest.approx(5.0)
    opt.step()
    np.testing.assert_allclose(opt.m["p"], 0.1 * np.array([0.6, 0.8]))


def test_ablation_toggles_touch_only_their_mechanism(small_cfg):
    base = KeyposeDetector(small_cfg, np.random.default_rng(0))
    names = dict(base.named_parameters())
    stack_params = sum(p.size for n, p in names.items() if n.startswith("stacks.0."))

    untied = KeyposeDetector(dataclasses.replace(small_cfg, ablation=dataclasses.replace(small_cfg.ablation, untie_weights=True)), np.random.default_rng(0))
    assert untied.num_parameters() - base.num_parameters() == 2 * stack_params
    assert len(untied.stacks) == 3

    absolute = KeyposeDetector(dataclasses.replace(small_cfg, ablation=dataclasses.replace(small_cfg.ablation, absolute_pe=True)), np.random.default_rng(0))
    assert absolute.num_parameters() == base.num_parameters()
    assert not absolute.stacks[0].use_rotary and base.stacks[0].use_rotary

    glob = KeyposeDetector(dataclasses.replace(small_cfg, ablation=dataclasses.replace(small_cfg.ablation, global_coarse_only=True)), np.random.default_rng(0))
    assert glob.num_parameters() == base.num_parameters()
    assert [s.source for s in glob.stages] == ["coarse"] * 3
    assert [s.diameter for s in glob.stages] == [s.diameter for s in base.stages]


def test_local_fine_context_size(small_cfg):
    assert small_cfg.ghosts.local_k == 128
    small_cfg = dataclasses.replace(small_cfg, ghosts=dataclasses.replace(small_cfg.ghosts, local_k=0))
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    obs = observation(small_cfg)
    scene = model.encode_scenes([obs.views])
    # coarse tokens per view x views = (32 / 8)^2 x 2
    assert scene.local_k == 32
    cond = model.condition([obs.tokens], obs.proprio[None])
    ctx = model.context(model.stages[1], scene, np.zeros((1, 3)), cond)
    assert ctx.feats.shape[1] == 32 + 1


def test_predict_shapes_and_regions(small_cfg):
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    action, search = model.predict(observation(small_cfg), 60, np.random.default_rng(0), return_search=True)
    ws = model.workspace
    assert ws.contains(action.position)
    assert [len(s.positions) for s in search.stages] == [20, 20, 20]
    assert np.linalg.norm(search.stages[2].positions - search.stages[2].center, axis=1).max() <= 0.02 + 1e-12
    assert abs(np.linalg.norm(action.rotation) - 1) < 1e-12 and action.rotation[0] >= 0
    assert 0.0 < action.confidence <= 1.0


def test_stage_logits_agree_with_search(small_cfg):
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    obs = observation(small_cfg)
    _, search = model.predict(obs, 60, np.random.default_rng(3), return_search=True)
    logits = model.stage_logits(obs, [s.positions for s in search.stages], [s.center for s in search.stages])
    for a, s in zip(logits, search.stages):
        np.testing.assert_allclose(a, s.logits, rtol=0, atol=1e-12)


def test_translation_moves_logits_by_nothing(small_cfg):
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    obs = observation(small_cfg)
    rng = np.random.default_rng(0)
    ws = model.workspace
    ghosts = [ws.lo_arr + rng.random((15, 3)) * ws.extent for _ in range(3)]
    centers = [ws.center, ghosts[0][0], ghosts[1][0]]
    base = model.stage_logits(obs, ghosts, centers)
    t = np.array([0.37, -0.21, 0.12])
    moved_views = []
    for v in obs.views:
        E = v.extrinsics.copy()
        E[:3, 3] += t
        moved_views.append(dataclasses.replace(v, extrinsics=E))
    proprio = obs.proprio.copy()
    proprio[:3] += t
    model.workspace = Workspace(tuple(ws.lo_arr + t), tuple(ws.hi_arr + t))
    moved = model.stage_logits(Observation(moved_views, obs.tokens, proprio), [g + t for g in ghosts], [c + t for c in centers])
    for a, b in zip(base, moved):
        assert np.abs(a - b).max() <= 1e-9


def test_training_is_bit_reproducible(small_cfg):
    def run():
        model = KeyposeDetector(small_cfg, np.random.default_rng([small_cfg.seeds.seed, 0]))
        samples = build_samples(model, demo_records(generate_demos(small_cfg)))
        return train(small_cfg, samples, model, steps=4).losses

    a, b = run(), run()
    assert a == b and len(a) == 4 and all(np.isfinite(a))


def test_crop_intrinsics_match_sampled_pixels(small_cfg):
    obs = observation(small_cfg)
    view = obs.views[0]
    for seed in range(5):
        (crop,) = crop_views([view], np.random.default_rng(seed), 0.6)
        assert crop.hw == view.hw
        h, w = crop.hw
        v, u = np.mgrid[0:h, 0:w]
        uv = np.stack([u.ravel(), v.ravel()], 1).astype(float)
        # through the new intrinsics each pixel ray must hit the original image within half a pixel of
        # the source pixel whose values it copied
        rays = np.linalg.solve(crop.intrinsics, np.c_[uv, np.ones(len(uv))].T).T
        src = rays @ view.intrinsics.T
        src = src[:, :2] / src[:, 2:]
        flat_d = crop.depth.ravel()
        for (su, sv), d in zip(np.round(src).astype(int), flat_d):
            assert view.depth[sv, su] == d
        rounded = np.round(src)
        assert np.abs(src - rounded).max() <= 0.5 + 1e-9


def test_checkpoint_round_trip_and_resume(small_cfg, tmp_path):
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    samples = build_samples(model, demo_records(generate_demos(small_cfg)))
    res = train(small_cfg, samples, model, steps=2)
    path = tmp_path / "m.ckpt"
    save_model(path, model, res.optimizer)
    loaded, ckpt = load_model(path, small_cfg)
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    opt = restore_optimizer(loaded, ckpt)
    assert opt.step_count == 2
    # continuing from the checkpoint matches continuing in memory
    cont_a = train(small_cfg, samples, model, steps=2, optimizer=res.optimizer).losses
    cont_b = train(small_cfg, samples, loaded, steps=2, optimizer=opt).losses
    assert cont_a == cont_b
    wrong = from_dict({**small_cfg.to_dict(), "model": {**small_cfg.to_dict()["model"], "d": 24}})
    with pytest.raises(CheckpointError):
        load_model(path, wrong)


def test_evaluate_model_runs(small_cfg, tmp_path):
    model = KeyposeDetector(small_cfg, np.random.default_rng(0))
    res = evaluate_model(model, episodes=2, log_path=tmp_path / "e.jsonl")
    assert len(res.episodes) == 2 and 0.0 <= res.success_rate <= 1.0


def test_scheduled_lr_hand_values():
    from ghostpose.optim import scheduled_lr

    assert scheduled_lr(1.0, 0, 100) == 1.0
    assert scheduled_lr(1.0, 0, 100, warmup=4) == 0.25
    assert scheduled_lr(1.0, 3, 100, warmup=4) == 1.0
    # cosine from 1 at the start to the floor at the end, halfway at the midpoint
    assert scheduled_lr(2.0, 0, 100, schedule="cosine", floor=0.1) == pytest.approx(2.0)
    assert scheduled_lr(2.0, 50, 100, schedule="cosine", floor=0.1) == pytest.approx(2.0 * (0.1 + 0.9 * 0.5))
    assert scheduled_lr(2.0, 100, 100, schedule="cosine", floor=0.1) == pytest.approx(0.2)
    assert scheduled_lr(2.0, 500, 100, schedule="cosine", floor=0.1) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        scheduled_lr(1.0, 0, 10, schedule="step")


def test_cosine_schedule_reaches_optimizer(small_cfg):
    cfg = dataclasses.replace(small_cfg, optim=dataclasses.replace(small_cfg.optim, schedule="cosine", lr=1e-3, min_lr_ratio=0.5))
    model = KeyposeDetector(cfg, np.random.default_rng(0))
    samples = build_samples(model, demo_records(generate_demos(cfg)))
    res = train(cfg, samples, model, steps=3)
    # the last of three steps used step index 2 of a 3-step horizon
    assert res.optimizer.lr == pytest.approx(1e-3 * (0.5 + 0.5 * 0.5 * (1 + np.cos(np.pi * 2 / 3))))
