"""
Training a detector and watching the coarse-to-fine search
==========================================================

Without arguments this trains a deliberately tiny model for about half a
minute on one core; it learns little, the point is the mechanics.  Pass a
checkpoint (for example one written by ``ghostpose train``) to trace the search
of a trained model instead:

    python notebooks/03_train_and_search.py model.ckpt

After the acceptance suite has run, the reach-above checkpoint it trained sits
in ``.acceptance/reach-*.ckpt``.
"""

import sys

import numpy as np

from ghostpose.config import apply_overrides
from ghostpose.model import KeyposeDetector
from ghostpose.synth import Observation, generate_scene, render, task_keyposes
from ghostpose.training import build_samples, demo_records, evaluate_model, generate_demos, load_model, train

if len(sys.argv) > 1:
    model, ckpt = load_model(sys.argv[1])
    cfg = model.cfg
    print("loaded", sys.argv[1], "trained for", ckpt.meta.get("steps", "?"), "steps")
else:
    cfg = apply_overrides(
        {},
        [
            "scene.image_size=64",
            "model.d=24",
            "model.encoder_widths=[8,16,16]",
            "ghosts.train_points=150",
            "ghosts.eval_points=600",
            "train.n_demos=8",
            "train.batch_size=4",
            "optim.lr=0.001",
        ],
    )
    model = KeyposeDetector(cfg, np.random.default_rng(0))

    # one sample per timestep before the next keypose; views are lifted once and cached
    samples = build_samples(model, demo_records(generate_demos(cfg)))
    print("training samples:", len(samples))

    result = train(cfg, samples, model, steps=300)
    print("loss: first %.3f, last %.3f, %.1f s" % (result.losses[0], result.losses[-1], result.seconds))
    print("last step parts:", {k: round(v, 3) for k, v in result.parts[-1].items()})

print("parameters:", model.num_parameters())

# one search on a held-out scene
scene = generate_scene(cfg.seeds.eval_start, cfg.task, cfg.scene.build(), cfg.workspace.build())
views = render(scene)
obs = Observation(views, scene.tokens, np.concatenate([scene.start_position, scene.start_rotation, [1.0]]))
action, search = model.predict(obs, return_search=True)
gt = task_keyposes(scene, cfg.scene.build())[0].position
print(scene.instruction)
for tr in search.stages:
    err = np.linalg.norm(tr.selected_position - gt)
    print(f"stage {tr.stage}: {len(tr.positions):5d} ghosts, picked {np.round(tr.selected_position, 3)}, {err * 100:.1f} cm from target")
print("predicted", action)

# more ghosts at inference than in training is allowed and usually helps
for pts in (cfg.ghosts.train_points, cfg.ghosts.eval_points):
    res = evaluate_model(model, episodes=10, total_points=pts)
    print(pts, "points:", res.summary())
