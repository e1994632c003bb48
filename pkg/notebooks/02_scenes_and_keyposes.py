"""
From a synthetic scene to training tuples
=========================================

Generate a tabletop scene, lift its RGB-D views into 3D token clouds,
script a demonstration and recover its keyposes.
"""

import numpy as np

from ghostpose.geometry import Workspace
from ghostpose.keyposes import demo_keyposes, make_tuples
from ghostpose.scene import build_feature_cloud, nearest_indices
from ghostpose.synth import SynthConfig, generate_scene, render, script_demo, task_keyposes

synth = SynthConfig()
ws = Workspace()
scene = generate_scene(3, "pregrasp-grasp", synth, ws)
print(scene.instruction)
for obj in scene.objects:
    print(f"  {obj.color:7s} {obj.kind:6s} at {np.round(obj.center, 3)}")

views = render(scene)
print("views:", len(views), "image", views[0].hw, "valid depth", [(v.depth > 0).mean() for v in views])

# token positions come from depth at each token center; no encoder needed for geometry
coarse, fine = build_feature_cloud(views, workspace=ws)
print("coarse tokens:", len(coarse), "fine tokens:", len(fine))

# the local-fine context of a later stage: fine tokens nearest the stage center
target = task_keyposes(scene, synth)[0].position
local = nearest_indices(fine.positions, target, 16)
print("16 nearest fine tokens lie within", np.linalg.norm(fine.positions[local] - target, axis=1).max().round(3), "m")

# scripted demo: piecewise-linear motion with dwells and gripper changes
demo = script_demo(scene, synth, views)
keys = demo_keyposes(demo)
print("demo length", len(demo), "keyposes at", keys)
for k, gt in zip(keys, task_keyposes(scene, synth)):
    print("  extracted", np.round(demo.actions[k, :3], 3), "scripted", np.round(gt.position, 3))

tuples = make_tuples(demo, keys)
print("training tuples:", len(tuples), "first targets step", tuples[0].target_t)
