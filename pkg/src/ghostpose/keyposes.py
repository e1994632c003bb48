"""Keypose extraction from demonstrations and (observation, keypose) pairing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .head import KeyposeAction
from .scene import CameraView

# action row layout: x y z | qw qx qy qz | open | collision
ACTION_DIM = 9


@dataclass
class Demonstration:
    observations: list[list[CameraView]]  # one multi-view set per timestep (sets may be shared)
    actions: np.ndarray  # T x 9
    instruction: str
    tokens: np.ndarray
    dt: float = 0.1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise ValueError(f"actions must be T x {ACTION_DIM}, got {self.actions.shape}")
        if len(self.observations) != len(self.actions) or len(self.actions) < 2:
            raise ValueError("a demonstration needs matching observations/actions with at least 2 steps")

    def __len__(self) -> int:
        return len(self.actions)

    def action_at(self, t: int) -> KeyposeAction:
        a = self.actions[t]
        return KeyposeAction(a[0:3], a[3:7], int(round(a[7])), int(round(a[8])))


@dataclass
class TrainingTuple:
    demo_index: int
    t: int
    target_t: int
    target: KeyposeAction
    proprio: np.ndarray  # current x y z qw qx qy qz open


def extract_keyposes(
    actions: np.ndarray, dt: float = 0.1, vel_eps: float = 0.01, hold_frames: int = 3
) -> list[int]:
    """Timesteps where the gripper toggles, where a slow phase of at least ``hold_frames`` ends, and the last step.

    Speed at ``t`` is ``|pos_t - pos_{t-1}| / dt`` (undefined, i.e. not slow, at ``t = 0``).
    """
    a = np.asarray(actions, dtype=np.float64)
    T = len(a)
    keys = set()
    open_bit = np.round(a[:, 7])
    for t in np.nonzero(open_bit[1:] != open_bit[:-1])[0] + 1:
        keys.add(int(t))
    speed = np.full(T, np.inf)
    speed[1:] = np.linalg.norm(np.diff(a[:, :3], axis=0), axis=1) / dt
    slow = speed < vel_eps
    run = 0
    for t in range(T):
        if slow[t]:
            run += 1
            ends = t == T - 1 or not slow[t + 1]
            if ends and run >= hold_frames:
                keys.add(t)
        else:
            run = 0
    keys.add(T - 1)
    return sorted(keys)


def demo_keyposes(demo: Demonstration, vel_eps: float = 0.01, hold_frames: int = 3) -> list[int]:
    return extract_keyposes(demo.actions, demo.dt, vel_eps, hold_frames)


def make_tuples(demo: Demonstration, keyposes: Sequence[int], demo_index: int = 0) -> list[TrainingTuple]:
    """One tuple per timestep, targeting the first keypose strictly after it."""
    keys = sorted(int(k) for k in keyposes)
    if not keys:
        raise ValueError("no keyposes given")
    out = []
    j = 0
    for t in range(len(demo)):
        while j < len(keys) and keys[j] <= t:
            j += 1
        if j == len(keys):
            break
        a = demo.actions[t]
        proprio = np.concatenate([a[0:7], a[7:8]])
        out.append(TrainingTuple(demo_index, t, keys[j], demo.action_at(keys[j]), proprio))
    return out
