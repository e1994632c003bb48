"""Procedural tabletop scenes, scripted demonstrations and closed-loop keypose evaluation.

Scenes hold coloured spheres and yawed boxes resting on a ground plane at
z = 0, observed by up to four pinhole cameras.  Rendering is an exact
analytic ray cast, so depth is exact unless noise is requested.
Execution is by teleport: the end-effector jumps to each predicted keypose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import Workspace, look_at, pinhole, quat_angle, quat_from_yaw, quat_normalize, random_quaternion
from .head import KeyposeAction
from .keyposes import Demonstration
from .scene import CameraView

TASKS = ("reach-touch", "reach-above", "pregrasp-grasp")

COLORS = {
    "red": (0.85, 0.12, 0.10),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.70),
    "cyan": (0.10, 0.80, 0.80),
}

VOCAB = ("<pad>", "touch", "reach", "above", "pregrasp", "and", "grasp", "the", *COLORS, "sphere", "box")
_TEMPLATES = {
    "reach-touch": "touch the {color} {kind}",
    "reach-above": "reach above the {color} {kind}",
    "pregrasp-grasp": "pregrasp and grasp the {color} {kind}",
}

LIGHT = np.array([0.3, -0.5, 1.0]) / np.linalg.norm([0.3, -0.5, 1.0])
GROUND_RGB = np.array([0.55, 0.55, 0.52])
CAMERA_AZIMUTHS = (-90.0, 0.0, 180.0, 90.0)


class SceneGenerationError(RuntimeError):
    pass


def tokenize(text: str) -> np.ndarray:
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise KeyError(f"word {word!r} is not in the instruction vocabulary")
        ids.append(VOCAB.index(word))
    return np.array(ids, dtype=np.int64)


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents
    yaw: float
    color: str

    @property
    def top(self) -> float:
        return self.center[2] + self.size[2]

    @property
    def footprint(self) -> float:
        return float(np.hypot(self.size[0], self.size[1])) if self.kind == "box" else self.size[0]


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    height: int
    width: int


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    n_views: int = 2
    n_distractors: int = 2
    depth_noise: float = 0.0
    variations: int = 1
    table_half: float = 0.3
    above_offset: float = 0.10
    pregrasp_offset: float = 0.10
    step: float = 0.04  # meters per frame while moving
    dwell: int = 4  # frames held at intermediate keyposes
    dt: float = 0.1
    fov_deg: float = 47.0
    camera_radius: float = 0.5
    camera_height: float = 1.1

    def __post_init__(self):
        if not 1 <= self.n_views <= len(CAMERA_AZIMUTHS):
            raise ValueError(f"n_views must be in [1, {len(CAMERA_AZIMUTHS)}]")
        if not 1 <= self.variations <= len(COLORS):
            raise ValueError(f"variations must be in [1, {len(COLORS)}]")


@dataclass
class SceneSpec:
    seed: int
    task: str
    workspace: Workspace
    objects: list[SceneObject]
    cameras: list[Camera]
    target: int
    instruction: str
    start_position: np.ndarray
    start_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def target_object(self) -> SceneObject:
        return self.objects[self.target]

    @property
    def tokens(self) -> np.ndarray:
        return tokenize(self.instruction)


def make_cameras(cfg: SynthConfig) -> list[Camera]:
    f = 0.5 * cfg.image_size / np.tan(np.deg2rad(cfg.fov_deg) / 2)
    c = (cfg.image_size - 1) / 2.0
    K = pinhole(f, f, c, c)
    cams = []
    for az in CAMERA_AZIMUTHS[: cfg.n_views]:
        a = np.deg2rad(az)
        eye = (cfg.camera_radius * np.cos(a), cfg.camera_radius * np.sin(a), cfg.camera_height)
        cams.append(Camera(K, look_at(eye, (0.0, 0.0, 0.05)), cfg.image_size, cfg.image_size))
    return cams


def generate_scene(seed: int, task: str, cfg: SynthConfig = SynthConfig(), workspace: Workspace = Workspace()) -> SceneSpec:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng([int(seed), TASKS.index(task)])
    colors = list(COLORS)
    target_color = colors[int(rng.integers(cfg.variations))]
    others = [c for c in colors if c != target_color]
    objects: list[SceneObject] = []
    for i in range(1 + cfg.n_distractors):
        kind = "box" if (task == "pregrasp-grasp" and i == 0) else ("sphere" if rng.random() < 0.5 else "box")
        color = target_color if i == 0 else others[int(rng.integers(len(others)))]
        if kind == "sphere":
            r = rng.uniform(0.035, 0.055)
            size = (r, r, r)
            yaw = 0.0
        else:
            size = (rng.uniform(0.03, 0.05), rng.uniform(0.03, 0.05), rng.uniform(0.03, 0.06))
            yaw = rng.uniform(-np.pi / 4, np.pi / 4)
        for _ in range(200):
            xy = rng.uniform(-cfg.table_half, cfg.table_half, 2)
            probe = SceneObject(kind, (xy[0], xy[1], size[2]), size, yaw, color)
            if all(np.hypot(xy[0] - o.center[0], xy[1] - o.center[1]) > probe.footprint + o.footprint + 0.04 for o in objects):
                objects.append(probe)
                break
        else:
            raise SceneGenerationError(f"seed {seed}: could not place object {i} without overlap")
    lo, hi = workspace.lo_arr, workspace.hi_arr
    start = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.45, 0.75)])
    start = np.clip(start, lo, hi)
    instruction = _TEMPLATES[task].format(color=target_color, kind=objects[0].kind)
    scene = SceneSpec(int(seed), task, workspace, objects, make_cameras(cfg), 0, instruction, start)
    for kp in task_keyposes(scene, cfg):
        if not workspace.contains(kp.position):
            raise SceneGenerationError(f"seed {seed}: keypose {kp.position} leaves the workspace")
    return scene


def task_keyposes(scene: SceneSpec, cfg: SynthConfig = SynthConfig()) -> list[KeyposeAction]:
    """Ground-truth keyposes of the scene's task, in execution order."""
    obj = scene.target_object
    cx, cy, cz = obj.center
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    if scene.task == "reach-touch":
        return [KeyposeAction((cx, cy, obj.top), ident, 1, 0)]
    if scene.task == "reach-above":
        return [KeyposeAction((cx, cy, obj.top + cfg.above_offset), ident, 1, 1)]
    q = quat_from_yaw(obj.yaw)
    return [
        KeyposeAction((cx, cy, obj.top + cfg.pregrasp_offset), q, 1, 1),
        KeyposeAction((cx, cy, cz), q, 0, 0),
    ]


# -- rendering ------------------------------------------------------------------

def _rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    d_cam = np.linalg.solve(cam.intrinsics, pix.T).T  # camera-z component is 1
    return cam.extrinsics[:3, 3], d_cam @ cam.extrinsics[:3, :3].T


def _hit_sphere(eye, dirs, obj: SceneObject):
    c = np.asarray(obj.center)
    r = obj.size[0]
    oc = eye - c
    a = (dirs * dirs).sum(1)
    b = 2.0 * dirs @ oc
    c0 = oc @ oc - r * r
    disc = b * b - 4 * a * c0
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0
    root = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    root[root <= 0] = np.inf
    t[ok] = root
    pts = eye + t[:, None] * dirs
    normals = (pts - c) / r
    return t, normals


def _hit_box(eye, dirs, obj: SceneObject):
    c = np.asarray(obj.center)
    h = np.asarray(obj.size)
    cy, sy = np.cos(obj.yaw), np.sin(obj.yaw)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    o = Rz.T @ (eye - c)
    d = dirs @ Rz  # rows: Rz^T d
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    tlo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    thi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    tmin = tlo.max(axis=1)
    tmax = thi.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    t = np.where(hit, tmin, np.inf)
    axis = tlo.argmax(axis=1)
    n_local = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    n_local[rows, axis] = -np.sign(d[rows, axis])
    return t, n_local @ Rz.T


def render(scene: SceneSpec, depth_noise: float = 0.0, rng: np.random.Generator | None = None) -> list[CameraView]:
    """Analytic ray-cast RGB-D for every camera; depth is camera z-distance, 0 where nothing is hit."""
    views = []
    for cam in scene.cameras:
        eye, dirs = _rays(cam)
        n = len(dirs)
        best = np.full(n, np.inf)
        rgb = np.zeros((n, 3))
        with np.errstate(divide="ignore"):
            tg = np.where(dirs[:, 2] < 0, -eye[2] / dirs[:, 2], np.inf)
        ground = tg < best
        best[ground] = tg[ground]
        shade_g = 0.35 + 0.65 * max(0.0, LIGHT[2])
        rgb[ground] = GROUND_RGB * shade_g
        for obj in scene.objects:
            t, normals = (_hit_sphere if obj.kind == "sphere" else _hit_box)(eye, dirs, obj)
            closer = t < best
            best[closer] = t[closer]
            shade = 0.35 + 0.65 * np.clip(normals[closer] @ LIGHT, 0.0, None)
            rgb[closer] = np.asarray(COLORS[obj.color]) * shade[:, None]
        depth = np.where(np.isfinite(best), best, 0.0)
        if depth_noise > 0:
            if rng is None:
                raise ValueError("depth noise needs an rng")
            valid = depth > 0
            depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, depth_noise, valid.sum()), 1e-6)
        views.append(
            CameraView(
                rgb.reshape(cam.height, cam.width, 3),
                depth.reshape(cam.height, cam.width),
                cam.intrinsics,
                cam.extrinsics,
            )
        )
    return views


# -- scripted demonstrations ------------------------------------------------------

def _slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + s * (q1 - q0))
    th = np.arccos(d)
    return (np.sin((1 - s) * th) * q0 + np.sin(s * th) * q1) / np.sin(th)


def script_demo(scene: SceneSpec, cfg: SynthConfig = SynthConfig(), views: list[CameraView] | None = None) -> Demonstration:
    """Piecewise-linear trajectory through the task keyposes with dwells at intermediate ones.

    Ground-truth keypose indices are stored in ``demo.meta["keyposes"]``.
    """
    if views is None:
        rng = np.random.default_rng([scene.seed, 7]) if cfg.depth_noise > 0 else None
        views = render(scene, cfg.depth_noise, rng)
    targets = task_keyposes(scene, cfg)
    pos = np.asarray(scene.start_position, dtype=np.float64)
    rot = np.asarray(scene.start_rotation, dtype=np.float64)
    rows = [np.concatenate([pos, rot, [1.0, targets[0].collision]])]
    key_idx = []
    open_bit = 1.0
    for j, kp in enumerate(targets):
        n = max(2, int(np.ceil(np.linalg.norm(kp.position - pos) / cfg.step)))
        for i in range(1, n + 1):
            s = i / n
            p = pos + (kp.position - pos) * s
            q = _slerp(rot, kp.rotation, s)
            if i == n:
                # land exactly; interpolation is off by an ulp at s = 1
                p, q = kp.position.copy(), kp.rotation.copy()
                open_bit = float(kp.open)
            rows.append(np.concatenate([p, q, [open_bit, kp.collision]]))
        pos, rot = kp.position.copy(), kp.rotation.copy()
        if j < len(targets) - 1:
            for _ in range(cfg.dwell):
                rows.append(np.concatenate([pos, rot, [open_bit, kp.collision]]))
        key_idx.append(len(rows) - 1)
    actions = np.stack(rows)
    meta = {"seed": scene.seed, "task": scene.task, "keyposes": key_idx}
    return Demonstration([views] * len(actions), actions, scene.instruction, scene.tokens, cfg.dt, meta)


# -- closed-loop evaluation -------------------------------------------------------

@dataclass
class Observation:
    views: list[CameraView]
    tokens: np.ndarray
    proprio: np.ndarray  # x y z qw qx qy qz open


class Policy(Protocol):
    def reset(self, scene: SceneSpec) -> None: ...

    def act(self, obs: Observation) -> KeyposeAction: ...


class OraclePolicy:
    """Emits the scene's ground-truth keyposes in order."""

    def __init__(self, cfg: SynthConfig = SynthConfig()):
        self.cfg = cfg
        self._queue: list[KeyposeAction] = []

    def reset(self, scene: SceneSpec) -> None:
        self._queue = list(task_keyposes(scene, self.cfg))

    def act(self, obs: Observation) -> KeyposeAction:
        return self._queue.pop(0)


class RandomPolicy:
    """Uniform position in the workspace, random rotation and bits."""

    def __init__(self, workspace: Workspace = Workspace(), seed: int = 0):
        self.workspace = workspace
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, scene: SceneSpec) -> None:
        self.rng = np.random.default_rng([self.seed, scene.seed])

    def act(self, obs: Observation) -> KeyposeAction:
        ws = self.workspace
        pos = ws.lo_arr + self.rng.random(3) * ws.extent
        return KeyposeAction(pos, random_quaternion(self.rng), int(self.rng.integers(2)), int(self.rng.integers(2)))


@dataclass(frozen=True)
class Tolerance:
    position: float = 0.02
    rotation: float = 0.2


def keypose_matches(pred: KeyposeAction, gt: KeyposeAction, tol: Tolerance) -> tuple[bool, float, float]:
    pos_err = float(np.linalg.norm(pred.position - gt.position))
    rot_err = quat_angle(pred.rotation, gt.rotation)
    ok = pos_err <= tol.position and rot_err <= tol.rotation and pred.open == gt.open and pred.collision == gt.collision
    return ok, pos_err, rot_err


@dataclass
class EvalResult:
    success_rate: float
    median_position_error: float
    median_rotation_error: float
    episodes: list[dict]

    def summary(self) -> dict:
        return {
            "episodes": len(self.episodes),
            "success_rate": self.success_rate,
            "median_position_error": self.median_position_error,
            "median_rotation_error": self.median_rotation_error,
        }


def run_episode(policy: Policy, scene: SceneSpec, views: list[CameraView], tol: Tolerance, cfg: SynthConfig) -> dict:
    policy.reset(scene)
    gts = task_keyposes(scene, cfg)
    proprio = np.concatenate([scene.start_position, scene.start_rotation, [1.0]])
    preds, pos_errs, rot_errs, matched = [], [], [], []
    for gt in gts:
        pred = policy.act(Observation(views, scene.tokens, proprio.copy()))
        ok, pe, re = keypose_matches(pred, gt, tol)
        preds.append(pred.to_record())
        pos_errs.append(pe)
        rot_errs.append(re)
        matched.append(ok)
        proprio = np.concatenate([pred.position, pred.rotation, [float(pred.open)]])
    return {
        "seed": scene.seed,
        "task": scene.task,
        "predictions": preds,
        "ground_truth": [g.to_record() for g in gts],
        "position_errors": pos_errs,
        "rotation_errors": rot_errs,
        "matched": matched,
        "success": bool(all(matched)),
    }


def evaluate(
    policy: Policy,
    task: str,
    n_episodes: int,
    seed_start: int,
    cfg: SynthConfig = SynthConfig(),
    workspace: Workspace = Workspace(),
    tol: Tolerance = Tolerance(),
    log_path: str | Path | None = None,
) -> EvalResult:
    """Success rate and median errors over episodes with scene seeds ``seed_start ...``."""
    episodes = []
    for i in range(n_episodes):
        scene = generate_scene(seed_start + i, task, cfg, workspace)
        rng = np.random.default_rng([scene.seed, 7]) if cfg.depth_noise > 0 else None
        views = render(scene, cfg.depth_noise, rng)
        episodes.append(run_episode(policy, scene, views, tol, cfg))
    if log_path is not None:
        write_episode_log(log_path, episodes)
    return summarize(episodes)


def summarize(episodes: Sequence[dict]) -> EvalResult:
    pos = [e for ep in episodes for e in ep["position_errors"]]
    rot = [e for ep in episodes for e in ep["rotation_errors"]]
    rate = float(np.mean([ep["success"] for ep in episodes])) if episodes else float("nan")
    return EvalResult(
        rate,
        float(np.median(pos)) if pos else float("nan"),
        float(np.median(rot)) if rot else float("nan"),
        list(episodes),
    )


def write_episode_log(path: str | Path, episodes: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep, sort_keys=True) + "\n")


def read_episode_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
