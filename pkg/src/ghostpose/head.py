"""Ghost scoring, action regression and the combined training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_canonical
from .losses import binary_cross_entropy_with_logits, cross_entropy, mse, soft_cross_entropy
from .nn import Linear, Module
from .tensor import Tensor, _stable_sigmoid, gelu


@dataclass
class KeyposeAction:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z), w >= 0
    open: int
    collision: int
    open_prob: float = field(default=float("nan"))
    collision_prob: float = field(default=float("nan"))
    confidence: float = field(default=float("nan"))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"rotation must be a unit quaternion, got norm {np.linalg.norm(q)}")
        self.rotation = quat_canonical(q)
        self.open = int(self.open)
        self.collision = int(self.collision)
        if self.open not in (0, 1) or self.collision not in (0, 1):
            raise ValueError("open/collision must be 0 or 1")

    def to_record(self) -> dict:
        """10 doubles (position, quaternion, open prob, collision prob, confidence) + 2 bits."""
        return {
            "values": [*map(float, self.position), *map(float, self.rotation),
                       float(self.open_prob), float(self.collision_prob), float(self.confidence)],
            "bits": [self.open, self.collision],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "KeyposeAction":
        v = rec["values"]
        return cls(v[0:3], v[3:7], rec["bits"][0], rec["bits"][1], v[7], v[8], v[9])


class RegressionHead(Module):
    """MLP mapping the query feature to 4 quaternion logits, 1 open logit and 1 collision logit."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or d
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, 6, rng)

    def __call__(self, query: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(query)))


def score(query: Tensor, ghosts: Tensor) -> Tensor:
    """Inner product of each ghost feature with the query: (B, 1, d) x (B, n, d) -> (B, n)."""
    if ghosts.shape[-2] == 0:
        raise ValueError("cannot score an empty ghost set")
    if query.shape[-1] != ghosts.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != ghost dim {ghosts.shape[-1]}")
    logits = ghosts @ query.swapaxes(-1, -2)
    return logits.reshape(logits.shape[:-1])


def regress(raw: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, float, float, int, int]:
    """Decode head output ``raw[6]`` into (quaternion, p_open, p_col, open bit, collision bit)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(6)
    q = raw[:4]
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError(f"degenerate rotation output from the head: {q}")
    q = quat_canonical(q / norm)
    p = _stable_sigmoid(raw[4:6])
    return q, float(p[0]), float(p[1]), int(p[0] >= threshold), int(p[1] >= threshold)


def normalized_quaternion(raw_q: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize and flip to the w >= 0 hemisphere (the flip is treated as constant)."""
    norm = ((raw_q * raw_q).sum(axis=-1, keepdims=True) + eps) ** 0.5
    q = raw_q / norm
    sign = np.where(q.data[..., :1] < 0, -1.0, 1.0)
    return q * sign


@dataclass(frozen=True)
class LossWeights:
    position: float = 1.0
    rotation: float = 10.0
    open: float = 1.0
    collision: float = 1.0


def total_loss(
    stage_logits: list[Tensor],
    stage_targets: list[np.ndarray],
    raw: Tensor,
    gt_rotation: np.ndarray,
    gt_open: np.ndarray,
    gt_collision: np.ndarray,
    weights: LossWeights = LossWeights(),
    n_stages: int = 3,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-stage ghost cross-entropies plus weighted rotation MSE and two BCE terms."""
    if len(stage_logits) != n_stages or len(stage_targets) != n_stages:
        raise ValueError(f"expected {n_stages} supervised stages, got {len(stage_logits)}")
    parts: dict[str, float] = {}
    pos_loss = None
    for i, (lg, tg) in enumerate(zip(stage_logits, stage_targets), start=1):
        tg = np.asarray(tg)
        ce = soft_cross_entropy(lg, tg) if tg.shape == lg.shape else cross_entropy(lg, tg)
        parts[f"ce_stage{i}"] = ce.item()
        pos_loss = ce if pos_loss is None else pos_loss + ce
    q = normalized_quaternion(raw[..., 0:4])
    rot = mse(q, quat_canonical(np.asarray(gt_rotation, dtype=np.float64)))
    bce_open = binary_cross_entropy_with_logits(raw[..., 4], np.asarray(gt_open, dtype=np.float64))
    bce_col = binary_cross_entropy_with_logits(raw[..., 5], np.asarray(gt_collision, dtype=np.float64))
    parts.update(rotation=rot.item(), open=bce_open.item(), collision=bce_col.item())
    loss = (
        pos_loss * weights.position
        + rot * weights.rotation
        + bce_open * weights.open
        + bce_col * weights.collision
    )
    parts["total"] = loss.item()
    return loss, parts
