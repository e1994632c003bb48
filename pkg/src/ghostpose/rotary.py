"""3D rotary position encoding.

A feature of size ``d`` is split into ``d / 6`` blocks.  Block ``k`` (1-based)
rotates its three consecutive pairs by ``x * theta_k``, ``y * theta_k`` and
``z * theta_k``, where ``theta_k = base ** (-6 (k - 1) / d)``.  Pair layout
inside block ``k``: dims ``(6k-6, 6k-5)`` follow x, ``(6k-4, 6k-3)`` follow y,
``(6k-2, 6k-1)`` follow z.

Because each block is a product of commuting planar rotations,
``encode(p, a) . encode(q, b) == a . M(q - p) b``: dot products of encoded
features only see relative positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, rotate_pairs


@dataclass(frozen=True)
class RotaryConfig:
    d: int
    base: float = 10000.0

    def __post_init__(self):
        if self.d <= 0 or self.d % 6 != 0:
            raise ValueError(f"rotary dimension must be a positive multiple of 6, got {self.d}")

    @property
    def n_blocks(self) -> int:
        return self.d // 6


def theta(k: int, config: RotaryConfig) -> float:
    """Frequency of block ``k`` (1-based)."""
    if not 1 <= k <= config.n_blocks:
        raise ValueError(f"block index {k} outside [1, {config.n_blocks}]")
    return float(config.base ** (-6.0 * (k - 1) / config.d))


def frequencies(config: RotaryConfig) -> np.ndarray:
    return np.array([theta(k, config) for k in range(1, config.n_blocks + 1)])


def pair_angles(positions: np.ndarray, config: RotaryConfig) -> np.ndarray:
    """Rotation angle of every feature pair, shape ``(..., d / 2)``."""
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"positions must end in a 3-vector, got shape {p.shape}")
    ang = p[..., None, :] * frequencies(config)[:, None]
    return ang.reshape(p.shape[:-1] + (config.d // 2,))


def cos_sin(positions: np.ndarray, config: RotaryConfig) -> tuple[np.ndarray, np.ndarray]:
    ang = pair_angles(positions, config)
    return np.cos(ang), np.sin(ang)


def _check_dim(x_dim: int, config: RotaryConfig) -> None:
    if x_dim != config.d:
        raise ValueError(f"feature dimension {x_dim} does not match rotary d={config.d}")


def encode(p, x, config: RotaryConfig):
    """``M(p) x`` without materializing ``M``; works on arrays and Tensors."""
    if isinstance(x, Tensor):
        _check_dim(x.shape[-1], config)
        c, s = cos_sin(p, config)
        return rotate_pairs(x, c, s)
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x.shape[-1], config)
    c, s = cos_sin(p, config)
    out = np.empty(np.broadcast_shapes(x.shape, c.shape[:-1] + (config.d,)))
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c
    return out


def relative_dot(p_i, x_i, p_j, x_j, config: RotaryConfig) -> float:
    return float(np.dot(encode(p_i, x_i, config), encode(p_j, x_j, config)))


def sinusoidal(positions: np.ndarray, config: RotaryConfig) -> np.ndarray:
    """Absolute sin/cos features of positions using the same frequencies and pair layout."""
    ang = pair_angles(positions, config)
    out = np.empty(ang.shape[:-1] + (config.d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out
