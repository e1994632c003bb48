"""Lifting posed RGB-D views into coarse and fine 3D feature clouds."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Workspace
from .nn import Conv2d, Module
from .tensor import Tensor, upsample2x


class SceneWarning(UserWarning):
    pass


@dataclass
class CameraView:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W meters, 0 = invalid
    intrinsics: np.ndarray  # 3 x 3
    extrinsics: np.ndarray  # 4 x 4 camera-to-world

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match depth {self.depth.shape}")
        K = self.intrinsics
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be a 3x3 pinhole matrix with positive focal lengths")
        R = self.extrinsics[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("extrinsics rotation is not orthonormal with det +1")

    @property
    def hw(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class FeatureCloud:
    positions: np.ndarray  # N x 3
    features: Tensor | None  # N x d
    scale: str  # "coarse" | "fine"
    view_index: np.ndarray  # N
    token_index: np.ndarray  # N, flat index into the per-view grid

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx: np.ndarray) -> "FeatureCloud":
        feats = self.features[idx] if self.features is not None else None
        return FeatureCloud(self.positions[idx], feats, self.scale, self.view_index[idx], self.token_index[idx])


# -- 2D encoder -----------------------------------------------------------------

class VisualEncoder(Module):
    """Four stride-2 conv stages with a two-level top-down pyramid.

    With strides (8, 4) a 64x64 view yields an 8x8 coarse and a 16x16 fine grid.
    """

    strides = (8, 4)

    def __init__(self, d: int, rng: np.random.Generator, widths: Sequence[int] = (16, 32, 64), zero: bool = False):
        w1, w2, w3 = widths
        self.conv1 = Conv2d(3, w1, 3, rng, stride=2, padding=1, zero=zero)
        self.conv2 = Conv2d(w1, w2, 3, rng, stride=2, padding=1, zero=zero)
        self.conv3 = Conv2d(w2, w3, 3, rng, stride=2, padding=1, zero=zero)
        self.conv4 = Conv2d(w3, d, 3, rng, stride=2, padding=1, zero=zero)
        self.lat4 = Conv2d(d, d, 1, rng, zero=zero)
        self.lat3 = Conv2d(w3, d, 1, rng, zero=zero)
        self.lat2 = Conv2d(w2, d, 1, rng, zero=zero)
        self.d = d

    def __call__(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """``images``: (N, H, W, 3) in [0, 1].  Returns coarse and fine grids as (N, h*w, d)."""
        n, h, w, _ = images.shape
        if h % 16 or w % 16:
            raise ValueError(f"view size must be divisible by 16, got {h}x{w}")
        x = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)) - 0.5)
        c1 = self.conv1(x).relu()
        c2 = self.conv2(c1).relu()
        c3 = self.conv3(c2).relu()
        c4 = self.conv4(c3).relu()
        p4 = self.lat4(c4)
        p3 = self.lat3(c3) + upsample2x(p4)
        p2 = self.lat2(c2) + upsample2x(p3)
        return _to_tokens(p3), _to_tokens(p2)


def _to_tokens(grid: Tensor) -> Tensor:
    n, d, h, w = grid.shape
    return grid.reshape(n, d, h * w).transpose(0, 2, 1)


def token_grid_shape(hw: tuple[int, int], stride: int) -> tuple[int, int]:
    return hw[0] // stride, hw[1] // stride


def encode_views(views: Sequence[CameraView], encoder: VisualEncoder) -> tuple[Tensor, Tensor]:
    """Per-view coarse and fine token grids, each (n_views, h*w, d)."""
    sizes = {v.hw for v in views}
    if len(sizes) != 1:
        raise ValueError(f"all views must share one image size, got {sorted(sizes)}")
    return encoder(np.stack([v.rgb for v in views]))


# -- geometry ---------------------------------------------------------------------

def token_centers(hw: tuple[int, int], stride: int) -> np.ndarray:
    """Pixel coordinates (u, v) of token centers in row-major token order."""
    gh, gw = token_grid_shape(hw, stride)
    off = (stride - 1) / 2.0
    v, u = np.meshgrid(np.arange(gh) * stride + off, np.arange(gw) * stride + off, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def interpolate_depth(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear depth at subpixel ``uv`` using valid (>0) neighbours only; 0 where none are valid."""
    h, w = depth.shape
    u = np.clip(uv[:, 0], 0, w - 1)
    v = np.clip(uv[:, 1], 0, h - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    num = np.zeros(len(uv))
    den = np.zeros(len(uv))
    for vv, uu, wt in (
        (v0, u0, (1 - fu) * (1 - fv)),
        (v0, u1, fu * (1 - fv)),
        (v1, u0, (1 - fu) * fv),
        (v1, u1, fu * fv),
    ):
        z = depth[vv, uu]
        ok = (z > 0) & (wt > 0)
        num += np.where(ok, wt * z, 0.0)
        den += np.where(ok, wt, 0.0)
    out = np.zeros(len(uv))
    good = den > 0
    out[good] = num[good] / den[good]
    return out


def backproject(uv: np.ndarray, depth: np.ndarray, intrinsics: np.ndarray, extrinsics: np.ndarray) -> np.ndarray:
    """World points for pixels ``uv`` (M x 2) at z-depths ``depth`` (M)."""
    rays = np.linalg.solve(intrinsics, np.concatenate([uv, np.ones((len(uv), 1))], axis=1).T).T
    cam = rays * depth[:, None]
    return cam @ extrinsics[:3, :3].T + extrinsics[:3, 3]


def unproject(view: CameraView, stride: int, workspace: Workspace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World positions of the token centers of one view and the indices of surviving tokens.

    Tokens with no valid depth neighbour, or landing outside ``workspace``, are dropped.
    """
    uv = token_centers(view.hw, stride)
    z = interpolate_depth(view.depth, uv)
    keep = z > 0
    if not keep.any():
        warnings.warn("view has no valid depth at any token centre; it contributes no points", SceneWarning)
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    idx = np.nonzero(keep)[0]
    pts = backproject(uv[idx], z[idx], view.intrinsics, view.extrinsics)
    if workspace is not None:
        inside = workspace.contains(pts)
        idx, pts = idx[inside], pts[inside]
    return pts, idx


@dataclass
class LiftedGeometry:
    """Feature-independent part of a lifted scene; reusable across training steps."""

    positions: np.ndarray
    view_index: np.ndarray
    token_index: np.ndarray
    flat_index: np.ndarray  # index into the (views * tokens) stacked grid


def lift_geometry(views: Sequence[CameraView], stride: int, workspace: Workspace | None = None) -> LiftedGeometry:
    pos, vidx, tidx, flat = [], [], [], []
    per_view = token_grid_shape(views[0].hw, stride)
    n_tok = per_view[0] * per_view[1]
    for i, view in enumerate(views):
        p, t = unproject(view, stride, workspace)
        pos.append(p)
        tidx.append(t)
        vidx.append(np.full(len(t), i, dtype=np.int64))
        flat.append(t + i * n_tok)
    return LiftedGeometry(
        positions=np.concatenate(pos) if pos else np.zeros((0, 3)),
        view_index=np.concatenate(vidx),
        token_index=np.concatenate(tidx),
        flat_index=np.concatenate(flat),
    )


def build_feature_cloud(
    views: Sequence[CameraView],
    encoder: VisualEncoder | None = None,
    workspace: Workspace | None = None,
) -> tuple[FeatureCloud, FeatureCloud]:
    """Coarse and fine feature clouds, concatenated by view index then token index."""
    if len(views) == 0:
        raise ValueError("need at least one view")
    coarse_tokens = fine_tokens = None
    if encoder is not None:
        coarse_tokens, fine_tokens = encode_views(views, encoder)
    clouds = []
    for scale, stride, tokens in (
        ("coarse", VisualEncoder.strides[0], coarse_tokens),
        ("fine", VisualEncoder.strides[1], fine_tokens),
    ):
        geo = lift_geometry(views, stride, workspace)
        if len(geo.positions) == 0:
            raise ValueError(f"no {scale} tokens survive lifting; the scene is invisible")
        feats = None
        if tokens is not None:
            feats = tokens.reshape(-1, tokens.shape[-1])[geo.flat_index]
        clouds.append(FeatureCloud(geo.positions, feats, scale, geo.view_index, geo.token_index))
    return clouds[0], clouds[1]


def nearest_indices(positions: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` points closest to ``center``; ties go to the lower index."""
    n = len(positions)
    if k > n:
        warnings.warn(f"requested {k} local points but the cloud has {n}; using all", SceneWarning)
        k = n
    d2 = ((positions - center) ** 2).sum(axis=1)
    if k < n:
        part = np.argpartition(d2, k - 1)[:k]
        cutoff = d2[part].max()
        # include every point tied with the cutoff before the stable sort
        cand = np.nonzero(d2 <= cutoff)[0]
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, d2[cand]))]
    return order[:k]


def select_local_fine(cloud: FeatureCloud, center, k: int) -> FeatureCloud:
    idx = nearest_indices(cloud.positions, np.asarray(center, dtype=np.float64), k)
    return cloud.subset(idx)


# -- scene file format ------------------------------------------------------------

SCENE_MAGIC = b"GHPSCENE"
SCENE_VERSION = 1


def encode_view_block(view: CameraView) -> bytes:
    h, w = view.hw
    head = struct.pack("<II", h, w)
    head += np.ascontiguousarray(view.intrinsics, dtype="<f8").tobytes()
    head += np.ascontiguousarray(view.extrinsics[:3, :4], dtype="<f8").tobytes()
    return (
        head
        + np.ascontiguousarray(view.rgb, dtype="<f8").tobytes()
        + np.ascontiguousarray(view.depth, dtype="<f8").tobytes()
    )


def decode_view_block(buf: bytes, offset: int = 0) -> tuple[CameraView, int]:
    h, w = struct.unpack_from("<II", buf, offset)
    pos = offset + 8
    K = np.frombuffer(buf, "<f8", 9, pos).reshape(3, 3).astype(np.float64)
    pos += 72
    E = np.eye(4)
    E[:3, :4] = np.frombuffer(buf, "<f8", 12, pos).reshape(3, 4)
    pos += 96
    rgb = np.frombuffer(buf, "<f8", h * w * 3, pos).reshape(h, w, 3).astype(np.float64)
    pos += 8 * h * w * 3
    depth = np.frombuffer(buf, "<f8", h * w, pos).reshape(h, w).astype(np.float64)
    pos += 8 * h * w
    return CameraView(rgb, depth, K, E), pos


def encode_scene(views: Sequence[CameraView]) -> bytes:
    out = bytearray(SCENE_MAGIC) + struct.pack("<II", SCENE_VERSION, len(views))
    for v in views:
        out += encode_view_block(v)
    return bytes(out)


def decode_scene(buf: bytes, offset: int = 0) -> tuple[list[CameraView], int]:
    if buf[offset : offset + 8] != SCENE_MAGIC:
        raise ValueError("not a scene block (bad magic)")
    version, n = struct.unpack_from("<II", buf, offset + 8)
    if version != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {version}")
    pos = offset + 16
    views = []
    for _ in range(n):
        v, pos = decode_view_block(buf, pos)
        views.append(v)
    return views, pos


def write_scene(path: str | Path, views: Sequence[CameraView]) -> None:
    Path(path).write_bytes(encode_scene(views))


def read_scene(path: str | Path) -> list[CameraView]:
    return decode_scene(Path(path).read_bytes())[0]
