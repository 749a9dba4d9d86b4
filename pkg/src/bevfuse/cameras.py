"""Pinhole camera handling and calibration-derived embeddings.

Conventions, used everywhere: ego frame is x forward, y left, z up, in
meters; camera frame is x right, y down, z forward. A pose maps ego points
into the camera frame: p_cam = R @ p_ego + t.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BehindCameraError, ConfigError, UsageError

_MIN_DEPTH = 1e-6
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise UsageError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    @property
    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class CameraPose:
    """Rigid ego-to-camera transform; the rotation is validated at construction."""

    def __init__(self, rotation, translation):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise UsageError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise UsageError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise UsageError("rotation matrix determinant is not +1")
        self.rotation = r
        self.translation = t

    @property
    def center(self):
        """Camera center expressed in the ego frame."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")


class CameraRig:
    """Ordered collection of calibrated views."""

    def __init__(self, views):
        views = tuple(views)
        if not views:
            raise ConfigError("a camera rig needs at least one view")
        self.views = views

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


def project_point(view, p_ego):
    """Project an ego-frame point; returns (u, v, depth) in pixels/meters."""
    p_cam = view.pose.rotation @ np.asarray(p_ego, dtype=np.float64) + view.pose.translation
    depth = p_cam[2]
    if depth <= _MIN_DEPTH:
        raise BehindCameraError(f"point at depth {depth:.3g} is behind the camera")
    k = view.intrinsics
    u = k.fx * p_cam[0] / depth + k.cx
    v = k.fy * p_cam[1] / depth + k.cy
    return u, v, depth


def unproject_direction(view, pixel):
    """Unit ego-frame ray direction through a pixel (rotation only)."""
    k = view.intrinsics
    d = np.array([(pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0])
    d /= np.linalg.norm(d)
    return view.pose.rotation.T @ d


def descriptor_grid(view, grid_hw):
    """Per-cell geometric descriptor of a feature grid: 6 x Hf x Wf.

    Channels 0..2 hold the unit ego-frame ray through the cell center,
    channels 3..5 broadcast the camera center in the ego frame.
    """
    hf, wf = grid_hw
    if hf <= 0 or wf <= 0:
        raise ConfigError(f"feature grid must be positive, got {hf}x{wf}")
    k = view.intrinsics
    u = (np.arange(wf) + 0.5) * (view.width / wf)
    v = (np.arange(hf) + 0.5) * (view.height / hf)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)])
    d /= np.linalg.norm(d, axis=0, keepdims=True)
    rays = np.einsum("ij,jhw->ihw", view.pose.rotation.T, d)
    center = np.broadcast_to(view.pose.center.reshape(3, 1, 1), (3, hf, wf))
    return np.concatenate([rays, center], axis=0)


class CameraGeometryEmbedding:
    """Learned projection of the geometric descriptor to the embedding width.

    Bias-free: the embedding only ever augments attention keys, where a
    shared bias shifts every logit of a query row equally and cancels in
    the softmax.
    """

    def __init__(self, width, rng, dtype=ad.DEFAULT_DTYPE, prefix="cam_embed"):
        std = (2.0 / 6.0) ** 0.5
        self.w = ad.parameter(rng.normal(0.0, std, (6, width)), dtype=dtype)
        self.width = width
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.w": self.w}

    def __call__(self, view, grid_hw):
        """Embedding map D x Hf x Wf for one camera at one feature scale."""
        hf, wf = grid_hw
        desc = descriptor_grid(view, grid_hw)
        tokens = ad.constant(desc.reshape(6, hf * wf).T, dtype=self.w.dtype)
        emb = ad.matmul(tokens, self.w)
        return ad.reshape(ad.transpose(emb), (self.width, hf, wf))


def init_bev_positional_embedding(width, hq, wq, rng, dtype=ad.DEFAULT_DTYPE):
    """Seeded learned embedding, one vector per BEV query cell."""
    return ad.parameter(rng.normal(0.0, 0.02, (width, hq, wq)), dtype=dtype)


def build_ring_rig(count, image_w, image_h, focal, mount_radius=1.0, mount_height=1.6):
    """Evenly yaw-spaced cameras looking outward from near the ego origin."""
    if not 1 <= count <= 6:
        raise ConfigError(f"camera count must be in [1, 6], got {count}")
    views = []
    for i in range(count):
        phi = 2.0 * np.pi * i / count
        fwd = np.array([np.cos(phi), np.sin(phi), 0.0])
        right = np.array([np.sin(phi), -np.cos(phi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        r = np.stack([right, down, fwd])
        center = fwd * mount_radius + np.array([0.0, 0.0, mount_height])
        pose = CameraPose(r, -r @ center)
        intr = CameraIntrinsics(fx=focal, fy=focal, cx=image_w / 2.0, cy=image_h / 2.0)
        views.append(CameraView(intrinsics=intr, pose=pose, width=image_w, height=image_h))
    return CameraRig(views)
