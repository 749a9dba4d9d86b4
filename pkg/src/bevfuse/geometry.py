"""Oriented 3D boxes and their BEV/3D overlap geometry.

Intersections of yaw-rotated rectangles use Sutherland-Hodgman convex
clipping with shoelace areas, so identical boxes score an IoU of exactly 1.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError

_TWO_PI = 2.0 * math.pi


def normalize_yaw(theta):
    """Map an angle to (-pi, pi]."""
    r = math.remainder(float(theta), _TWO_PI)
    return r if r > -math.pi else r + _TWO_PI


@dataclass
class Box3D:
    """Oriented box: center (x, y, z), size (l, w, h) with l along heading,
    yaw CCW about +z from +x, planar velocity, class id, and score."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise UsageError(f"box sizes must be positive, got ({self.l}, {self.w}, {self.h})")
        if not 0.0 <= self.score <= 1.0:
            raise UsageError(f"score must be in [0, 1], got {self.score}")
        self.yaw = normalize_yaw(self.yaw)

    def bev_corners(self):
        """Counter-clockwise footprint corners, 4x2 (x, y)."""
        hl, hw = self.l / 2.0, self.w / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def with_score(self, score):
        return replace(self, score=float(score))


def _polygon_area(pts):
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, clip):
    """Clip a polygon by each edge of a CCW convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        pts = out
        out = []
        m = len(pts)
        if m == 0:
            break
        side = [ex * (py - ay) - ey * (px - ax) for px, py in pts]
        for j in range(m):
            k = (j + 1) % m
            p_in = side[j] >= 0.0
            q_in = side[k] >= 0.0
            if p_in:
                out.append(pts[j])
            if p_in != q_in:
                t = side[j] / (side[j] - side[k])
                px, py = pts[j]
                qx, qy = pts[k]
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return np.array(out) if len(out) >= 3 else np.empty((0, 2))


def bev_intersection_area(a, b):
    ca = a.bev_corners()
    cb = b.bev_corners()
    poly = _clip_polygon(ca, cb)
    if poly.shape[0] < 3:
        return 0.0
    return float(_polygon_area(poly))


def bev_rotated_iou(a, b):
    """IoU of the two yaw-rotated BEV footprints, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    area_a = float(_polygon_area(a.bev_corners()))
    area_b = float(_polygon_area(b.bev_corners()))
    return inter / (area_a + area_b - inter)


def iou3d(a, b):
    """Volumetric IoU: BEV footprint intersection times the z-range overlap."""
    dz = min(a.z + a.h / 2.0, b.z + b.h / 2.0) - max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    if dz <= 0.0:
        return 0.0
    inter_bev = bev_intersection_area(a, b)
    if inter_bev == 0.0:
        return 0.0
    inter = inter_bev * dz
    vol_a = float(_polygon_area(a.bev_corners())) * a.h
    vol_b = float(_polygon_area(b.bev_corners())) * b.h
    return inter / (vol_a + vol_b - inter)
