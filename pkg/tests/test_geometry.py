import math

import numpy as np
import pytest

from bevfuse.errors import UsageError
from bevfuse.geometry import (Box3D, bev_rotated_iou, iou3d, normalize_yaw)


def box(x=0.0, y=0.0, z=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0, **kw):
    return Box3D(x=x, y=y, z=z, l=l, w=w, h=h, yaw=yaw, **kw)


def test_normalize_yaw_range(rng):
    for theta in rng.uniform(-20, 20, 200):
        n = normalize_yaw(theta)
        assert -math.pi < n <= math.pi
    assert normalize_yaw(math.pi) == math.pi
    assert normalize_yaw(-math.pi) == math.pi


def test_box_validation():
    with pytest.raises(UsageError):
        box(l=0.0)
    with pytest.raises(UsageError):
        box(score=1.5)


def test_corners_axis_aligned():
    c = box(x=1.0, y=2.0, l=4.0, w=2.0).bev_corners()
    assert {(-1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (-1.0, 3.0)} == set(map(tuple, c))


def test_iou_identical_boxes_is_exactly_one(rng):
    for _ in range(20):
        b = box(x=rng.uniform(-5, 5), y=rng.uniform(-5, 5),
                l=rng.uniform(0.5, 4), w=rng.uniform(0.5, 4),
                yaw=rng.uniform(-math.pi, math.pi))
        assert bev_rotated_iou(b, b) == 1.0
        assert iou3d(b, b) == 1.0


def test_iou_disjoint_boxes():
    assert bev_rotated_iou(box(), box(x=10.0)) == 0.0


def test_iou_half_offset_unit_squares():
    assert bev_rotated_iou(box(), box(x=0.5)) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou_symmetry(rng):
    for _ in range(50):
        a = box(x=rng.uniform(-2, 2), y=rng.uniform(-2, 2),
                l=rng.uniform(0.5, 3), w=rng.uniform(0.5, 3),
                yaw=rng.uniform(-math.pi, math.pi))
        b = box(x=rng.uniform(-2, 2), y=rng.uniform(-2, 2),
                l=rng.uniform(0.5, 3), w=rng.uniform(0.5, 3),
                yaw=rng.uniform(-math.pi, math.pi))
        assert bev_rotated_iou(a, b) == pytest.approx(bev_rotated_iou(b, a), abs=1e-12)


def test_iou_invariant_under_joint_rotation(rng):
    for _ in range(20):
        a = box(x=rng.uniform(-2, 2), y=rng.uniform(-2, 2), l=2.0, w=1.0,
                yaw=rng.uniform(-math.pi, math.pi))
        b = box(x=rng.uniform(-2, 2), y=rng.uniform(-2, 2), l=1.5, w=1.2,
                yaw=rng.uniform(-math.pi, math.pi))
        theta = rng.uniform(0, 2 * math.pi)
        c, s = math.cos(theta), math.sin(theta)

        def rotated(bx):
            return Box3D(x=c * bx.x - s * bx.y, y=s * bx.x + c * bx.y, z=bx.z,
                         l=bx.l, w=bx.w, h=bx.h, yaw=normalize_yaw(bx.yaw + theta))

        assert abs(bev_rotated_iou(a, b) - bev_rotated_iou(rotated(a), rotated(b))) < 1e-9


def _monte_carlo_iou(a, b, n, rng):
    ca, cb = a.bev_corners(), b.bev_corners()
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    pts = rng.uniform(lo, hi, (n, 2))

    def inside(bx):
        d = pts - np.array([bx.x, bx.y])
        cos, sin = math.cos(bx.yaw), math.sin(bx.yaw)
        u = d[:, 0] * cos + d[:, 1] * sin
        v = -d[:, 0] * sin + d[:, 1] * cos
        return (np.abs(u) <= bx.l / 2) & (np.abs(v) <= bx.w / 2)

    inter = float((inside(a) & inside(b)).mean()) * float(np.prod(hi - lo))
    union = a.l * a.w + b.l * b.w - inter
    return inter / union


def test_iou_against_monte_carlo(rng):
    for _ in range(10):
        a = box(x=rng.uniform(-1, 1), y=rng.uniform(-1, 1),
                l=rng.uniform(1, 3), w=rng.uniform(1, 3),
                yaw=rng.uniform(-math.pi, math.pi))
        b = box(x=rng.uniform(-1, 1), y=rng.uniform(-1, 1),
                l=rng.uniform(1, 3), w=rng.uniform(1, 3),
                yaw=rng.uniform(-math.pi, math.pi))
        estimate = _monte_carlo_iou(a, b, 1_000_000, rng)
        assert bev_rotated_iou(a, b) == pytest.approx(estimate, abs=0.01)


def test_iou3d_z_disjoint_same_footprint():
    a = box(z=0.5, h=1.0)
    b = box(z=2.0, h=1.0)
    assert iou3d(a, b) == 0.0


def test_iou3d_half_z_overlap():
    a = box(z=0.0, h=1.0)
    b = box(z=0.5, h=1.0)
    assert iou3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
