import numpy as np
import pytest

from bevfuse import autodiff as ad
from bevfuse.cameras import (CameraGeometryEmbedding, CameraIntrinsics,
                             CameraPose, CameraRig, CameraView,
                             build_ring_rig, descriptor_grid,
                             init_bev_positional_embedding, project_point,
                             unproject_direction)
from bevfuse.errors import BehindCameraError, ConfigError, UsageError


def canonical_view(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4):
    return CameraView(
        intrinsics=CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy),
        pose=CameraPose(np.eye(3), np.zeros(3)),
        width=width, height=height,
    )


def test_project_canonical_unit_depth():
    u, v, depth = project_point(canonical_view(), (0.0, 0.0, 1.0))
    assert (u, v, depth) == (0.0, 0.0, 1.0)


def test_project_perspective_division():
    u, v, depth = project_point(canonical_view(), (2.0, 4.0, 2.0))
    assert (u, v, depth) == (1.0, 2.0, 2.0)


def test_project_with_offsets():
    view = canonical_view(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    u, v, depth = project_point(view, (1.0, 1.0, 10.0))
    assert (u, v, depth) == (60.0, 60.0, 10.0)


def test_project_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project_point(canonical_view(), (0.0, 0.0, -1.0))
    with pytest.raises(BehindCameraError):
        project_point(canonical_view(), (0.0, 0.0, 0.0))


def test_unproject_principal_ray():
    d = unproject_direction(canonical_view(), (0.0, 0.0))
    np.testing.assert_allclose(d, [0.0, 0.0, 1.0], atol=1e-15)


def test_unproject_unit_offset_pixel():
    view = canonical_view(fx=2.0, fy=2.0, cx=5.0, cy=3.0)
    d = unproject_direction(view, (view.intrinsics.fx + view.intrinsics.cx,
                                   view.intrinsics.cy))
    np.testing.assert_allclose(d, np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0), atol=1e-15)


def test_projection_round_trip_rays_hit_points(rng):
    rig = build_ring_rig(4, 48, 64, 24.0)
    checked = 0
    while checked < 1000:
        view = rig[int(rng.integers(0, len(rig)))]
        depth = rng.uniform(1.0, 50.0)
        p_cam = np.array([rng.uniform(-0.8, 0.8) * depth,
                          rng.uniform(-0.8, 0.8) * depth, depth])
        p_ego = view.pose.rotation.T @ (p_cam - view.pose.translation)
        u, v, d = project_point(view, p_ego)
        assert d == pytest.approx(depth)
        ray = unproject_direction(view, (u, v))
        cross = np.cross(ray, p_ego - view.pose.center)
        assert np.linalg.norm(cross) < 1e-9
        checked += 1


def test_pose_rejects_non_orthonormal():
    with pytest.raises(UsageError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3))


def test_pose_rejects_reflection():
    r = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(UsageError):
        CameraPose(r, np.zeros(3))


def test_rig_needs_at_least_one_camera():
    with pytest.raises(ConfigError):
        CameraRig([])


def test_descriptor_at_principal_point_of_canonical_camera():
    view = canonical_view(fx=1.0, fy=1.0, cx=2.0, cy=2.0, width=4, height=4)
    desc = descriptor_grid(view, (1, 1))
    assert desc.shape == (6, 1, 1)
    np.testing.assert_allclose(desc[:3, 0, 0], [0.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(desc[3:, 0, 0], [0.0, 0.0, 0.0], atol=1e-15)


def test_descriptor_rays_rotate_with_the_camera(rng):
    base = build_ring_rig(1, 48, 64, 24.0)[0]
    theta = 0.7
    r0 = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                   [np.sin(theta), np.cos(theta), 0.0],
                   [0.0, 0.0, 1.0]])
    rotated = CameraView(
        intrinsics=base.intrinsics,
        pose=CameraPose(base.pose.rotation @ r0, base.pose.translation),
        width=base.width, height=base.height,
    )
    d1 = descriptor_grid(base, (4, 3))
    d2 = descriptor_grid(rotated, (4, 3))
    np.testing.assert_allclose(
        d2[:3], np.einsum("ij,jhw->ihw", r0.T, d1[:3]), atol=1e-12
    )


def test_identical_calibration_gives_identical_embeddings(rng):
    emb = CameraGeometryEmbedding(8, np.random.default_rng(0))
    view_a = build_ring_rig(2, 48, 64, 24.0)[0]
    view_b = CameraView(intrinsics=view_a.intrinsics, pose=view_a.pose,
                        width=view_a.width, height=view_a.height)
    out_a = emb(view_a, (4, 3))
    out_b = emb(view_b, (4, 3))
    assert out_a.data.tobytes() == out_b.data.tobytes()


def test_bev_positional_embedding_seeded_and_shaped():
    a = init_bev_positional_embedding(8, 16, 16, np.random.default_rng(42))
    b = init_bev_positional_embedding(8, 16, 16, np.random.default_rng(42))
    assert a.shape == (8, 16, 16)
    assert a.requires_grad
    assert a.data.tobytes() == b.data.tobytes()


def test_ring_rig_counts_and_validation():
    assert len(build_ring_rig(6, 48, 64, 24.0)) == 6
    with pytest.raises(ConfigError):
        build_ring_rig(0, 48, 64, 24.0)
    with pytest.raises(ConfigError):
        build_ring_rig(7, 48, 64, 24.0)
