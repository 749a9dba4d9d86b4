"""Seeded synthetic scenes: car-like boxes, surface-sampled point clouds,
and per-camera silhouette rasters.

Everything is driven by one numpy Generator per scene, so a (seed, index)
pair reproduces the scene bit for bit.
"""

import math
import os

import numpy as np

from .cameras import build_ring_rig, project_point
from .errors import BehindCameraError
from .fileio import SceneRecord, save_scene, write_detections
from .geometry import Box3D, bev_rotated_iou

_SIZE_RANGES = {"l": (3.5, 5.0), "w": (1.6, 2.1), "h": (1.4, 1.8)}
_BACKGROUND = (0.12, 0.12, 0.12)
_PALETTE = [
    (0.85, 0.55, 0.25), (0.30, 0.70, 0.85), (0.75, 0.30, 0.70),
    (0.40, 0.80, 0.35), (0.90, 0.35, 0.30), (0.55, 0.55, 0.90),
]
_COLOR_GAIN = 5.0  # silhouette intensity = palette * min(1, gain / depth)
_PLACEMENT_TRIES = 200


def _sample_boxes(rng, cfg):
    n = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    boxes = []
    lo_x, hi_x = cfg.x_min + cfg.margin, cfg.x_max - cfg.margin
    lo_y, hi_y = cfg.y_min + cfg.margin, cfg.y_max - cfg.margin
    for _ in range(n):
        for _ in range(_PLACEMENT_TRIES):
            l = rng.uniform(*_SIZE_RANGES["l"])
            w = rng.uniform(*_SIZE_RANGES["w"])
            h = rng.uniform(*_SIZE_RANGES["h"])
            box = Box3D(
                x=rng.uniform(lo_x, hi_x), y=rng.uniform(lo_y, hi_y), z=h / 2.0,
                l=l, w=w, h=h,
                yaw=rng.uniform(-math.pi, math.pi),
                class_id=int(rng.integers(0, cfg.classes)),
            )
            if all(bev_rotated_iou(box, other) < cfg.max_overlap for other in boxes):
                boxes.append(box)
                break
    return boxes


def _box_rotation(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners_3d(box):
    """The 8 corners, ego frame."""
    signs = np.array([
        [sx, sy, sz]
        for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)
    ])
    local = signs * np.array([box.l, box.w, box.h])
    return local @ _box_rotation(box).T + np.array([box.x, box.y, box.z])


def _sample_box_surface(rng, box, n_points):
    """Uniform samples over the 6 faces, counts proportional to face area."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * w, l * w, l * h, l * h, w * h, w * h])
    counts = rng.multinomial(n_points, areas / areas.sum())
    pts = []
    for face, count in enumerate(counts):
        if count == 0:
            continue
        a = rng.uniform(-0.5, 0.5, (count, 2))
        if face < 2:                     # top / bottom
            local = np.column_stack([a[:, 0] * l, a[:, 1] * w,
                                     np.full(count, (0.5 if face == 0 else -0.5) * h)])
        elif face < 4:                   # left / right sides
            local = np.column_stack([a[:, 0] * l,
                                     np.full(count, (0.5 if face == 2 else -0.5) * w),
                                     a[:, 1] * h])
        else:                            # front / back
            local = np.column_stack([np.full(count, (0.5 if face == 4 else -0.5) * l),
                                     a[:, 0] * w, a[:, 1] * h])
        pts.append(local)
    local = np.concatenate(pts)
    return local @ _box_rotation(box).T + np.array([box.x, box.y, box.z])


def _sample_points(rng, boxes, cfg):
    clouds = []
    for box in boxes:
        xyz = _sample_box_surface(rng, box, cfg.points_per_box)
        intensity = rng.uniform(0.0, 1.0, (xyz.shape[0], 1))
        clouds.append(np.column_stack([xyz, intensity]))
    gx = rng.uniform(cfg.x_min, cfg.x_max, cfg.ground_points)
    gy = rng.uniform(cfg.y_min, cfg.y_max, cfg.ground_points)
    gz = rng.normal(0.0, cfg.ground_noise, cfg.ground_points)
    gi = rng.uniform(0.0, 1.0, cfg.ground_points)
    clouds.append(np.column_stack([gx, gy, gz, gi]))
    return np.concatenate(clouds).astype(np.float32)


def _convex_hull(points):
    """Monotone-chain hull, CCW, of an Nx2 array."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(iterable):
        chain = []
        for p in iterable:
            while len(chain) >= 2:
                ox, oy = chain[-2]
                ax, ay = chain[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def _fill_hull(mask_shape, hull):
    """Boolean mask of pixel centers inside a CCW convex hull."""
    h, w = mask_shape
    if hull.shape[0] < 3:
        return np.zeros(mask_shape, dtype=bool)
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.ones(mask_shape, dtype=bool)
    n = hull.shape[0]
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return inside


def render_images(rig, boxes, cfg):
    """Painter-ordered silhouette raster per camera.

    A box is drawn only when its center projects inside the image with
    positive depth (and all corners sit in front of the camera); the fill
    color is its class color scaled by min(1, gain / depth).
    """
    images = []
    for view in rig:
        img = np.empty((3, view.height, view.width), dtype=np.float32)
        for ch, bg in enumerate(_BACKGROUND):
            img[ch] = bg
        drawable = []
        for box in boxes:
            try:
                u, v, depth = project_point(view, (box.x, box.y, box.z))
            except BehindCameraError:
                continue
            if not (0 <= u < view.width and 0 <= v < view.height):
                continue
            try:
                uv = np.array([project_point(view, c)[:2] for c in box_corners_3d(box)])
            except BehindCameraError:
                continue
            drawable.append((depth, box.class_id, uv))
        drawable.sort(key=lambda d: -d[0])  # far first
        for depth, class_id, uv in drawable:
            mask = _fill_hull((view.height, view.width), _convex_hull(uv))
            gain = min(1.0, _COLOR_GAIN / depth)
            color = _PALETTE[class_id % len(_PALETTE)]
            for ch in range(3):
                img[ch][mask] = np.float32(color[ch] * gain)
        images.append(img)
    return images


def generate_scene(seed, index, cfg):
    """Deterministic scene for a (seed, index) pair."""
    rng = np.random.default_rng([seed, index])
    rig = build_ring_rig(cfg.camera_count, cfg.image_w, cfg.image_h, cfg.focal,
                         cfg.camera_radius, cfg.camera_height)
    boxes = _sample_boxes(rng, cfg)
    points = _sample_points(rng, boxes, cfg)
    images = render_images(rig, boxes, cfg)
    return SceneRecord(
        scene_id=f"scene_{index:06d}",
        rig=rig,
        images=images,
        points=points,
        boxes=boxes,
    )


def generate_dataset(out_dir, n_scenes, seed, cfg):
    """Write ``n_scenes`` scene manifests plus a pooled ground-truth file."""
    os.makedirs(out_dir, exist_ok=True)
    gt_records = []
    paths = []
    for i in range(n_scenes):
        scene = generate_scene(seed, i, cfg)
        paths.append(save_scene(out_dir, scene))
        gt_records.extend((scene.scene_id, b) for b in scene.boxes)
    write_detections(os.path.join(out_dir, "ground_truth.txt"), gt_records)
    return paths
