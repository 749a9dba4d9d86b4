"""Center-based detection head on the fused BEV map.

Covers fusion of the two branch maps, Gaussian target rendering, the loss,
peak decoding, second-stage refinement from face-center features, and
greedy rotated NMS.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera_branch import Conv, Linear
from .errors import ConfigError
from .geometry import Box3D, bev_rotated_iou, normalize_yaw

# regression channel layout shared by targets, loss, and decode
REG_CHANNELS = 10  # offset_col, offset_row, z, log l, log w, log h, sin, cos, vx, vy

_HEATMAP_PRIOR_BIAS = -2.1972246  # sigmoid -> 0.1 at init


@dataclass
class HeadOutputs:
    """Per-cell predictions; heatmap is post-sigmoid in (0, 1)."""

    heatmap: ad.Tensor    # K x H x W
    offset: ad.Tensor     # 2 x H x W, fractional cell offsets (col, row)
    z: ad.Tensor          # 1 x H x W, meters
    size_log: ad.Tensor   # 3 x H x W, log-meters (l, w, h)
    rot: ad.Tensor        # 2 x H x W, (sin yaw, cos yaw)
    vel: ad.Tensor        # 2 x H x W, m/s


@dataclass
class Targets:
    heatmap: np.ndarray
    regression: np.ndarray
    mask: np.ndarray
    n_skipped: int


class DetectionHead:
    """Fusion conv plus the per-property 1x1 prediction branches."""

    def __init__(self, cfg, rng, dtype=ad.DEFAULT_DTYPE, prefix="head"):
        self.cfg = cfg
        c_in = cfg.c_cam if cfg.camera_only else cfg.c_cam + cfg.c_lidar
        self.fuse_conv = Conv(f"{prefix}.fuse", c_in, cfg.c_fused, 3, 1, 1, rng, dtype)
        c = cfg.c_fused
        # small-variance branch init keeps a fresh head at the sigmoid prior
        branch_std = 0.01
        self.heat = Conv(f"{prefix}.heat", c, cfg.classes, 1, 1, 0, rng, dtype, branch_std)
        self.heat.b.data[:] = dtype(_HEATMAP_PRIOR_BIAS)
        self.off = Conv(f"{prefix}.off", c, 2, 1, 1, 0, rng, dtype, branch_std)
        self.zc = Conv(f"{prefix}.z", c, 1, 1, 1, 0, rng, dtype, branch_std)
        self.size = Conv(f"{prefix}.size", c, 3, 1, 1, 0, rng, dtype, branch_std)
        self.rot = Conv(f"{prefix}.rot", c, 2, 1, 1, 0, rng, dtype, branch_std)
        self.vel = Conv(f"{prefix}.vel", c, 2, 1, 1, 0, rng, dtype, branch_std)

    def parameters(self):
        out = {}
        for layer in (self.fuse_conv, self.heat, self.off, self.zc,
                      self.size, self.rot, self.vel):
            out.update(layer.parameters())
        return out

    def fuse(self, camera_bev, lidar_bev):
        """Concat the branch maps and mix with a 3x3 conv + ReLU.

        In camera-only mode the LiDAR input is ignored entirely and the conv
        was built at the reduced width.
        """
        if self.cfg.camera_only:
            return ad.relu(self.fuse_conv(camera_bev))
        if lidar_bev is None:
            raise ConfigError("fusion model needs a LiDAR BEV map")
        if camera_bev.shape[1:] != lidar_bev.shape[1:]:
            raise ConfigError(
                f"branch BEV shapes differ: {camera_bev.shape} vs {lidar_bev.shape}"
            )
        return ad.relu(self.fuse_conv(ad.concat([camera_bev, lidar_bev], axis=0)))

    def predict(self, fused):
        return HeadOutputs(
            heatmap=ad.sigmoid(self.heat(fused)),
            offset=self.off(fused),
            z=self.zc(fused),
            size_log=self.size(fused),
            rot=self.rot(fused),
            vel=self.vel(fused),
        )


def render_targets(boxes, grid, n_classes, dtype=np.float32):
    """Rasterize ground truth onto the grid.

    Heatmaps get a per-class Gaussian splat centered at the integer center
    cell, sigma = max(1, max(l, w) / (6 * cell)), combined across boxes by
    max. Regression targets live at the center cell: fractional offsets,
    z, log sizes, (sin, cos) yaw, velocity. Boxes centered outside the grid
    are skipped and counted.
    """
    h, w = grid.height, grid.width
    heat = np.zeros((n_classes, h, w), dtype=np.float64)
    reg = np.zeros((REG_CHANNELS, h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.float64)
    skipped = 0
    for box in boxes:
        if not grid.contains(box.x, box.y) or not 0 <= box.class_id < n_classes:
            skipped += 1
            continue
        u = grid.col_coord(box.x)
        v = grid.row_coord(box.y)
        col = int(np.floor(u))
        row = int(np.floor(v))
        sigma = max(1.0, max(box.l, box.w) / (6.0 * grid.cell))
        radius = int(math.ceil(3.0 * sigma))
        r0, r1 = max(0, row - radius), min(h, row + radius + 1)
        c0, c1 = max(0, col - radius), min(w, col + radius + 1)
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        splat = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat[box.class_id, r0:r1, c0:c1], splat,
                   out=heat[box.class_id, r0:r1, c0:c1])
        yaw = normalize_yaw(box.yaw)
        reg[:, row, col] = (
            u - col, v - row, box.z,
            math.log(box.l), math.log(box.w), math.log(box.h),
            math.sin(yaw), math.cos(yaw), box.vx, box.vy,
        )
        mask[row, col] = 1.0
    return Targets(
        heatmap=heat.astype(dtype),
        regression=reg.astype(dtype),
        mask=mask.astype(dtype),
        n_skipped=skipped,
    )


def compute_loss(outputs, targets, lambda_reg=0.25):
    """Focal heatmap loss plus masked L1 over the regression channels."""
    heat_t = ad.constant(targets.heatmap, dtype=outputs.heatmap.dtype)
    reg_pred = ad.concat(
        [outputs.offset, outputs.z, outputs.size_log, outputs.rot, outputs.vel], axis=0
    )
    reg_t = ad.constant(targets.regression, dtype=reg_pred.dtype)
    mask = ad.constant(targets.mask[None, :, :], dtype=reg_pred.dtype)
    cls_loss = ad.focal_loss(outputs.heatmap, heat_t)
    reg_loss = ad.l1_masked(reg_pred, reg_t, mask)
    return ad.add(cls_loss, ad.scale(reg_loss, lambda_reg))


def _local_maxima(hm):
    """Cells >= all 8 neighbors (borders padded with -inf)."""
    p = np.pad(hm, 1, constant_values=-np.inf)
    ok = np.ones_like(hm, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            ok &= hm >= p[1 + dr:1 + dr + hm.shape[0], 1 + dc:1 + dc + hm.shape[1]]
    return ok


def detect_decode(outputs, grid, threshold=0.35, top_k=100):
    """Peaks of each class heatmap -> boxes, highest score first.

    A peak is a cell >= its 8 neighbors with score >= threshold. At most
    ``top_k`` boxes are returned; ties sort by (row, col, class).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"decode threshold must be in [0, 1], got {threshold}")
    heat = np.asarray(outputs.heatmap.data, dtype=np.float64)
    off = np.asarray(outputs.offset.data, dtype=np.float64)
    zm = np.asarray(outputs.z.data, dtype=np.float64)
    size_log = np.asarray(outputs.size_log.data, dtype=np.float64)
    rot = np.asarray(outputs.rot.data, dtype=np.float64)
    vel = np.asarray(outputs.vel.data, dtype=np.float64)
    candidates = []
    for k in range(heat.shape[0]):
        peaks = _local_maxima(heat[k]) & (heat[k] >= threshold)
        for row, col in np.argwhere(peaks):
            candidates.append((-heat[k, row, col], int(row), int(col), k))
    candidates.sort()
    boxes = []
    for neg_score, row, col, k in candidates[:top_k]:
        x = grid.x_min + (col + off[0, row, col]) * grid.cell
        y = grid.y_min + (row + off[1, row, col]) * grid.cell
        boxes.append(Box3D(
            x=x, y=y, z=zm[0, row, col],
            l=math.exp(size_log[0, row, col]),
            w=math.exp(size_log[1, row, col]),
            h=math.exp(size_log[2, row, col]),
            yaw=math.atan2(rot[0, row, col], rot[1, row, col]),
            vx=vel[0, row, col], vy=vel[1, row, col],
            class_id=k, score=-neg_score,
        ))
    return boxes


def box_face_points(box):
    """BEV sampling points: the center plus the 4 side-face centers.

    The top/bottom faces project onto the center in BEV, so 5 distinct
    points remain.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array(
        [[0.0, 0.0], [box.l / 2, 0.0], [-box.l / 2, 0.0], [0.0, box.w / 2], [0.0, -box.w / 2]]
    )
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.x, box.y])


class RefineNet:
    """Second stage: face-center features -> IoU-style score and box deltas.

    The output layer is zero-initialized, so a fresh net is an identity on
    the geometry and scales scores by sqrt(0.5).
    """

    N_POINTS = 5
    N_OUT = 8  # iou logit + (dx, dy, dz, dlog l, dlog w, dlog h, dyaw)

    def __init__(self, cfg, rng, dtype=ad.DEFAULT_DTYPE, prefix="refine"):
        self.cfg = cfg
        d_in = self.N_POINTS * cfg.c_fused
        self.fc1 = Linear(f"{prefix}.fc1", d_in, cfg.refine_hidden, rng, dtype)
        self.fc2 = Linear(f"{prefix}.fc2", cfg.refine_hidden, self.N_OUT, rng, dtype,
                          zero_init=True)

    def parameters(self):
        out = self.fc1.parameters()
        out.update(self.fc2.parameters())
        return out

    def __call__(self, boxes, fused, grid):
        if not boxes:
            return []
        pts = np.concatenate([box_face_points(b) for b in boxes])
        # meters -> feature cell coordinates (cell centers sit at integers)
        rc = np.stack(
            [grid.row_coord(pts[:, 1]) - 0.5, grid.col_coord(pts[:, 0]) - 0.5], axis=1
        )
        sampled = ad.bilinear_sample(fused, rc)
        feats = ad.reshape(sampled, (len(boxes), self.N_POINTS * self.cfg.c_fused))
        raw = self.fc2(ad.relu(self.fc1(feats))).data
        iou_score = 1.0 / (1.0 + np.exp(-np.asarray(raw[:, 0], dtype=np.float64)))
        deltas = np.asarray(raw[:, 1:], dtype=np.float64)
        refined = []
        for i, b in enumerate(boxes):
            d = deltas[i]
            refined.append(Box3D(
                x=b.x + d[0], y=b.y + d[1], z=b.z + d[2],
                l=b.l * math.exp(d[3]), w=b.w * math.exp(d[4]), h=b.h * math.exp(d[5]),
                yaw=normalize_yaw(b.yaw + d[6]),
                vx=b.vx, vy=b.vy, class_id=b.class_id,
                score=math.sqrt(b.score * iou_score[i]),
            ))
        return refined


def rotated_nms(boxes, iou_threshold=0.2):
    """Greedy suppression by BEV rotated IoU within each class.

    Boxes are visited by descending score (ties keep the earlier index); a
    box survives iff its IoU with every kept box of its class is below the
    threshold. The result is score-ordered and always a subset of the input.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"NMS IoU threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        box = boxes[i]
        if all(
            bev_rotated_iou(box, other) < iou_threshold
            for other in kept if other.class_id == box.class_id
        ):
            kept.append(box)
    return kept
