"""End-to-end pipeline: both branches, fusion, head, and second stage."""

import numpy as np

from . import autodiff as ad
from .camera_branch import CameraBranch
from .config import Config
from .detection_head import (DetectionHead, RefineNet, compute_loss,
                             detect_decode, render_targets, rotated_nms)
from .errors import ConfigError
from .lidar_branch import LidarBranch


class FusionModel:
    """Camera + LiDAR BEV fusion detector (LiDAR branch absent in the
    camera-only ablation)."""

    def __init__(self, cfg: Config, seed=0, dtype=ad.DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = dtype
        self.grid = cfg.bev_grid()
        rng = np.random.default_rng([int(seed), 0xBEF])
        self.camera_branch = CameraBranch(cfg, rng, dtype)
        self.lidar_branch = None if cfg.camera_only else LidarBranch(cfg, rng, dtype)
        self.head = DetectionHead(cfg, rng, dtype)
        self.refine = RefineNet(cfg, rng, dtype)

    def parameters(self):
        out = dict(self.camera_branch.parameters())
        if self.lidar_branch is not None:
            out.update(self.lidar_branch.parameters())
        out.update(self.head.parameters())
        out.update(self.refine.parameters())
        return out

    def camera_parameter_names(self):
        return set(self.camera_branch.parameters())

    def forward(self, scene):
        """SceneRecord -> (HeadOutputs, fused BEV map)."""
        if len(scene.rig) != self.cfg.camera_count:
            raise ConfigError(
                f"scene has {len(scene.rig)} cameras, model expects {self.cfg.camera_count}"
            )
        images = [ad.constant(img, dtype=self.dtype) for img in scene.images]
        cam_bev = self.camera_branch(images, scene.rig)
        lidar_bev = None
        if self.lidar_branch is not None:
            lidar_bev = self.lidar_branch(scene.points, self.grid)
        fused = self.head.fuse(cam_bev, lidar_bev)
        return self.head.predict(fused), fused

    def loss(self, scene, targets=None):
        if targets is None:
            targets = render_targets(scene.boxes, self.grid, self.cfg.classes,
                                     dtype=self.dtype)
        outputs, _ = self.forward(scene)
        return compute_loss(outputs, targets, self.cfg.lambda_reg)

    def detect(self, scene, threshold=None, top_k=None, nms_iou=None):
        """Full two-stage inference with NMS; no tape is recorded."""
        threshold = self.cfg.threshold if threshold is None else threshold
        top_k = self.cfg.top_k if top_k is None else top_k
        nms_iou = self.cfg.nms_iou if nms_iou is None else nms_iou
        outputs, fused = self.forward(scene)
        boxes = detect_decode(outputs, self.grid, threshold, top_k)
        boxes = self.refine(boxes, fused, self.grid)
        return rotated_nms(boxes, nms_iou)

    def load_state(self, arrays):
        """Install named parameter arrays; any mismatch raises with a diff."""
        params = self.parameters()
        problems = []
        for name in sorted(set(params) | set(arrays)):
            if name not in arrays:
                problems.append(f"missing parameter {name}")
            elif name not in params:
                problems.append(f"unexpected parameter {name}")
            elif tuple(arrays[name].shape) != params[name].shape:
                problems.append(
                    f"{name}: checkpoint shape {tuple(arrays[name].shape)} "
                    f"!= model shape {params[name].shape}"
                )
        if problems:
            raise ConfigError("checkpoint/architecture mismatch: " + "; ".join(problems))
        for name, p in params.items():
            p.data = np.ascontiguousarray(arrays[name].astype(p.dtype, copy=True))
