"""Run configuration: every module hyperparameter plus trainer settings.

Stored on disk as the same structured-text (YAML) tree used by scene and
checkpoint manifests; attribute access stays flat in code. Validation runs
at construction so a bad setting fails before any compute starts.
"""

import math
from dataclasses import dataclass, fields

from .errors import ConfigError
from .grids import BevGrid

_SECTIONS = {
    "grid": ("x_min", "x_max", "y_min", "y_max", "cell"),
    "cameras": ("camera_count", "image_h", "image_w", "focal",
                "camera_radius", "camera_height"),
    "model": ("c_img", "d_embed", "c_cam", "c_pillar", "c_lidar", "c_fused",
              "refine_hidden", "query_h", "query_w", "n_max", "classes",
              "z_min", "z_max"),
    "train": ("lr_max", "momentum_base", "momentum_max", "beta2", "epsilon",
              "batch", "epochs", "seed", "warmup_frac", "div", "final_div",
              "lambda_reg", "freeze_cvt", "camera_only"),
    "decode": ("threshold", "top_k", "nms_iou"),
    "gen": ("min_boxes", "max_boxes", "points_per_box", "ground_points",
            "ground_noise", "margin", "max_overlap"),
}


@dataclass
class Config:
    # grid
    x_min: float = -32.0
    x_max: float = 32.0
    y_min: float = -32.0
    y_max: float = 32.0
    cell: float = 1.0
    # cameras
    camera_count: int = 2
    image_h: int = 64
    image_w: int = 48
    focal: float = 24.0
    camera_radius: float = 1.0
    camera_height: float = 1.6
    # model widths and shapes
    c_img: int = 32
    d_embed: int = 32
    c_cam: int = 32
    c_pillar: int = 32
    c_lidar: int = 32
    c_fused: int = 64
    refine_hidden: int = 64
    query_h: int = 16
    query_w: int = 16
    n_max: int = 32
    classes: int = 1
    z_min: float = -3.0
    z_max: float = 3.0
    # training
    lr_max: float = 0.001
    momentum_base: float = 0.85
    momentum_max: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch: int = 4
    epochs: int = 15
    seed: int = 0
    warmup_frac: float = 0.4
    div: float = 25.0
    final_div: float = 1e4
    lambda_reg: float = 0.25
    freeze_cvt: bool = False
    camera_only: bool = False
    # decoding
    threshold: float = 0.35
    top_k: int = 100
    nms_iou: float = 0.2
    # synthetic-scene generation
    min_boxes: int = 1
    max_boxes: int = 6
    points_per_box: int = 200
    ground_points: int = 1024
    ground_noise: float = 0.02
    margin: float = 4.0
    max_overlap: float = 0.05

    def __post_init__(self):
        self.validate()

    # -- derived quantities -------------------------------------------------

    def bev_grid(self):
        return BevGrid(self.x_min, self.x_max, self.y_min, self.y_max, self.cell)

    @property
    def bev_height(self):
        return self.bev_grid().height

    @property
    def bev_width(self):
        return self.bev_grid().width

    # -- validation ---------------------------------------------------------

    def validate(self):
        grid = self.bev_grid()  # raises on a bad extent
        for name in ("c_img", "d_embed", "c_cam", "c_pillar", "c_lidar", "c_fused",
                     "refine_hidden", "query_h", "query_w", "n_max", "classes",
                     "batch", "epochs", "top_k", "image_h", "image_w",
                     "points_per_box", "ground_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 1 <= self.camera_count <= 6:
            raise ConfigError(f"camera_count must be in [1, 6], got {self.camera_count}")
        if self.image_h % 8 or self.image_w % 8:
            raise ConfigError("image sizes must be multiples of 8 for the encoder taps")
        for hq, full, name in ((self.query_h, grid.height, "query_h"),
                               (self.query_w, grid.width, "query_w")):
            ratio = full / hq
            if ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
                raise ConfigError(
                    f"BEV size {full} must be a power-of-2 multiple of {name}={hq}"
                )
        if grid.height / self.query_h != grid.width / self.query_w:
            raise ConfigError("query grid must share one upsampling ratio on both axes")
        if self.z_max <= self.z_min:
            raise ConfigError("z_max must exceed z_min")
        if self.focal <= 0:
            raise ConfigError("focal must be positive")
        if not 0.0 < self.momentum_base <= self.momentum_max < 1.0:
            raise ConfigError("momenta must satisfy 0 < base <= max < 1")
        if not 0.0 <= self.beta2 < 1.0 or self.lr_max <= 0:
            raise ConfigError("beta2 must be in [0, 1) and lr_max positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in (0, 1)")
        if self.div < 1 or self.final_div < 1:
            raise ConfigError("schedule divisors must be >= 1")
        if not 0.0 <= self.threshold <= 1.0 or not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError("threshold and nms_iou must be in [0, 1]")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be non-negative")
        if not 1 <= self.min_boxes <= self.max_boxes:
            raise ConfigError("box count range must satisfy 1 <= min <= max")
        if self.margin < 0 or self.margin * 2 >= min(self.x_max - self.x_min,
                                                     self.y_max - self.y_min):
            raise ConfigError("margin must be non-negative and smaller than the half extent")
        if not 0.0 <= self.max_overlap <= 1.0 or self.ground_noise < 0:
            raise ConfigError("max_overlap must be in [0, 1] and ground_noise >= 0")

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            section: {name: getattr(self, name) for name in names}
            for section, names in _SECTIONS.items()
        }

    @classmethod
    def from_dict(cls, tree):
        known = {f.name for f in fields(cls)}
        flat = {}
        for section, entries in (tree or {}).items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(entries, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            for name, value in entries.items():
                if name not in known or name not in _SECTIONS[section]:
                    raise ConfigError(f"unknown config key {section}.{name}")
                flat[name] = value
        return cls(**flat)
