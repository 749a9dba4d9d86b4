"""LiDAR branch: pillarization of the point cloud, a shared per-point
feature network with order-invariant max pooling, scatter onto the BEV grid,
and a small convolutional block that widens the receptive field at the
fusion resolution.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera_branch import Conv
from .errors import ShapeError

DECORATED_WIDTH = 9


@dataclass
class PillarBuffer:
    """Decorated points grouped per non-empty BEV cell.

    ``features`` is P x N_max x 9; slots beyond ``counts[i]`` are zero.
    Decoration per point: (x, y, z, intensity, x - mean_x, y - mean_y,
    z - mean_z, x - cell_center_x, y - cell_center_y), with means taken over
    the points retained in that pillar.
    """

    features: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray

    @property
    def n_pillars(self):
        return self.features.shape[0]


def pillarize(points, grid, z_range, n_max, dtype=ad.DEFAULT_DTYPE):
    """Group in-extent points into per-cell pillars with decorated features.

    Points outside the grid extent or the z range are dropped. Cells keep at
    most ``n_max`` points, truncated in input order. Pillars are emitted
    sorted by (row, col).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ShapeError(f"point cloud must be Nx4 (x, y, z, intensity), got {pts.shape}")
    h, w = grid.height, grid.width
    if pts.shape[0] == 0:
        return _empty_buffer(n_max, dtype)
    cols = np.floor(grid.col_coord(pts[:, 0])).astype(np.int64)
    rows = np.floor(grid.row_coord(pts[:, 1])).astype(np.int64)
    keep = (
        (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        & (pts[:, 2] >= z_range[0]) & (pts[:, 2] <= z_range[1])
    )
    pts = pts[keep]
    rows = rows[keep]
    cols = cols[keep]
    if pts.shape[0] == 0:
        return _empty_buffer(n_max, dtype)

    order = np.lexsort((np.arange(pts.shape[0]), cols, rows))
    pts = pts[order]
    rows = rows[order]
    cols = cols[order]
    lin = rows * w + cols
    starts = np.concatenate([[0], np.flatnonzero(np.diff(lin)) + 1, [lin.size]])
    p = starts.size - 1

    feats = np.zeros((p, n_max, DECORATED_WIDTH), dtype=np.float64)
    counts = np.zeros(p, dtype=np.int64)
    out_rows = rows[starts[:-1]]
    out_cols = cols[starts[:-1]]
    for i in range(p):
        begin = starts[i]
        n = min(int(starts[i + 1] - begin), n_max)
        counts[i] = n
        feats[i, :n, :4] = pts[begin:begin + n]
    mean = feats[:, :, :3].sum(axis=1) / counts[:, None]
    cx, cy = grid.cell_center(out_rows, out_cols)
    feats[:, :, 4:7] = feats[:, :, :3] - mean[:, None, :]
    feats[:, :, 7] = feats[:, :, 0] - cx[:, None]
    feats[:, :, 8] = feats[:, :, 1] - cy[:, None]
    slot = np.arange(n_max)[None, :]
    valid = slot < counts[:, None]
    feats *= valid[:, :, None]
    return PillarBuffer(
        features=feats.astype(dtype),
        rows=out_rows,
        cols=out_cols,
        counts=counts,
    )


def _empty_buffer(n_max, dtype):
    return PillarBuffer(
        features=np.zeros((0, n_max, DECORATED_WIDTH), dtype=dtype),
        rows=np.zeros(0, dtype=np.int64),
        cols=np.zeros(0, dtype=np.int64),
        counts=np.zeros(0, dtype=np.int64),
    )


class PillarFeatureNet:
    """Shared linear + ReLU per point, masked max over each pillar."""

    def __init__(self, c_out, rng, dtype=ad.DEFAULT_DTYPE, prefix="lidar.pfn"):
        # decorated inputs are meter-scale (up to the grid half extent), so
        # the usual unit-variance init would saturate the branch
        std = math.sqrt(2.0 / DECORATED_WIDTH) * 0.1
        self.w = ad.parameter(rng.normal(0.0, std, (DECORATED_WIDTH, c_out)), dtype=dtype)
        self.b = ad.parameter(np.zeros(c_out), dtype=dtype)
        self.c_out = c_out
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}

    def __call__(self, buf):
        p, n_max, _ = buf.features.shape
        x = ad.constant(buf.features.reshape(p * n_max, DECORATED_WIDTH), dtype=self.w.dtype)
        x = ad.relu(ad.add(ad.matmul(x, self.w), self.b))
        x = ad.reshape(x, (p, n_max, self.c_out))
        # exclude padded slots from the pooling by pushing them far negative
        valid = (np.arange(n_max)[None, :] < buf.counts[:, None]).astype(x.dtype.type)
        mask = ad.constant(valid[:, :, None], dtype=self.w.dtype)
        offset = ad.constant((valid[:, :, None] - 1.0) * 1e9, dtype=self.w.dtype)
        x = ad.add(ad.mul(x, mask), offset)
        return ad.max_axis(x, axis=1)


def scatter_to_bev(pillar_features, buf, grid):
    """Place pooled pillar features at their cells of a zeroed BEV map."""
    return ad.scatter_to_grid(pillar_features, buf.rows, buf.cols, grid.height, grid.width)


class LidarBevUpscale:
    """Pooled-down path, 2x transposed-conv up, concat with the input, 1x1 mix."""

    def __init__(self, c_in, c_out, rng, dtype=ad.DEFAULT_DTYPE, prefix="lidar.up"):
        self.down = Conv(f"{prefix}.down", c_in, c_in, 3, 1, 1, rng, dtype)
        std = math.sqrt(2.0 / (c_in * 4))
        self.up_w = ad.parameter(rng.normal(0.0, std, (c_in, c_in, 2, 2)), dtype=dtype)
        self.up_b = ad.parameter(np.zeros((c_in, 1, 1)), dtype=dtype)
        self.mix = Conv(f"{prefix}.mix", 2 * c_in, c_out, 1, 1, 0, rng, dtype)
        self.prefix = prefix

    def parameters(self):
        out = self.down.parameters()
        out[f"{self.prefix}.up_w"] = self.up_w
        out[f"{self.prefix}.up_b"] = self.up_b
        out.update(self.mix.parameters())
        return out

    def __call__(self, bev):
        d = ad.avgpool2x2(ad.relu(self.down(bev)))
        u = ad.relu(ad.add(ad.upconv2x2(d, self.up_w), self.up_b))
        return ad.relu(self.mix(ad.concat([bev, u], axis=0)))


class LidarBranch:
    """Point cloud -> LiDAR BEV feature map at the fusion resolution."""

    def __init__(self, cfg, rng, dtype=ad.DEFAULT_DTYPE, prefix="lidar"):
        self.cfg = cfg
        self.dtype = dtype
        self.pfn = PillarFeatureNet(cfg.c_pillar, rng, dtype, f"{prefix}.pfn")
        self.upscale = LidarBevUpscale(cfg.c_pillar, cfg.c_lidar, rng, dtype, f"{prefix}.up")

    def parameters(self):
        out = self.pfn.parameters()
        out.update(self.upscale.parameters())
        return out

    def __call__(self, points, grid):
        buf = pillarize(points, grid, (self.cfg.z_min, self.cfg.z_max),
                        self.cfg.n_max, self.dtype)
        if buf.n_pillars == 0:
            bev = ad.constant(
                np.zeros((self.cfg.c_pillar, grid.height, grid.width)), dtype=self.dtype
            )
        else:
            pooled = self.pfn(buf)
            bev = scatter_to_bev(pooled, buf, grid)
        return self.upscale(bev)
