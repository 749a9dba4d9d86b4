import numpy as np
import pytest

from bevfuse.config import Config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """8x8-grid configuration small enough for finite differences."""
    base = dict(
        x_min=-4.0, x_max=4.0, y_min=-4.0, y_max=4.0, cell=1.0,
        camera_count=2, image_h=16, image_w=16, focal=8.0,
        c_img=4, d_embed=4, c_cam=4, c_pillar=4, c_lidar=4, c_fused=8,
        refine_hidden=8, query_h=4, query_w=4, n_max=4, classes=1,
        min_boxes=1, max_boxes=2, points_per_box=40, ground_points=48,
        margin=1.5,
    )
    base.update(overrides)
    return Config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()
