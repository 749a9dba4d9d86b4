"""Finite-difference verification of every registered op and of a tiny
end-to-end pipeline.

Checks run in float64 with central differences: h = 1e-5 per op, h = 1e-6
for the deep pipeline (whose ReLU chains otherwise put shared activations
within one step of their kinks; float64 roundoff stays negligible at 1e-6).
The relative error uses max(|a|, |b|, 1e-8) as the denominator; 1e-4 is the
pass bar. Cases fetch ops through the registry, so a deliberately corrupted
backward rule (swapped into the registry) is detected.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .model import FusionModel
from .scene_gen import generate_scene

H = 1e-5
H_PIPELINE = 1e-6
TOLERANCE = 1e-4
_DENOM_FLOOR = 1e-8


@dataclass
class CheckReport:
    name: str
    max_rel_err: float

    @property
    def ok(self):
        return self.max_rel_err < TOLERANCE


def _rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), _DENOM_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _weighted(out, rng):
    w = ad.constant(rng.normal(0.0, 1.0, out.shape), dtype=np.float64)
    return ad.sum_all(ad.mul(out, w))


def _case(name, rng):
    """Return (forward fn, differentiable input tensors) for one op."""
    op = ad.get_op(name)

    def t(*shape):
        return ad.Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True,
                         dtype=np.float64)

    if name == "add":
        a, b = t(3, 4), t(4)
        return lambda: op(a, b), [a, b]
    if name == "sub":
        a, b = t(3, 4), t(3, 4)
        return lambda: op(a, b), [a, b]
    if name == "mul":
        a, b = t(3, 4), t(3, 1)
        return lambda: op(a, b), [a, b]
    if name == "scale":
        a = t(3, 4)
        return lambda: op(a, -1.7), [a]
    if name == "matmul":
        a, b = t(3, 4), t(4, 2)
        return lambda: op(a, b), [a, b]
    if name == "transpose":
        a = t(3, 4)
        return lambda: op(a), [a]
    if name == "reshape":
        a = t(3, 4)
        return lambda: op(a, (2, 6)), [a]
    if name == "concat":
        a, b = t(2, 3), t(4, 3)
        return lambda: op([a, b], axis=0), [a, b]
    if name == "relu":
        a = t(4, 5)
        return lambda: op(a), [a]
    if name == "sigmoid":
        a = t(4, 5)
        return lambda: op(a), [a]
    if name == "softmax":
        a = t(4, 6)
        return lambda: op(a, axis=-1), [a]
    if name == "layer_norm":
        x, g, b = t(5, 6), t(6), t(6)
        return lambda: op(x, g, b), [x, g, b]
    if name == "conv2d":
        x, w = t(2, 5, 5), t(3, 2, 3, 3)
        return lambda: op(x, w, 2, 1), [x, w]
    if name == "upconv2x2":
        x, w = t(2, 3, 3), t(3, 2, 2, 2)
        return lambda: op(x, w), [x, w]
    if name == "upsample_nearest2":
        x = t(2, 3, 3)
        return lambda: op(x), [x]
    if name == "avgpool2x2":
        x = t(2, 4, 6)
        return lambda: op(x), [x]
    if name == "max_axis":
        x = t(3, 5, 2)
        return lambda: op(x, axis=1), [x]
    if name == "bilinear_sample":
        x = t(3, 4, 5)
        pts = rng.uniform(-0.5, 4.5, (6, 2))
        return lambda: op(x, pts), [x]
    if name == "scatter_to_grid":
        x = t(4, 3)
        rows = np.array([0, 2, 1, 3])
        cols = np.array([1, 0, 3, 2])
        return lambda: op(x, rows, cols, 4, 5), [x]
    if name == "sum_all":
        x = t(3, 4)
        return lambda: op(x), [x]
    if name == "mean_all":
        x = t(3, 4)
        return lambda: op(x), [x]
    if name == "focal_loss":
        pred = ad.Tensor(rng.uniform(0.05, 0.95, (2, 4, 4)), requires_grad=True,
                         dtype=np.float64)
        target = rng.uniform(0.0, 0.9, (2, 4, 4))
        target[0, 1, 2] = 1.0
        target[1, 3, 0] = 1.0
        target = ad.constant(target, dtype=np.float64)
        return lambda: op(pred, target), [pred]
    if name == "l1_masked":
        pred = t(3, 4, 4)
        target = ad.constant(rng.normal(4.0, 0.5, (3, 4, 4)), dtype=np.float64)
        mask = ad.constant((rng.uniform(0, 1, (1, 4, 4)) > 0.5).astype(np.float64))
        return lambda: op(pred, target, mask), [pred]
    raise KeyError(f"no gradcheck case for op {name!r}")


def _loss_of(fn, rng_weights):
    out = fn()
    if out.shape == ():
        return out
    return _weighted(out, rng_weights)


def check_op(name, seed=0):
    """Max relative error between tape and central-difference gradients."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fn, inputs = _case(name, rng)
    w_rng = np.random.default_rng([seed, 77])
    with ad.Tape() as tape:
        loss = _loss_of(fn, w_rng)
    grads = ad.backward(tape, loss)

    worst = 0.0
    for tensor in inputs:
        analytic = grads.get(tensor)
        if analytic is None:
            analytic = np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + H
            up = float(_loss_of(fn, np.random.default_rng([seed, 77])).data)
            flat[i] = keep - H
            down = float(_loss_of(fn, np.random.default_rng([seed, 77])).data)
            flat[i] = keep
            num_flat[i] = (up - down) / (2.0 * H)
        worst = max(worst, _rel_err(analytic, numeric))
    return CheckReport(name=name, max_rel_err=worst)


def _pipeline_setup(seed=0):
    cfg = Config(
        x_min=-4.0, x_max=4.0, y_min=-4.0, y_max=4.0, cell=1.0,
        camera_count=2, image_h=16, image_w=16, focal=8.0,
        c_img=4, d_embed=4, c_cam=4, c_pillar=4, c_lidar=4, c_fused=8,
        refine_hidden=8, query_h=4, query_w=4, n_max=4, classes=1,
        min_boxes=1, max_boxes=2, points_per_box=40, ground_points=48,
        margin=1.5,
    )
    scene = generate_scene(seed, 0, cfg)
    model = FusionModel(cfg, seed=seed, dtype=np.float64)
    return model, scene


def check_pipeline(seed=0, samples_per_param=3, h=H_PIPELINE):
    """Finite-difference spot check through the full loss at toy scale.

    The second-stage net does not feed the loss, so its parameters are
    excluded; every other parameter must receive a tape gradient.
    """
    model, scene = _pipeline_setup(seed)

    def forward():
        return model.loss(scene)

    with ad.Tape() as tape:
        loss = forward()
    grads = ad.backward(tape, loss)

    rng = np.random.default_rng([seed, 13])
    worst = 0.0
    for name, p in sorted(model.parameters().items()):
        if name.startswith("refine."):
            continue
        analytic = grads.get(p)
        if analytic is None:
            raise AssertionError(f"parameter {name} received no gradient")
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = float(forward().data)
            flat[i] = keep - h
            down = float(forward().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(np.array([a_flat[i]]), np.array([numeric])))
    return CheckReport(name="pipeline_8x8", max_rel_err=worst)


def run_all(seed=0, include_pipeline=True):
    """Check every registered op once (plus the pipeline); returns reports."""
    reports = [check_op(name, seed) for name in ad.registered_ops()]
    if include_pipeline:
        reports.append(check_pipeline(seed))
    return reports
