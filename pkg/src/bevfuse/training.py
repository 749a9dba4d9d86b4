"""Deterministic single-threaded training loop.

Each epoch visits the dataset in a seeded shuffled order, grouped into
batches; the batch loss is the mean over its scenes, so the gradient
direction is unchanged when a batch holds fewer scenes than the configured
size. Freezing the camera stack removes its parameters from both the tape
and the optimizer, which keeps them bitwise intact.
"""

import os

import numpy as np

from . import autodiff as ad
from .detection_head import render_targets
from .errors import ConfigError
from .fileio import load_scene, save_checkpoint
from .model import FusionModel
from .optim import OneCycleAdam

_FLOAT_FMT = "%.9g"


class Trainer:
    def __init__(self, cfg, scene_paths, out_dir):
        if not scene_paths:
            raise ConfigError("training needs a non-empty dataset")
        self.cfg = cfg
        self.out_dir = out_dir
        self.scenes = [load_scene(p) for p in scene_paths]
        self.model = FusionModel(cfg, seed=cfg.seed)
        self.targets = {
            s.scene_id: render_targets(s.boxes, self.model.grid, cfg.classes,
                                       dtype=self.model.dtype)
            for s in self.scenes
        }
        params = self.model.parameters()
        if cfg.freeze_cvt:
            frozen = self.model.camera_parameter_names()
            for name in frozen:
                params[name].requires_grad = False
            params = {n: p for n, p in params.items() if n not in frozen}
        self.trainable = params
        steps_per_epoch = (len(self.scenes) + cfg.batch - 1) // cfg.batch
        self.total_steps = cfg.epochs * steps_per_epoch
        self.optimizer = OneCycleAdam(
            params, self.total_steps, lr_max=cfg.lr_max,
            momentum_base=cfg.momentum_base, momentum_max=cfg.momentum_max,
            beta2=cfg.beta2, epsilon=cfg.epsilon,
            warmup_frac=cfg.warmup_frac, div=cfg.div, final_div=cfg.final_div,
        )
        self.losses = []

    def resume_from(self, arrays, optimizer_state=None):
        self.model.load_state(arrays)
        if optimizer_state is not None:
            self.optimizer.load_state(optimizer_state)

    def train_step(self, batch):
        """One forward/backward/update over a list of scenes."""
        with ad.Tape() as tape:
            total = None
            for scene in batch:
                loss = self.model.loss(scene, self.targets[scene.scene_id])
                total = loss if total is None else ad.add(total, loss)
            total = ad.scale(total, 1.0 / len(batch))
            grads = ad.backward(tape, total)
        named = {}
        for name, p in self.trainable.items():
            g = grads.get(p)
            if g is not None:
                named[name] = g
        lr, beta1 = self.optimizer.step(named)
        value = float(total.data)
        self.losses.append(value)
        return value, lr, beta1

    def run(self, log_path=None):
        """Full run; returns the per-step loss list."""
        order_rng = np.random.default_rng([self.cfg.seed, 0x5EED])
        log = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
        try:
            step = 0
            for _ in range(self.cfg.epochs):
                perm = order_rng.permutation(len(self.scenes))
                for lo in range(0, len(perm), self.cfg.batch):
                    batch = [self.scenes[i] for i in perm[lo:lo + self.cfg.batch]]
                    value, lr, beta1 = self.train_step(batch)
                    if log:
                        log.write(
                            f"{step} {_FLOAT_FMT % value} {_FLOAT_FMT % lr} "
                            f"{_FLOAT_FMT % beta1}\n"
                        )
                    step += 1
        finally:
            if log:
                log.close()
        return self.losses

    def save(self, name="checkpoint", with_optimizer=True):
        path = os.path.join(self.out_dir, name)
        state = self.optimizer.export_state() if with_optimizer else None
        return save_checkpoint(path, self.cfg, self.model.parameters(), state)


def train_run(cfg, data_dir, out_dir, resume=None):
    """CLI-facing driver: load scenes, train, write log + final checkpoint."""
    from .fileio import list_scenes, load_checkpoint

    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg, list_scenes(data_dir), out_dir)
    if resume is not None:
        _, arrays, opt_state = load_checkpoint(resume)
        trainer.resume_from(arrays, opt_state)
    trainer.run(log_path=os.path.join(out_dir, "metrics.txt"))
    return trainer.save()
