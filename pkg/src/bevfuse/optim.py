"""Adam with a one-cycle learning-rate and momentum schedule.

The learning rate ramps linearly from ``lr_max / div`` to ``lr_max`` over the
first ``warmup_frac`` of the run, then linearly down to ``lr_max / final_div``.
beta1 mirrors the cycle: it starts at ``momentum_max``, reaches
``momentum_base`` at the learning-rate peak, and returns to ``momentum_max``
at the end (high momentum whenever the learning rate is low).
"""

import numpy as np

from .errors import UsageError


class OneCycleAdam:
    """Optimizer state plus the cyclic schedule. One instance per run."""

    def __init__(self, params, total_steps, lr_max=1e-3, momentum_base=0.85,
                 momentum_max=0.95, beta2=0.999, epsilon=1e-8,
                 warmup_frac=0.4, div=25.0, final_div=1e4):
        if total_steps < 1:
            raise UsageError("total_steps must be at least 1")
        if not 0.0 < momentum_base <= momentum_max < 1.0:
            raise UsageError("momentum endpoints must satisfy 0 < base <= max < 1")
        self.params = dict(params)
        self.total_steps = int(total_steps)
        self.lr_max = float(lr_max)
        self.momentum_base = float(momentum_base)
        self.momentum_max = float(momentum_max)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.warmup_frac = float(warmup_frac)
        self.div = float(div)
        self.final_div = float(final_div)
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    @property
    def peak_step(self):
        return max(1, int(round(self.warmup_frac * self.total_steps)))

    def schedule(self, step):
        """(learning rate, beta1) for a given step index."""
        if not 0 <= step < self.total_steps:
            raise UsageError(f"step {step} outside the schedule of {self.total_steps}")
        up = self.peak_step
        lr_start = self.lr_max / self.div
        if step <= up:
            f = step / up
            lr = lr_start + f * (self.lr_max - lr_start)
            beta1 = self.momentum_max + f * (self.momentum_base - self.momentum_max)
        else:
            span = max(1, self.total_steps - 1 - up)
            f = min(1.0, (step - up) / span)
            lr_end = self.lr_max / self.final_div
            lr = self.lr_max + f * (lr_end - self.lr_max)
            beta1 = self.momentum_base + f * (self.momentum_max - self.momentum_base)
        return lr, beta1

    def step(self, grads):
        """Apply one Adam update; parameters without a gradient stay untouched.

        ``grads`` maps parameter names to gradient arrays.
        """
        lr, beta1 = self.schedule(self.step_count)
        t = self.step_count + 1
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise UsageError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} of shape {p.shape}"
                )
            m = self._m[name]
            v = self._v[name]
            dt = p.data.dtype.type
            m *= dt(beta1)
            m += dt(1.0 - beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            m_hat = m / dt(1.0 - beta1 ** t)
            v_hat = v / dt(1.0 - self.beta2 ** t)
            p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.epsilon))
        self.step_count += 1
        return lr, beta1

    def export_state(self):
        return {
            "step": self.step_count,
            "m": {n: m.copy() for n, m in self._m.items()},
            "v": {n: v.copy() for n, v in self._v.items()},
        }

    def load_state(self, state):
        self.step_count = int(state["step"])
        for name in self.params:
            if name in state["m"]:
                self._m[name] = state["m"][name].astype(self._m[name].dtype, copy=True)
                self._v[name] = state["v"][name].astype(self._v[name].dtype, copy=True)
