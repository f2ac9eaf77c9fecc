"""SGD with momentum and coupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MissingGradientError(RuntimeError):
    pass


@dataclass
class SgdConfig:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_size: int = 20
    schedule: object = None  # optional callable epoch -> lr multiplier

    def __post_init__(self):
        errs = []
        if not self.lr >= 0:
            errs.append(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            errs.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            errs.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if errs:
            raise ValueError("; ".join(errs))

    def lr_at(self, epoch):
        return self.lr if self.schedule is None else self.lr * self.schedule(epoch)


def sgd_step(params, velocities, cfg, lr=None):
    """One update over ``params`` (name → Tensor), mutating ``velocities`` in place.

    v ← momentum·v + (g + weight_decay·p);  p ← p − lr·v
    Parameters with ``requires_grad=False`` (frozen) are skipped.
    """
    lr = cfg.lr if lr is None else lr
    missing = [name for name, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for trainable parameter(s): {', '.join(missing)}")
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        v = velocities.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocities[name] = v.astype(p.data.dtype, copy=False)
        p.data -= np.asarray(lr * velocities[name], dtype=p.data.dtype)
