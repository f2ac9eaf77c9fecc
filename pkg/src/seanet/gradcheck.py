"""Central finite-difference check of every parameter group of the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .losses import ClassCenters, ClassWeights, HybridLossConfig, hybrid_loss

STEP = 1e-5
# denominators below this are treated as this, so exact-zero gradients compare absolutely
REL_FLOOR = 1e-8


@dataclass
class GroupResult:
    placement: str
    group: str
    checked: int
    worst_rel: float
    worst_abs: float

    def passed(self, tol):
        return self.worst_rel < tol


def relative_error(a, b, floor=REL_FLOOR):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, arr, index, step=STEP):
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (perturbed in place)."""
    old = arr[index]
    arr[index] = old + step
    hi = f()
    arr[index] = old - step
    lo = f()
    arr[index] = old
    return (hi - lo) / (2 * step)


def small_config(placement, channels=8, num_classes=5, feature_dim=0):
    """Gradient-check model: stride-free backbone, so an 8×8 image yields an 8×8×C map."""
    return nn.ModelConfig(
        in_channels=3,
        stem_channels=channels,
        stem_stride=1,
        stage_channels=(channels, channels),
        stage_strides=(1, 1),
        attention_channels=(channels, channels),
        placement=placement,
        se_reduction=4,
        num_classes=num_classes,
        feature_dim=feature_dim,
    )


def check_model(model, images, labels, loss_cfg, centers, entries=12, seed=0, step=STEP):
    """Compare autodiff against central differences on up to ``entries`` entries per parameter.

    Must run in 64-bit precision. Returns ``{name: (checked, worst_rel, worst_abs)}``.
    """
    if model.params["head.w"].dtype != np.float64:
        raise ValueError("gradient checks need a 64-bit model")
    rng = np.random.default_rng(seed)
    saved = {k: v.copy() for k, v in model.buffers.items()}

    def loss_value():
        with T.no_grad():
            logits, feats = model(images, training=True)
            return hybrid_loss(logits, feats, labels, loss_cfg, centers).item()

    model.zero_grad()
    logits, feats = model(images, training=True)
    T.backward(hybrid_loss(logits, feats, labels, loss_cfg, centers))
    results = {}
    for name, p in model.params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= entries else rng.choice(flat.size, entries, replace=False)
        analytic = p.grad.reshape(-1)[picks]
        numeric = np.array([numeric_grad(loss_value, flat, i, step) for i in picks])
        rel = relative_error(analytic, numeric)
        results[name] = (len(picks), float(rel.max()), float(np.abs(analytic - numeric).max()))
    for k, v in saved.items():
        model.buffers[k][...] = v
    return results


def run(placements=tuple(nn.Placement), batch=2, size=8, channels=8, num_classes=5, entries=12, seed=0, lam=1.0):
    """Gradient check for each placement; returns a flat list of :class:`GroupResult`."""
    out = []
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        images = T.Tensor(rng.normal(size=(batch, size, size, 3)))
        labels = rng.integers(0, num_classes, size=batch)
        weights = ClassWeights.from_counts(rng.integers(1, 10, size=num_classes))
        for placement in placements:
            placement = nn.Placement.parse(placement)
            model = nn.build_model(small_config(placement, channels, num_classes), seed)
            centers = ClassCenters(rng.normal(scale=0.5, size=(num_classes, channels)))
            res = check_model(model, images, labels, HybridLossConfig(lam, weights), centers, entries, seed)
            out.extend(GroupResult(placement.value, name, *r) for name, r in res.items())
    return out


def format_report(results, tol):
    lines = [f"{'placement':<10}{'group':<32}{'checked':>8}{'worst_rel':>14}{'worst_abs':>14}  status"]
    for r in results:
        status = "ok" if r.passed(tol) else "FAIL"
        lines.append(f"{r.placement:<10}{r.group:<32}{r.checked:>8}{r.worst_rel:>14.3e}{r.worst_abs:>14.3e}  {status}")
    return "\n".join(lines)
