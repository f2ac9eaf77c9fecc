"""Epoch/step training loop with deterministic shuffling and per-epoch checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .data import augment, stream
from .losses import ClassCenters, ClassWeights, HybridLossConfig, hybrid_loss, update_centers
from .metrics import summarize
from .optim import sgd_step

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "aca", "macro_f1", "auc")
_SHUFFLE, _AUGMENT = 0, 1


class TrainingError(FloatingPointError):
    """Loss or gradients went non-finite; message carries step and parameter diagnostics."""


@dataclass
class TrainState:
    epoch: int
    global_step: int
    seed: int
    velocities: dict
    centers: ClassCenters
    best_metric: float = float("-inf")
    best_epoch: int = -1

    @classmethod
    def initial(cls, model, seed, center_alpha=0.5):
        vel = {k: np.zeros_like(p.data) for k, p in model.trainable_parameters().items()}
        feat_dim = model.head[0].shape[0]
        centers = ClassCenters.zeros(model.config.num_classes, feat_dim, center_alpha, dtype=model.head[0].dtype)
        return cls(0, 0, int(seed), vel, centers)

    def buffers(self):
        out = {f"velocity.{k}": v for k, v in self.velocities.items()}
        out["centers"] = self.centers.centers
        return out

    def scalars(self):
        return {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "seed": self.seed,
            "center_alpha": repr(float(self.centers.alpha)),
            "best_metric": repr(float(self.best_metric)),
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_checkpoint(cls, buffers, scalars):
        vel = {k[len("velocity."):]: v for k, v in buffers.items() if k.startswith("velocity.")}
        return cls(
            int(scalars["epoch"]),
            int(scalars["global_step"]),
            int(scalars["seed"]),
            vel,
            ClassCenters(buffers["centers"].copy(), float(scalars["center_alpha"])),
            float(scalars["best_metric"]),
            int(scalars["best_epoch"]),
        )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    aca: float
    macro_f1: float
    auc: float
    extra: dict = field(default_factory=dict)

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, k))) for k in HISTORY_FIELDS[1:]]


def save_state(directory, model, state):
    nn.save_checkpoint(directory, model, state.buffers(), state.scalars())


def load_state(directory, config=None):
    model, buffers, scalars = nn.load_checkpoint(directory, config)
    return model, TrainState.from_checkpoint(buffers, scalars)


def predict(model, images, batch_size=50):
    """``(probabilities N×K, features N×D)`` without recording a graph."""
    probs, feats = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            logits, f = model(T.Tensor(images[start : start + batch_size]), training=False)
            z = logits.data.astype(np.float64)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            probs.append(z / z.sum(axis=1, keepdims=True))
            feats.append(f.data)
    return np.concatenate(probs), np.concatenate(feats)


def evaluate(model, dataset, batch_size=50):
    probs, _ = predict(model, dataset.images, batch_size)
    return summarize(probs, dataset.labels, model.config.num_classes)


def _diagnostics(model):
    lines = []
    for name, p in model.params.items():
        bad_data = not np.isfinite(p.data).all()
        bad_grad = p.grad is not None and not np.isfinite(p.grad).all()
        if bad_data or bad_grad:
            lines.append(f"{name}: non-finite {'data' if bad_data else 'grad'}")
        else:
            gmax = float(np.abs(p.grad).max()) if p.grad is not None else 0.0
            lines.append(f"{name}: |p|max={float(np.abs(p.data).max()):.3g} |g|max={gmax:.3g}")
    return "\n".join(lines)


def _mean_loss(model, dataset, loss_cfg, centers, batch_size):
    total = 0.0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            labels = dataset.labels[start : start + batch_size]
            logits, feats = model(T.Tensor(dataset.images[start : start + batch_size]), training=False)
            total += hybrid_loss(logits, feats, labels, loss_cfg, centers).item() * len(labels)
    return total / len(dataset)


def write_history(path, records):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(HISTORY_FIELDS)
        for r in records:
            out.writerow(r.row())


def read_history(path):
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["aca"]), float(r["macro_f1"]), float(r["auc"]))
            for r in csv.DictReader(fh)
        ]


def train(
    model,
    train_set,
    loss_cfg,
    sgd_cfg,
    epochs,
    seed,
    eval_set=None,
    policy=None,
    out_dir=None,
    state=None,
    center_alpha=0.5,
):
    """Train for ``epochs`` total epochs (resuming from ``state.epoch`` if given).

    Returns ``(state, history)`` where history holds one record per epoch run by
    this call, plus an epoch-0 record for a fresh start. With ``out_dir`` set, a
    checkpoint is written to ``out_dir/checkpoints/epoch_NNNN`` after each epoch.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    k = model.config.num_classes
    if loss_cfg.class_weights is None:
        loss_cfg = HybridLossConfig(loss_cfg.lam, ClassWeights.from_labels(train_set.labels, k))
    eval_set = eval_set if eval_set is not None and len(eval_set) else train_set
    params = model.trainable_parameters()
    ckpt_root = Path(out_dir) / "checkpoints" if out_dir else None
    history = []

    def finish_epoch(epoch, loss):
        try:
            m = evaluate(model, eval_set)
        except T.NonFiniteError as exc:
            raise TrainingError(
                f"non-finite value evaluating epoch {epoch} after step {state.global_step}: {exc}\n{_diagnostics(model)}"
            ) from exc
        rec = EpochRecord(epoch, loss, m["aca"], m["macro_f1"], m["auc"], m)
        if rec.aca > state.best_metric:
            state.best_metric, state.best_epoch = rec.aca, epoch
        history.append(rec)
        if ckpt_root is not None:
            save_state(ckpt_root / f"epoch_{epoch:04d}", model, state)
        log.info("epoch %d loss %.6f aca %.4f macro-f1 %.4f auc %.4f", epoch, loss, rec.aca, rec.macro_f1, rec.auc)

    if state is None:
        state = TrainState.initial(model, seed, center_alpha)
        finish_epoch(0, _mean_loss(model, train_set, loss_cfg, state.centers, sgd_cfg.batch_size))

    n = len(train_set)
    for epoch in range(state.epoch + 1, epochs + 1):
        order = stream(state.seed, _SHUFFLE, epoch).permutation(n)
        aug_rng = stream(state.seed, _AUGMENT, epoch)
        lr = sgd_cfg.lr_at(epoch)
        running = 0.0
        for start in range(0, n, sgd_cfg.batch_size):
            idx = order[start : start + sgd_cfg.batch_size]
            labels = train_set.labels[idx]
            if policy is None:
                batch = train_set.images[idx]
            else:
                batch = np.stack([augment(train_set.images[i], policy, aug_rng) for i in idx])
            model.zero_grad()
            try:
                logits, feats = model(T.Tensor(batch.astype(model.head[0].dtype, copy=False)), training=True)
                loss = hybrid_loss(logits, feats, labels, loss_cfg, state.centers)
                T.backward(loss)
            except T.NonFiniteError as exc:
                T.reset_graph()
                raise TrainingError(
                    f"non-finite value at epoch {epoch} step {state.global_step}: {exc}\n{_diagnostics(model)}"
                ) from exc
            sgd_step(params, state.velocities, sgd_cfg, lr)
            update_centers(feats.data, labels, state.centers)
            state.global_step += 1
            running += loss.item() * len(idx)
        state.epoch = epoch
        finish_epoch(epoch, running / n)
    return state, history
