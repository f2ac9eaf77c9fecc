"""Weighted cross-entropy, center loss, and their λ-weighted sum."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class ClassWeights:
    """Per-class rescaling weights ``total / count``.

    ``exact`` keeps the rational values so ``weight * count == total`` holds
    without rounding; ``weights`` is the float vector the loss consumes.
    """

    counts: tuple
    exact: tuple

    @classmethod
    def from_counts(cls, counts):
        counts = tuple(int(c) for c in counts)
        bad = [k for k, c in enumerate(counts) if c < 1]
        if bad:
            raise ValueError(f"every class needs at least one training sample; empty classes: {bad}")
        total = sum(counts)
        return cls(counts, tuple(Fraction(total, c) for c in counts))

    @classmethod
    def from_labels(cls, labels, num_classes):
        return cls.from_counts(np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes))

    @classmethod
    def uniform(cls, num_classes):
        return cls((1,) * num_classes, (Fraction(1),) * num_classes)

    @property
    def total(self):
        return sum(self.counts)

    @property
    def weights(self):
        return np.array([float(w) for w in self.exact])

    def __len__(self):
        return len(self.counts)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["class", "count", "weight"])
            for k, (c, w) in enumerate(zip(self.counts, self.exact)):
                out.writerow([k, c, repr(float(w))])


@dataclass
class ClassCenters:
    centers: np.ndarray  # K×D
    alpha: float = 0.5

    @classmethod
    def zeros(cls, num_classes, dim, alpha=0.5, dtype=None):
        return cls(np.zeros((num_classes, dim), dtype=dtype or T.get_dtype()), alpha)

    def copy(self):
        return ClassCenters(self.centers.copy(), self.alpha)


@dataclass
class HybridLossConfig:
    lam: float = 0.1
    class_weights: ClassWeights | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _check_labels(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")
    return labels


def weighted_ce(logits, labels, weights):
    """Batch mean of ``weight[y] * -log softmax(logits)[y]``."""
    k = logits.shape[1]
    labels = _check_labels(labels, k)
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=float)
    if w.shape != (k,):
        raise T.DimensionError(f"{w.shape[0]} class weights for {k} logits")
    per_sample = T.pick(T.log_softmax(logits, axis=1), labels)
    weighted = T.mul(per_sample, w[labels].astype(logits.dtype))
    return T.mul(T.sum(weighted), -1.0 / len(labels))


def center_loss(features, labels, centers):
    """Half the summed squared distance of each feature to its class center."""
    c = centers.centers if isinstance(centers, ClassCenters) else np.asarray(centers)
    if features.ndim != 2 or features.shape[1] != c.shape[1]:
        raise T.DimensionError(f"features {features.shape} do not match centers {c.shape}")
    labels = _check_labels(labels, c.shape[0])
    diff = T.sub(features, c[labels].astype(features.dtype))
    return T.mul(T.sum(T.mul(diff, diff)), 0.5)


def update_centers(features, labels, centers):
    """Move each batch class center toward its samples: c -= α Σ(c - x) / (1 + n)."""
    x = np.asarray(getattr(features, "data", features), dtype=centers.centers.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    c = centers.centers
    for k in np.unique(labels):
        members = x[labels == k]
        delta = (c[k] - members).sum(axis=0) / (1 + len(members))
        c[k] = c[k] - centers.alpha * delta
    return centers


def hybrid_loss(logits, features, labels, cfg, centers, return_parts=False):
    """``weighted_ce + lam * center_loss``; with ``lam == 0`` this is the CE term itself."""
    weights = cfg.class_weights or ClassWeights.uniform(logits.shape[1])
    ce = weighted_ce(logits, labels, weights)
    if cfg.lam == 0:
        total, ct = ce, None
    else:
        ct = center_loss(features, labels, centers)
        total = T.add(ce, T.mul(ct, cfg.lam))
    if return_parts:
        return total, ce, ct
    return total
