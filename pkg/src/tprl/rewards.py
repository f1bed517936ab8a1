"""Set-level rewards over a batch of feature sequences.

Class and user counts are those present in the batch; empty
(class, user) cells are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RewardBatch:
    features: np.ndarray  # (N, s, k)
    labels: np.ndarray
    users: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[:, None, :]
        self.labels = np.asarray(self.labels)
        self.users = np.asarray(self.users)
        n = self.features.shape[0]
        if n == 0:
            raise ValueError("reward batch is empty")
        if self.features.ndim != 3 or len(self.labels) != n or len(self.users) != n:
            raise ValueError("features, labels and users must have matching lengths")


@dataclass
class RewardBreakdown:
    r_cls: float
    r_inv: float
    j: float
    w_cls: float
    w_inv: float
    diagnostics: dict = field(default_factory=dict)


def _sqnorm(a: np.ndarray) -> np.ndarray:
    return np.sum(a * a, axis=(-2, -1))


def class_centroids(batch: RewardBatch) -> dict:
    return {c: batch.features[batch.labels == c].mean(axis=0) for c in np.unique(batch.labels)}


def _pair_mean(centroids: np.ndarray) -> float:
    """Mean squared Frobenius gap over ordered pairs of distinct rows."""
    n = len(centroids)
    if n < 2:
        return 0.0
    diff = centroids[:, None] - centroids[None, :]
    return float(_sqnorm(diff).sum() / (n * (n - 1)))


def r_cls(batch: RewardBatch) -> float:
    cents = class_centroids(batch)
    if len(cents) < 2:
        raise ValueError(f"class reward needs >= 2 classes in the batch, got {len(cents)}")
    return _pair_mean(np.stack(list(cents.values())))


def _cell_stats(batch: RewardBatch, c) -> tuple[float, np.ndarray]:
    in_class = batch.labels == c
    scatters, cents = [], []
    for u in np.unique(batch.users[in_class]):
        z = batch.features[in_class & (batch.users == u)]
        mu = z.mean(axis=0)
        scatters.append(_sqnorm(z - mu).mean())
        cents.append(mu)
    return float(np.mean(scatters)), np.stack(cents)


def r_inv(batch: RewardBatch) -> float:
    total = 0.0
    for c in np.unique(batch.labels):
        intra, cents = _cell_stats(batch, c)
        total += intra + _pair_mean(cents)
    return -total


def combined_objective(batch: RewardBatch, w_cls: float = 5.0, w_inv: float = 0.5) -> RewardBreakdown:
    if w_cls <= 0 or w_inv < 0:
        raise ValueError("need w_cls > 0 and w_inv >= 0")
    rc = r_cls(batch)
    ri = r_inv(batch)
    cents = class_centroids(batch)
    diag = {
        "class_centroid_norms": {int(c): float(np.sqrt(_sqnorm(m))) for c, m in cents.items()},
        "n_classes": len(cents),
        "n_users": int(len(np.unique(batch.users))),
    }
    return RewardBreakdown(rc, ri, w_cls * rc + w_inv * ri, w_cls, w_inv, diag)
