"""Class-incremental metrics and classifier alignment from feature statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NumericalFailure, StateError
from .model import OptimizerState, cross_entropy, features, forward, step_params

JITTER = 1e-6


class AccuracyMatrix:
    """Lower-triangular ``a[i, j]``: accuracy on task ``j`` after learning task ``i`` (0-based)."""

    def __init__(self, n_tasks):
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for i, row in enumerate(rows):
            m.set_row(i, row)
        return m

    @property
    def n_tasks(self):
        return self.values.shape[0]

    def set_row(self, i, row):
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (i + 1,):
            raise InvalidInput(f"row {i} must have {i + 1} entries, got {row.shape}")
        if np.any((row < 0.0) | (row > 1.0)):
            raise InvalidInput("accuracies must lie in [0, 1]")
        self.values[i, : i + 1] = row

    def row(self, i):
        return self.values[i, : i + 1].copy()

    def is_complete(self):
        return not np.isnan(self.values[np.tril_indices(self.n_tasks)]).any()


def predict(net, x):
    """Argmax over every classifier output; ties go to the lowest class id."""
    logits, _ = forward(net, x)
    return np.argmax(logits, axis=0)


def evaluate(net, seq, i):
    """Accuracies on the test splits of tasks ``0..i`` (0-based)."""
    if not 0 <= i < len(seq.tasks):
        raise InvalidInput(f"task index {i} outside 0..{len(seq.tasks) - 1}")
    return np.array([float(np.mean(predict(net, task.test_x) == task.test_y)) for task in seq.tasks[: i + 1]])


def acc_metrics(m):
    """Per-step accuracy ``ACC_i`` (row means) and their average."""
    if not m.is_complete():
        raise StateError("accuracy matrix is incomplete")
    acc = np.array([np.mean(m.row(i)) for i in range(m.n_tasks)])
    return acc, float(np.mean(acc))


def param_count(dims, r, adapted):
    """Expanded adapter parameters: one live branch per adapted layer.

    ``dims`` is a list of (d_in, d_out) per backbone layer; ``adapted`` the
    indices that carry branches.
    """
    return sum((dims[i][0] + dims[i][1]) * r for i in adapted)


@dataclass
class ClassStats:
    means: dict
    covs: dict
    counts: dict

    @property
    def classes(self):
        return sorted(self.means)

    def merge(self, other):
        return ClassStats({**self.means, **other.means}, {**self.covs, **other.covs}, {**self.counts, **other.counts})


def empty_stats():
    return ClassStats({}, {}, {})


def stats_from_features(feats, labels):
    """Per-class mean and unbiased covariance of ``feats`` (``d x n``), plus jitter."""
    labels = np.asarray(labels)
    means, covs, counts = {}, {}, {}
    for c in np.unique(labels):
        f = feats[:, labels == c]
        n = f.shape[1]
        if n < 2:
            raise InvalidInput(f"class {int(c)} has {n} sample(s); covariance needs 2")
        mu = f.mean(axis=1)
        centered = f - mu[:, None]
        cov = centered @ centered.T / (n - 1)
        cov = 0.5 * (cov + cov.T) + JITTER * np.eye(f.shape[0])
        means[int(c)] = mu
        covs[int(c)] = cov
        counts[int(c)] = n
    return ClassStats(means, covs, counts)


def collect_stats(net, x, y):
    return stats_from_features(features(net, x), y)


def align_classifier(net, stats, samples=64, epochs=10, seed=0, lr=0.01, batch_size=128):
    """Retrain the head on Gaussian features drawn from ``stats``; the backbone is untouched."""
    classes = stats.classes
    if not classes:
        raise InvalidInput("no class statistics")
    hi = classes[-1] + 1
    if hi > net.head.n_classes:
        raise InvalidInput("statistics cover classes beyond the classifier width")
    rng = np.random.default_rng([seed, hi])
    d = net.d_feat
    chunks, labels = [], []
    for c in classes:
        try:
            chol = np.linalg.cholesky(stats.covs[c])
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"covariance of class {c} is not positive definite") from exc
        z = stats.means[c][:, None] + chol @ rng.standard_normal((d, samples))
        chunks.append(z)
        labels.append(np.full(samples, c))
    feats = np.concatenate(chunks, axis=1)
    labels = np.concatenate(labels)

    head = net.head
    params = {"head.w": head.w, "head.bias": head.bias}
    opt = OptimizerState(kind="sgd", lr=lr)
    n = labels.size
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            logits = head.w @ feats[:, idx] + head.bias[:, None]
            _, g = cross_entropy(logits, labels[idx], 0, hi)
            step_params(params, {"head.w": g @ feats[:, idx].T, "head.bias": g.sum(axis=1)}, opt)
    return head
