"""Synthetic class-incremental task sequences and CSV ingestion.

Randomness comes from numpy's PCG64 generator seeded through
``SeedSequence(seed).spawn``; see docs/FORMATS.md for the exact stream layout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput, IoError, ParseError

GENERATORS = ("gaussian_blobs", "rotated_blobs", "permuted_features")


@dataclass(frozen=True)
class TaskSpec:
    n_tasks: int = 5
    classes_per_task: int = 4
    n_train: int = 500
    n_test: int = 200
    d_in: int = 32
    generator: str = "gaussian_blobs"
    radius: float = 4.0
    noise: float = 1.0
    base_classes: int = 10
    base_n: int = 200
    seed: int = 0

    def __post_init__(self):
        for f in ("n_tasks", "classes_per_task", "n_train", "n_test", "d_in", "base_classes", "base_n"):
            if getattr(self, f) < 1:
                raise InvalidInput(f"{f} must be positive, got {getattr(self, f)}")
        if self.generator not in GENERATORS:
            raise InvalidInput(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.radius < 0 or self.noise < 0:
            raise InvalidInput("radius and noise must be non-negative")

    @property
    def n_classes(self):
        return self.n_tasks * self.classes_per_task


@dataclass
class Task:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: range


@dataclass
class TaskSequence:
    tasks: list
    base_x: np.ndarray
    base_y: np.ndarray
    n_base_classes: int

    @property
    def n_classes(self):
        return self.tasks[-1].classes.stop

    def __len__(self):
        return len(self.tasks)


def _sphere(rng, k, d, radius):
    g = rng.standard_normal((d, k))
    norms = np.linalg.norm(g, axis=0)
    norms[norms == 0.0] = 1.0
    return radius * g / norms


def _rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def _sample(rng, means, n_per_class, noise, first_label):
    d, k = means.shape
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[:, labels] + noise * rng.standard_normal((d, labels.size))
    return x, labels + first_label


def gen_task_sequence(spec):
    """Deterministic task sequence plus a disjoint base dataset for pre-training."""
    streams = np.random.SeedSequence(spec.seed).spawn(2 + spec.n_tasks)
    structure = np.random.Generator(np.random.PCG64(streams[0]))
    base_rng = np.random.Generator(np.random.PCG64(streams[1]))
    d, c = spec.d_in, spec.classes_per_task

    if spec.generator == "gaussian_blobs":
        all_means = _sphere(structure, spec.n_classes, d, spec.radius)
        task_means = [all_means[:, t * c : (t + 1) * c] for t in range(spec.n_tasks)]
    else:
        shared = _sphere(structure, c, d, spec.radius)
        task_means = []
        for _ in range(spec.n_tasks):
            if spec.generator == "rotated_blobs":
                task_means.append(_rotation(structure, d) @ shared)
            else:
                task_means.append(shared[structure.permutation(d)])

    tasks = []
    for t in range(spec.n_tasks):
        rng = np.random.Generator(np.random.PCG64(streams[2 + t]))
        lo = t * c
        train_x, train_y = _sample(rng, task_means[t], spec.n_train, spec.noise, lo)
        test_x, test_y = _sample(rng, task_means[t], spec.n_test, spec.noise, lo)
        tasks.append(Task(train_x, train_y, test_x, test_y, range(lo, lo + c)))

    base_means = _sphere(base_rng, spec.base_classes, d, spec.radius)
    base_x, base_y = _sample(base_rng, base_means, spec.base_n, spec.noise, 0)
    return TaskSequence(tasks=tasks, base_x=base_x, base_y=base_y, n_base_classes=spec.base_classes)


def load_csv(path, feature_columns, label_column):
    """Read a headed CSV into (features ``d x n``, integer labels)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if not header:
        raise InvalidInput(f"{path} is empty")
    header = [h.strip() for h in header]
    missing = [c for c in [*feature_columns, label_column] if c not in header]
    if missing:
        raise InvalidInput(f"columns not in header: {missing}")
    fidx = [header.index(c) for c in feature_columns]
    lidx = header.index(label_column)

    feats, labels, bad = [], [], []
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        try:
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} cells, got {len(row)}", row=row_no, col=None)
            vals = []
            for name, j in zip(feature_columns, fidx):
                try:
                    val = float(row[j])
                    if not math.isfinite(val):
                        raise ValueError
                    vals.append(val)
                except ValueError:
                    raise ParseError(f"row {row_no}, column {name!r}: not a number: {row[j]!r}", row=row_no, col=name)
            try:
                label = int(row[lidx])
            except ValueError:
                raise ParseError(
                    f"row {row_no}, column {label_column!r}: not an integer: {row[lidx]!r}", row=row_no, col=label_column
                )
        except ParseError as err:
            bad.append(err)
            continue
        feats.append(vals)
        labels.append(label)
    if bad:
        first = bad[0]
        rows = ", ".join(str(e.row) for e in bad)
        raise ParseError(f"{len(bad)} malformed row(s) [{rows}]; first: {first}", row=first.row, col=first.col)
    if not feats:
        raise InvalidInput(f"{path} has no data rows")
    return np.asarray(feats, dtype=np.float64).T.copy(), np.asarray(labels, dtype=np.int64)
