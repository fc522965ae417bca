"""Per-task low-rank adaptation that leaves old-task input directions untouched.

Before task ``t`` every adapted layer gets a branch whose frozen down-projection
``B_t`` spans the principal directions of the task's layer inputs after removing
everything the gradient memory attributes to earlier tasks. Only ``A_t`` (zero
at start) and the classifier head are trained; afterwards the branch is merged
into the layer weight and the memory absorbs the task's input space.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import gpmem
from .errors import DegenerateSubspace, InvalidInput, StateError
from .gpmem import EpsilonSchedule, GradientMemory, MemoryMode, ReductionRule
from .linalg import RANK_RTOL, as_matrix, orthonormalize_rows, project_in, project_out, svd
from .model import Mode, OptimizerState, apply_gradients, backward, cross_entropy, forward, local_ce_loss

log = logging.getLogger(__name__)


class DesignVariant(Enum):
    INFLORA = "inflora"
    NT_ONLY = "nt_only"
    MPERP_ONLY = "mperp_only"
    RANDOM_B = "random_b"
    SEQ_LORA = "seq_lora"


# Random streams derived from (seed, task, purpose).
_SAMPLE, _DESIGN, _SHUFFLE = 0, 1, 2


@dataclass(frozen=True)
class TaskTrainConfig:
    rank: int = 16
    epochs: int = 20
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 0.03
    epsilon: float = 0.7
    variant: DesignVariant = DesignVariant.INFLORA
    seed: int = 0
    sample_size: int = 512
    reduction_rule: ReductionRule = ReductionRule.RESIDUAL
    raw_random_b: bool = False
    loss: str = "local"

    def __post_init__(self):
        object.__setattr__(self, "variant", DesignVariant(self.variant))
        object.__setattr__(self, "reduction_rule", ReductionRule(self.reduction_rule))
        if self.rank < 1:
            raise InvalidInput("rank must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.sample_size < 1:
            raise InvalidInput("epochs, batch_size and sample_size must be >= 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidInput("epsilon must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("local", "global"):
            raise InvalidInput(f"unknown loss {self.loss!r}")


def _rng(seed, t, purpose, layer=0):
    return np.random.default_rng([seed, t, purpose, layer])


def collect_inputs(net, layer, x):
    """Inputs reaching ``layer`` for each column of ``x`` (``d_I x n``)."""
    x = as_matrix(x, "x")
    if x.shape[1] == 0:
        raise InvalidInput("empty sample")
    if not 0 <= layer < len(net.layers):
        raise InvalidInput(f"no layer {layer}")
    _, cache = forward(net, x)
    return cache.inputs[layer].copy()


def _gaussian_b(rng, r, d, raw):
    g = rng.standard_normal((min(r, d), d))
    return g if raw else orthonormalize_rows(g)


def design_B(h, mem, r, variant=DesignVariant.INFLORA, rng=None, raw=False):
    """Down-projection ``B`` (``r_eff x d_I``) for the next task.

    ``h`` holds the new task's layer inputs as columns; RANDOM_B, SEQ_LORA and
    MPERP_ONLY only use its shape. ``r_eff`` is ``r`` capped by the numerical
    rank of the projected inputs.
    """
    variant = DesignVariant(variant)
    if r < 1:
        raise InvalidInput("rank must be >= 1")
    d = mem.dim_ambient
    if variant in (DesignVariant.RANDOM_B, DesignVariant.SEQ_LORA):
        return _gaussian_b(rng, r, d, raw)

    h = as_matrix(h, "h")
    if h.shape[0] != d:
        raise InvalidInput(f"inputs have {h.shape[0]} rows, memory dim is {d}")
    if variant is DesignVariant.MPERP_ONLY:
        h = rng.standard_normal(h.shape)
    if variant is DesignVariant.NT_ONLY:
        h_hat = h
    elif mem.mode is MemoryMode.GRAD:
        h_hat = project_out(mem.basis, h)
    else:
        h_hat = project_in(mem.basis, h)

    if not np.any(h_hat):
        raise DegenerateSubspace("projected inputs are zero")
    res = svd(h_hat.T)
    # Rank is judged against the unprojected inputs so rounding left over by
    # the projection never counts as a learning direction.
    cut = max(res.tol, RANK_RTOL * max(h.shape) * float(np.linalg.norm(h)))
    rank = int(np.count_nonzero(res.s > cut))
    if rank == 0:
        raise DegenerateSubspace("no learning directions remain")
    return res.vt[: min(r, rank)].copy()


@dataclass
class TaskReport:
    task: int
    losses: list = field(default_factory=list)
    ranks: dict = field(default_factory=dict)
    degenerate: list = field(default_factory=list)
    trainable_params: int = 0
    adapter_params: int = 0
    b: dict = field(default_factory=dict)
    increments: dict = field(default_factory=dict)
    memories_before: dict = field(default_factory=dict)
    memory_dims: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class Learner:
    """Mutable state of one continual run: network, memories and variant caches."""

    net: object
    cfg: TaskTrainConfig
    n_tasks: int
    memories: dict = field(default_factory=dict)
    seq_b: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    # Hook for fault injection in the invariant suite.
    design: object = None

    def __post_init__(self):
        if self.design is None:
            self.design = design_B
        if not self.memories:
            self.memories = {i: GradientMemory.empty(self.net.layers[i].d_in) for i in self.net.adapted_indices()}

    @property
    def schedule(self):
        return EpsilonSchedule(self.cfg.epsilon, self.n_tasks)


def _sample_indices(n, size, seed, t):
    if n <= size:
        return np.arange(n)
    return np.sort(_rng(seed, t, _SAMPLE).choice(n, size=size, replace=False))


def _design_branches(learner, t, x_sample, report):
    cfg, net = learner.cfg, learner.net
    _, cache = forward(net, x_sample)
    for i in net.adapted_indices():
        mem = learner.memories.get(i, GradientMemory.empty(net.layers[i].d_in))
        report.memories_before[i] = mem
        rng = _rng(cfg.seed, t, _DESIGN, i)
        raw = cfg.raw_random_b
        if cfg.variant is DesignVariant.SEQ_LORA:
            if i not in learner.seq_b:
                learner.seq_b[i] = learner.design(None, mem, cfg.rank, cfg.variant, rng, raw)
            b = learner.seq_b[i]
        else:
            try:
                b = learner.design(cache.inputs[i], mem, cfg.rank, cfg.variant, rng, raw)
            except DegenerateSubspace:
                log.warning("task %d layer %d: no learning directions left, training head only", t, i)
                report.degenerate.append(i)
                continue
        net.layers[i].expand_branch(b, require_orthonormal=not raw)
        report.b[i] = b
        report.ranks[i] = b.shape[0]


def train_task(learner, task, t):
    """Design, expand, train, merge, then update the memories for task ``t`` (1-based)."""
    cfg, net = learner.cfg, learner.net
    if any(l.has_branch for l in net.layers):
        raise StateError("previous task left an unmerged branch")
    if task.classes.stop > net.head.n_classes:
        raise InvalidInput("task classes exceed the classifier width")
    y = np.asarray(task.train_y)
    if np.any((y < task.classes.start) | (y >= task.classes.stop)):
        raise InvalidInput("training labels outside the task's class range")
    start = time.perf_counter()
    report = TaskReport(task=t)

    idx = _sample_indices(task.train_x.shape[1], cfg.sample_size, cfg.seed, t)
    x_sample = task.train_x[:, idx]
    _design_branches(learner, t, x_sample, report)
    report.adapter_params = sum(l.trainable_count() for l in net.layers)
    report.trainable_params = net.trainable_count()

    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    shuffle = _rng(cfg.seed, t, _SHUFFLE)
    n = task.train_x.shape[1]
    for _ in range(cfg.epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = perm[s : s + cfg.batch_size]
            logits, cache = forward(net, task.train_x[:, batch])
            if cfg.loss == "local":
                loss, g = local_ce_loss(logits, y[batch], task.classes)
            else:
                loss, g = cross_entropy(logits, y[batch], 0, task.classes.stop)
            total += loss * batch.size
            apply_gradients(net, backward(net, cache, g, Mode.BRANCH_ONLY, strict=False), opt)
        report.losses.append(total / n)

    for i, layer in enumerate(net.layers):
        if layer.has_branch:
            report.increments[i] = layer.merge_branch()

    if cfg.variant is not DesignVariant.SEQ_LORA:
        eps_th = gpmem.epsilon_schedule(learner.schedule, t)
        _, cache = forward(net, x_sample)
        for i in net.adapted_indices():
            mem = learner.memories[i]
            learner.memories[i] = gpmem.update_memory(mem, cache.inputs[i], eps_th, cfg.reduction_rule)
    report.memory_dims = {i: m.dim_grad for i, m in learner.memories.items()}
    report.seconds = time.perf_counter() - start
    learner.reports.append(report)
    return report


def proposition1_check(net, layer, x, y, task_classes, alpha):
    """Relative gap between the composed-weight change from one SGD step on ``A``
    and the full-weight step projected by ``B^T B``.
    """
    target = net.layers[layer]
    if not target.has_branch:
        raise StateError(f"layer {layer} has no branch")
    logits, cache = forward(net, x)
    _, g = local_ce_loss(logits, y, task_classes)

    trial = net.copy()
    a_before = trial.layers[layer].branch_a.copy()
    grads = backward(trial, cache, g, Mode.BRANCH_ONLY, strict=False)
    apply_gradients(trial, grads, OptimizerState(kind="sgd", lr=alpha))
    delta_branch = (trial.layers[layer].branch_a - a_before) @ target.branch_b

    probe = backward(net, cache, g, Mode.FULL_WEIGHT_PROBE, strict=False).probe[f"layers.{layer}.w"]
    b = target.branch_b
    delta_full = (-alpha * probe) @ b.T @ b
    ref = np.linalg.norm(delta_full)
    gap = np.linalg.norm(delta_branch - delta_full)
    if ref == 0.0:
        return 0.0 if gap == 0.0 else float("inf")
    return float(gap / ref)
