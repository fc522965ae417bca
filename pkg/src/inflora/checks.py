"""Invariant suite run by ``inflora check``.

Every check is deterministic (fixed seeds) and reports the observed worst case
next to its tolerance. ``fault="skip-projection"`` builds every ``B_t`` from
the raw task inputs, as if the projection against the memory were missing;
the branch/full-weight equivalence still holds for such a ``B_t`` while the
orthogonality to old tasks does not.
"""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gpmem
from .checkpoint import load_checkpoint, save_checkpoint
from .continual import DesignVariant, Learner, TaskTrainConfig, design_B, proposition1_check, train_task
from .data import TaskSpec, gen_task_sequence
from .gpmem import GradientMemory, MemoryMode
from .linalg import orthonormality_error, svd
from .metrics import AccuracyMatrix, acc_metrics, collect_stats, param_count
from .model import Mode, backward, build_network, forward, local_ce_loss

FAULTS = ("skip-projection",)


@dataclass
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} observed {self.observed:.3e}  tolerance {self.tolerance:.1e}"


def _le(name, observed, tol):
    return CheckResult(name, tol, float(observed), bool(observed <= tol))


def _random_net(rng, d_in=None):
    d_in = d_in or int(rng.integers(3, 9))
    hidden = [int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3)))]
    net = build_network(d_in, hidden, int(rng.integers(2, 6)), rng)
    for layer in net.layers:
        layer.bias = rng.standard_normal(layer.d_out) * 0.1
    net.head.w = rng.standard_normal(net.head.w.shape)
    net.head.bias = rng.standard_normal(net.head.n_classes) * 0.1
    return net


def check_branch_equivalence(trials=100, seed=11, fault=None):
    """Max relative gap between the branch step and the projected full-weight step."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        net = _random_net(rng)
        n_classes = net.head.n_classes
        x = rng.standard_normal((net.layers[0].d_in, int(rng.integers(2, 12))))
        y = rng.integers(0, n_classes, x.shape[1])
        _, cache = forward(net, x)
        for i, layer in enumerate(net.layers):
            d = layer.d_in
            k = int(rng.integers(0, d))
            mem = GradientMemory(d, MemoryMode.GRAD, svd(rng.standard_normal((d, k))).u if k else None)
            variant = DesignVariant.NT_ONLY if fault else DesignVariant.INFLORA
            r = int(rng.integers(1, d + 1))
            layer.expand_branch(design_B(cache.inputs[i], mem, r, variant))
            layer.branch_a = rng.standard_normal(layer.branch_a.shape)
        for i in range(len(net.layers)):
            gap = proposition1_check(net, i, x, y, range(0, n_classes), alpha=float(rng.uniform(0.01, 1.0)))
            worst = max(worst, gap)
    return _le("branch/full-weight equivalence", worst, 1e-10)


def check_gradient_span(trials=50, seed=12):
    """Rows of each full-weight gradient lie in the span of the layer's batch inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        net = _random_net(rng)
        x = rng.standard_normal((net.layers[0].d_in, int(rng.integers(1, 5))))
        y = rng.integers(0, net.head.n_classes, x.shape[1])
        logits, cache = forward(net, x)
        _, g = local_ce_loss(logits, y, range(0, net.head.n_classes))
        probe = backward(net, cache, g, Mode.FULL_WEIGHT_PROBE, strict=False).probe
        for i in range(len(net.layers)):
            dw = probe[f"layers.{i}.w"]
            res = svd(cache.inputs[i])
            q = res.u[:, : res.rank]
            resid = dw - dw @ q @ q.T
            scale = max(np.linalg.norm(dw), 1e-300)
            worst = max(worst, float(np.linalg.norm(resid) / scale))
    return _le("gradient rows in input span", worst, 1e-8)


def small_benchmark(seed=3):
    return TaskSpec(n_tasks=4, classes_per_task=3, n_train=60, n_test=20, d_in=10, base_classes=4, base_n=30, seed=seed)


def old_task_orthogonality(learner):
    """Worst ``|dW_t M_t| / (|dW_t| |M_t|)`` over adapted layers and tasks ``t > 1``."""
    worst = 0.0
    for report in learner.reports[1:]:
        for i, delta in report.increments.items():
            m = report.memories_before[i].grad_basis()
            if m.shape[1] == 0:
                continue
            denom = np.linalg.norm(delta) * np.linalg.norm(m)
            if denom == 0.0:
                continue
            worst = max(worst, float(np.linalg.norm(delta @ m) / denom))
    return worst


def check_orthogonality(seed=13, fault=None):
    spec = small_benchmark(seed)
    seq = gen_task_sequence(spec)
    rng = np.random.default_rng(seed)
    net = build_network(spec.d_in, [12, 12], seq.n_classes, rng)
    cfg = TaskTrainConfig(rank=2, epochs=3, batch_size=32, lr=0.05, epsilon=0.5, seed=seed)
    learner = Learner(net=net, cfg=cfg, n_tasks=len(seq))
    if fault:
        # Memories keep updating as usual; only the projection inside the design is skipped.
        learner.design = lambda h, mem, r, variant, rng, raw: design_B(h, mem, r, DesignVariant.NT_ONLY, rng, raw)
    for t, task in enumerate(seq.tasks, start=1):
        train_task(learner, task, t)
    return _le("old-task orthogonality", old_task_orthogonality(learner), 1e-6)


def check_memory_structure(seed=14, runs=6, tasks=8):
    """Orthonormality, monotone dimensions and the switch rule over random updates."""
    rng = np.random.default_rng(seed)
    worst_ortho = 0.0
    violations = 0
    for _ in range(runs):
        d = int(rng.integers(3, 10))
        mem = GradientMemory.empty(d)
        sched = gpmem.EpsilonSchedule(float(rng.uniform(0.5, 1.0)), tasks)
        for t in range(1, tasks + 1):
            k = int(rng.integers(1, 4))
            inputs = rng.standard_normal((d, k)) @ rng.standard_normal((k, 6))
            new = gpmem.update_memory(mem, inputs, gpmem.epsilon_schedule(sched, t))
            if new.size:
                worst_ortho = max(worst_ortho, orthonormality_error(new.basis))
            if new.dim_grad < mem.dim_grad or new.dim_complement > mem.dim_complement:
                violations += 1
            # Grad space is stored only while it is not the larger side; once
            # switched, the complement stays stored.
            if new.mode is MemoryMode.GRAD and new.dim_grad > new.dim_complement:
                violations += 1
            if mem.mode is MemoryMode.GRAD and new.mode is MemoryMode.COMPLEMENT and new.dim_grad <= new.dim_complement:
                violations += 1
            if mem.mode is MemoryMode.COMPLEMENT and new.mode is not MemoryMode.COMPLEMENT:
                violations += 1
            mem = new
    observed = worst_ortho if violations == 0 else float("inf")
    return _le("memory structure", observed, 1e-8)


def check_svd_oracle(trials=200, seed=15):
    """Singular values against eigenvalues of ``A^T A`` on generic matrices, plus
    squared values on rank-one ones (square roots of rounding-level eigenvalues
    are not a usable reference there).
    """
    rng = np.random.default_rng(seed)
    worst_s = worst_sq = worst_rec = 0.0
    for _ in range(trials):
        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a = rng.standard_normal((m, n))
        res = svd(a)
        eig = np.linalg.eigvalsh(a.T @ a)[::-1][: res.s.size]
        worst_s = max(worst_s, float(np.max(np.abs(res.s - np.sqrt(np.clip(eig, 0.0, None))))))
        worst_rec = max(worst_rec, float(np.linalg.norm(res.reconstruct() - a)))
        low = np.outer(rng.standard_normal(m), rng.standard_normal(n))
        res = svd(low)
        eig = np.linalg.eigvalsh(low.T @ low)[::-1][: res.s.size]
        worst_sq = max(worst_sq, float(np.max(np.abs(res.s**2 - eig)) / max(1.0, eig[0])))
        worst_rec = max(worst_rec, float(np.linalg.norm(res.reconstruct() - low)))
    return [
        _le("svd vs eigenvalues", worst_s, 1e-8),
        _le("svd vs eigenvalues (rank one)", worst_sq, 1e-8),
        _le("svd reconstruction", worst_rec, 1e-10),
    ]


def check_zero_init_merge(trials=20, seed=16):
    rng = np.random.default_rng(seed)
    worst_init = worst_merge = 0.0
    count_ok = True
    for _ in range(trials):
        net = _random_net(rng)
        x = rng.standard_normal((net.layers[0].d_in, 7))
        before, _ = forward(net, x)
        r = int(rng.integers(1, 4))
        for layer in net.layers:
            b = svd(rng.standard_normal((layer.d_in, min(r, layer.d_in)))).u.T
            layer.expand_branch(b)
        after, _ = forward(net, x)
        worst_init = max(worst_init, float(np.max(np.abs(after - before))))
        for layer in net.layers:
            layer.branch_a = rng.standard_normal(layer.branch_a.shape)
        branched, _ = forward(net, x)
        expected = sum((l.d_in + l.d_out) * l.rank for l in net.layers)
        if sum(l.trainable_count() for l in net.layers) != expected:
            count_ok = False
        if all(l.rank == r for l in net.layers):
            dims = [(l.d_in, l.d_out) for l in net.layers]
            count_ok &= param_count(dims, r, net.adapted_indices()) == expected
        for layer in net.layers:
            layer.merge_branch()
        merged, _ = forward(net, x)
        worst_merge = max(worst_merge, float(np.max(np.abs(branched - merged))))
    return [
        _le("zero-init forward unchanged", worst_init, 1e-12),
        _le("branched vs merged forward", worst_merge, 1e-10),
        CheckResult("expanded parameter count", 0.0, 0.0 if count_ok else 1.0, count_ok),
    ]


def check_metrics():
    acc, avg = acc_metrics(AccuracyMatrix.from_rows([[0.9], [0.8, 0.7]]))
    err = max(abs(acc[0] - 0.9), abs(acc[1] - 0.75), abs(avg - 0.825))
    return _le("accuracy metrics arithmetic", err, 0.0)


def check_checkpoint(seed=17):
    rng = np.random.default_rng(seed)
    net = _random_net(rng, d_in=6)
    mems = {0: GradientMemory(6, MemoryMode.COMPLEMENT, svd(rng.standard_normal((6, 2))).u)}
    stats = collect_stats(net, rng.standard_normal((6, 12)), np.repeat([0, 1], 6))
    probes = rng.standard_normal((6, 10))
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(p1, net, mems, stats)
        net2, mems2, stats2 = load_checkpoint(p1)
        save_checkpoint(p2, net2, mems2, stats2)
        same_bytes = p1.read_bytes() == p2.read_bytes()
    same_fwd = np.array_equal(forward(net, probes)[0], forward(net2, probes)[0])
    ok = same_bytes and same_fwd and np.array_equal(mems2[0].basis, mems[0].basis)
    return CheckResult("checkpoint round-trip", 0.0, 0.0 if ok else 1.0, ok)


def check_suite(fault=None, out=print):
    """Run every check; returns the list of results. Failures are reported, never raised."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    checks = [
        lambda: check_branch_equivalence(fault=fault),
        check_gradient_span,
        lambda: check_orthogonality(fault=fault),
        check_memory_structure,
        check_svd_oracle,
        check_zero_init_merge,
        check_metrics,
        check_checkpoint,
    ]
    results = []
    logger = logging.getLogger("inflora")
    previous = logger.level
    logger.setLevel(logging.ERROR)
    try:
        for fn in checks:
            start = time.perf_counter()
            try:
                got = fn()
            except Exception as exc:  # reported, not raised
                name = getattr(fn, "__name__", "check")
                got = CheckResult(f"{name} raised {type(exc).__name__}: {exc}", 0.0, float("inf"), False)
            got = got if isinstance(got, list) else [got]
            for r in got:
                r.seconds = time.perf_counter() - start
                results.append(r)
                if out is not None:
                    out(r.line())
    finally:
        logger.setLevel(previous)
    return results
