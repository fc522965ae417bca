"""Dual gradient projection memory, one instance per adapted layer.

A memory stores an orthonormal basis of either the old-task gradient space
(``GRAD``) or its orthogonal complement (``COMPLEMENT``), whichever is smaller.
All operations return a new memory; the input is never modified.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import InvalidInput, StateError
from .linalg import RANK_RTOL, as_matrix, orthonormal_complement, svd


class MemoryMode(Enum):
    GRAD = "grad"
    COMPLEMENT = "complement"


class ReductionRule(Enum):
    RESIDUAL = "residual"
    AS_WRITTEN = "as_written"


@dataclass(frozen=True)
class GradientMemory:
    dim_ambient: int
    mode: MemoryMode = MemoryMode.GRAD
    basis: np.ndarray = None

    def __post_init__(self):
        if self.basis is None:
            object.__setattr__(self, "basis", np.zeros((self.dim_ambient, 0)))
        if self.basis.shape[0] != self.dim_ambient:
            raise InvalidInput(f"basis has {self.basis.shape[0]} rows, ambient dim is {self.dim_ambient}")

    @classmethod
    def empty(cls, dim):
        return cls(dim_ambient=int(dim))

    @property
    def size(self):
        """Number of stored basis vectors."""
        return self.basis.shape[1]

    @property
    def dim_grad(self):
        return self.size if self.mode is MemoryMode.GRAD else self.dim_ambient - self.size

    @property
    def dim_complement(self):
        return self.dim_ambient - self.dim_grad

    def grad_basis(self):
        """Basis of the old-task gradient space, whichever side is stored."""
        if self.mode is MemoryMode.GRAD:
            return self.basis
        return orthonormal_complement(self.basis)

    def complement_basis(self):
        if self.mode is MemoryMode.COMPLEMENT:
            return self.basis
        return orthonormal_complement(self.basis)


@dataclass(frozen=True)
class EpsilonSchedule:
    base: float
    total_tasks: int

    def __post_init__(self):
        if not 0.0 < self.base <= 1.0:
            raise InvalidInput(f"epsilon must lie in (0, 1], got {self.base}")
        if self.total_tasks < 1:
            raise InvalidInput("total_tasks must be >= 1")


def epsilon_schedule(sched, t):
    """Threshold for task ``t`` (1-based), rising linearly from ``base`` to 1."""
    if not 1 <= t <= sched.total_tasks:
        raise InvalidInput(f"task index {t} outside 1..{sched.total_tasks}")
    # Clamp: the linear form can round one ulp above 1 at the last task.
    return min(1.0, sched.base + (1.0 - sched.base) * t / sched.total_tasks)


def _significant(s, ref_norm, shape):
    # Directions below the rank tolerance of the *unprojected* input are rounding noise.
    cut = RANK_RTOL * max(shape) * ref_norm
    return int(np.count_nonzero(s > cut))


def expand_memory(mem, r_inputs, eps_th):
    """Append the fewest new directions so the memory captures ``eps_th`` of the input energy."""
    if mem.mode is not MemoryMode.GRAD:
        raise StateError("expand_memory needs a memory in GRAD mode; use reduce_complement")
    h = as_matrix(r_inputs, "r_inputs")
    if h.shape[0] != mem.dim_ambient:
        raise InvalidInput(f"inputs have {h.shape[0]} rows, memory dim is {mem.dim_ambient}")
    total = float(np.sum(h * h))
    if total == 0.0 or h.shape[1] == 0:
        return mem
    m = mem.basis
    h_proj = m @ (m.T @ h) if mem.size else np.zeros_like(h)
    h_hat = h - h_proj
    captured = float(np.sum(h_proj * h_proj))
    target = eps_th * total
    if captured >= target:
        return mem
    res = svd(h_hat)
    usable = min(_significant(res.s, np.sqrt(total), h.shape), mem.dim_ambient - mem.size)
    energy = np.cumsum(res.s[:usable] ** 2)
    hits = np.flatnonzero(captured + energy >= target)
    u = int(hits[0]) + 1 if hits.size else usable
    if u == 0:
        return mem
    new = res.u[:, :u]
    if mem.size:
        new = new - m @ (m.T @ new)
        new = new / np.linalg.norm(new, axis=0)
    return replace(mem, basis=np.column_stack([m, new]))


def maybe_switch(mem):
    """Store the complement instead once the gradient space is the larger side."""
    if mem.mode is MemoryMode.GRAD and mem.size > mem.dim_ambient - mem.size:
        return replace(mem, mode=MemoryMode.COMPLEMENT, basis=orthonormal_complement(mem.basis))
    return mem


def removal_count(energies, total, eps_th, rule=ReductionRule.RESIDUAL):
    """How many leading principal directions to remove from the complement.

    ``energies`` are squared singular values of the projected inputs, descending.
    RESIDUAL: fewest k leaving at most ``(1 - eps_th) * total`` energy behind.
    AS_WRITTEN: largest k whose removed energy stays within that budget.
    """
    budget = (1.0 - eps_th) * total
    rule = ReductionRule(rule)
    kept = np.cumsum(energies)
    if rule is ReductionRule.AS_WRITTEN:
        return int(np.count_nonzero(kept <= budget))
    remaining = float(np.sum(energies)) - np.concatenate([[0.0], kept])
    return int(np.flatnonzero(remaining <= budget)[0]) if np.any(remaining <= budget) else len(energies)


def reduce_complement(mem, r_inputs, eps_th, rule=ReductionRule.RESIDUAL):
    """Remove from the stored complement the directions that carry the new task's inputs."""
    if mem.mode is not MemoryMode.COMPLEMENT:
        raise StateError("reduce_complement needs a memory in COMPLEMENT mode")
    r = as_matrix(r_inputs, "r_inputs")
    if r.shape[0] != mem.dim_ambient:
        raise InvalidInput(f"inputs have {r.shape[0]} rows, memory dim is {mem.dim_ambient}")
    total = float(np.sum(r * r))
    if mem.size == 0 or total == 0.0 or r.shape[1] == 0:
        return mem
    mp = mem.basis
    r_hat = mp @ (mp.T @ r)
    if not np.any(r_hat):
        return mem
    res = svd(r_hat)
    usable = min(_significant(res.s, np.sqrt(total), r.shape), mem.size)
    k = removal_count(res.s[:usable] ** 2, total, eps_th, rule)
    if k == 0:
        return mem
    z = res.u[:, :k]
    m_hat = mp - z @ (z.T @ mp)
    res2 = svd(m_hat)
    keep = min(res2.rank, mem.size - k)
    return replace(mem, basis=res2.u[:, :keep].copy())


def update_memory(mem, r_inputs, eps_th, rule=ReductionRule.RESIDUAL):
    """Post-task update: expand or reduce depending on mode, then maybe switch."""
    if mem.mode is MemoryMode.GRAD:
        mem = expand_memory(mem, r_inputs, eps_th)
    else:
        mem = reduce_complement(mem, r_inputs, eps_th, rule)
    return maybe_switch(mem)
