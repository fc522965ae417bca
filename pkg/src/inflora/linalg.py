"""Dense linear algebra on float64 numpy arrays.

The SVD is a one-sided Jacobi method; its inner loop lives in
``_kernels`` and is compiled with numba unless ``INFLORA_DISABLE_JIT`` is set.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInput, NumericalFailure, ShapeError

MAX_SWEEPS = 100
RANK_RTOL = 1e-10
ORTHO_TOL = 1e-8


def as_matrix(a, name="matrix"):
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    shape: tuple
    sweeps: int = 0

    @property
    def tol(self):
        """Threshold below which a singular value counts as zero."""
        if self.s.size == 0:
            return 0.0
        return RANK_RTOL * max(self.shape) * float(self.s[0])

    @property
    def rank(self):
        if self.s.size == 0 or self.s[0] == 0.0:
            return 0
        return int(np.count_nonzero(self.s > self.tol))

    def reconstruct(self):
        k = self.s.size
        return (self.u[:, :k] * self.s) @ self.vt[:k]


def _fix_signs(u, vt, k):
    # Largest-magnitude entry of each right vector is made non-negative.
    for i in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[i])))
        if vt[i, j] < 0.0:
            vt[i] = -vt[i]
            if i < k:
                u[:, i] = -u[:, i]


def _svd_tall(work, full, max_sweeps, use_numba):
    big, small = work.shape
    at = np.array(work.T, order="C")
    vt = np.eye(small)
    norm = float(np.linalg.norm(work))
    # Columns at or below this norm are numerically zero relative to the matrix.
    negligible = big * _kernels.EPS * norm
    sweeps = 0
    if norm > 0.0:
        tol = _kernels.EPS * big
        floor = negligible**2
        sweeps = _kernels.jacobi_rows(at, vt, tol, floor, max_sweeps, use_numba)
        if sweeps < 0:
            raise NumericalFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    s = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    at = at[order]
    vt = vt[order]

    reliable = s > negligible if norm > 0.0 else np.zeros(s.size, dtype=bool)
    u = np.zeros((big, big if full else small))
    u[:, :small][:, reliable] = (at[reliable] / s[reliable, None]).T
    good = u[:, :small][:, reliable]
    missing = np.flatnonzero(~reliable)
    extra = big - small if full else 0
    if missing.size or extra:
        fill = _kernels.complete_columns(good, missing.size + extra)
        u[:, missing] = fill[:, : missing.size]
        if extra:
            u[:, small:] = fill[:, missing.size :]
    return u, s, vt, sweeps


def svd(a, full_matrices=False, max_sweeps=MAX_SWEEPS, use_numba=None):
    """Singular value decomposition ``a = u @ diag(s) @ vt``.

    ``s`` has ``min(rows, cols)`` entries in descending order. With
    ``full_matrices`` both ``u`` and ``vt`` are square.
    """
    a = as_matrix(a)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise InvalidInput("svd of an empty matrix")
    transposed = rows < cols
    work = a.T if transposed else a
    u, s, v_t, sweeps = _svd_tall(work, full_matrices, max_sweeps, use_numba)
    k = s.size
    if transposed:
        # a = work.T = v_t.T @ diag(s) @ u.T
        u, v_t = v_t.T.copy(), u.T.copy()
    _fix_signs(u, v_t, k)
    return SvdResult(u=u, s=s, vt=v_t, shape=(rows, cols), sweeps=sweeps)


def orthonormality_error(basis, axis=0):
    """max |QᵀQ - I| for columns (axis=0) or rows (axis=1)."""
    q = basis if axis == 0 else basis.T
    k = q.shape[1]
    if k == 0:
        return 0.0
    return float(np.max(np.abs(q.T @ q - np.eye(k))))


def _check_basis(basis, x):
    basis = as_matrix(basis, "basis")
    x = as_matrix(x, "x")
    if basis.shape[0] != x.shape[0]:
        raise ShapeError(f"basis has {basis.shape[0]} rows, x has {x.shape[0]}")
    if orthonormality_error(basis) > ORTHO_TOL:
        raise InvalidInput("basis columns are not orthonormal")
    return basis, x


def project_out(basis, x):
    """Remove from each column of ``x`` its component in span(basis)."""
    basis, x = _check_basis(basis, x)
    if basis.shape[1] == 0:
        return x.copy()
    return x - basis @ (basis.T @ x)


def project_in(basis, x):
    """Orthogonal projection of each column of ``x`` onto span(basis)."""
    basis, x = _check_basis(basis, x)
    if basis.shape[1] == 0:
        return np.zeros_like(x)
    return basis @ (basis.T @ x)


def orthonormal_complement(basis):
    """Orthonormal basis of the orthogonal complement of span(basis)."""
    basis = as_matrix(basis, "basis")
    d, k = basis.shape
    if k > d:
        raise InvalidInput(f"{k} columns cannot be orthonormal in R^{d}")
    if orthonormality_error(basis) > ORTHO_TOL:
        raise InvalidInput("basis columns are not orthonormal")
    if k == 0:
        return np.eye(d)
    res = svd(basis, full_matrices=True)
    return res.u[:, res.rank :].copy()


def orthonormalize_rows(g):
    """Row-orthonormal matrix spanning the row space of a full-row-rank ``g``."""
    g = as_matrix(g)
    q, r = np.linalg.qr(g.T)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return (q * signs).T
