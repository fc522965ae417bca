"""Hot loops of the one-sided Jacobi SVD.

Both variants visit column pairs in the same round-robin order, so they perform
the same rotations. Inner products are summed in a different order by the two
paths, so results agree to rounding, not bit for bit.
"""
import numpy as np

from ._jit import USE_NUMBA, njit

EPS = np.finfo(np.float64).eps


def round_robin_order(n):
    """Pair schedule of ``n`` columns: array of shape (rounds, pairs, 2).

    Within a round every index appears at most once, so the rotations of one
    round commute. Odd ``n`` gets a phantom index ``n`` that kernels skip.
    """
    p = n + (n % 2)
    if p < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    idx = list(range(p))
    rounds = []
    for _ in range(p - 1):
        rounds.append([(idx[i], idx[p - 1 - i]) for i in range(p // 2)])
        idx = [idx[0], idx[-1]] + idx[1:-1]
    order = np.array(rounds, dtype=np.int64)
    # Smaller index first keeps the rotation convention stable.
    return np.sort(order, axis=2)


@njit(cache=True)
def _jacobi_rows_numba(at, vt, order, tol, floor, max_sweeps):
    n, m = at.shape
    for sweep in range(max_sweeps):
        rotated = False
        for rnd in range(order.shape[0]):
            for k in range(order.shape[1]):
                p = order[rnd, k, 0]
                q = order[rnd, k, 1]
                if q >= n:
                    continue
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or min(alpha, beta) <= floor:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    at[p, i] = c * x - s * y
                    at[q, i] = s * x + c * y
                for i in range(vt.shape[1]):
                    x = vt[p, i]
                    y = vt[q, i]
                    vt[p, i] = c * x - s * y
                    vt[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


def _jacobi_rows_numpy(at, vt, order, tol, floor, max_sweeps):
    n = at.shape[0]
    rounds = []
    for rnd in order:
        keep = rnd[:, 1] < n
        rounds.append((rnd[keep, 0], rnd[keep, 1]))
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            x = at[p]
            y = at[q]
            alpha = np.einsum("ij,ij->i", x, x)
            beta = np.einsum("ij,ij->i", y, y)
            gamma = np.einsum("ij,ij->i", x, y)
            act = (gamma != 0.0) & (np.minimum(alpha, beta) > floor) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            x, y = x[act], y[act]
            zeta = (beta[act] - alpha[act]) / (2.0 * gamma[act])
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            at[p] = c * x - s * y
            at[q] = s * x + c * y
            vx = vt[p]
            vy = vt[q]
            vt[p] = c * vx - s * vy
            vt[q] = s * vx + c * vy
        if not rotated:
            return sweep + 1
    return -1


def jacobi_rows(at, vt, tol, floor, max_sweeps, use_numba=None):
    """Orthogonalize the rows of ``at`` in place, applying the same rotations to ``vt``.

    Pairs whose smaller squared norm is at most ``floor`` are skipped: such rows
    are numerically zero and rotating them only stirs rounding noise. Returns the number of sweeps used, or -1 if ``max_sweeps`` was exhausted.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    order = round_robin_order(at.shape[0])
    if order.shape[0] == 0:
        return 1
    fn = _jacobi_rows_numba if use_numba else _jacobi_rows_numpy
    return int(fn(at, vt, order, float(tol), float(floor), int(max_sweeps)))


def complete_columns(q, count):
    """Return ``count`` unit columns orthogonal to the orthonormal columns of ``q``.

    Classical Gram-Schmidt against the standard basis, always taking the
    candidate with the largest residual, with one re-orthogonalization pass.
    """
    m = q.shape[0]
    basis = q.copy()
    out = np.zeros((m, count))
    for j in range(count):
        resid = np.eye(m) - basis @ basis.T
        norms = np.einsum("ij,ij->j", resid, resid)
        pick = int(np.argmax(norms))
        v = resid[:, pick]
        v = v / np.sqrt(norms[pick])
        if basis.shape[1]:
            v = v - basis @ (basis.T @ v)
        v = v / np.linalg.norm(v)
        out[:, j] = v
        basis = np.column_stack([basis, v])
    return out
