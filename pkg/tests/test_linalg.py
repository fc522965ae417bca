import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inflora.errors import InvalidInput, NumericalFailure, ShapeError
from inflora.linalg import (
    as_matrix,
    orthonormal_complement,
    orthonormality_error,
    orthonormalize_rows,
    project_in,
    project_out,
    svd,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def small_matrices(max_side=8):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def brute_singular_values(a):
    """Square roots of the eigenvalues of A^T A, descending."""
    ev = np.linalg.eigvalsh(a.T @ a)[::-1]
    return np.sqrt(np.clip(ev[: min(a.shape)], 0.0, None))


# hand examples

def test_identity():
    res = svd(np.eye(2))
    np.testing.assert_array_equal(res.s, [1.0, 1.0])
    np.testing.assert_allclose(res.u, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(res.vt, np.eye(2), atol=1e-15)


def test_diagonal_with_negative_entry():
    res = svd(np.array([[3.0, 0.0], [0.0, -2.0]]))
    np.testing.assert_allclose(res.s, [3.0, 2.0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(res.reconstruct(), [[3.0, 0.0], [0.0, -2.0]], atol=1e-15)


def test_rank_one_sign_convention():
    a = np.array([[0.0, 3.0], [0.0, 4.0]])
    res = svd(a)
    np.testing.assert_allclose(res.s, [5.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(res.vt[0], [0.0, 1.0], atol=1e-15)
    assert res.rank == 1
    np.testing.assert_allclose(res.reconstruct(), a, atol=1e-14)


def test_zero_matrix():
    res = svd(np.zeros((3, 2)))
    np.testing.assert_array_equal(res.s, [0.0, 0.0])
    assert res.rank == 0
    assert orthonormality_error(res.u) < 1e-12


def test_empty_matrix_rejected():
    with pytest.raises(InvalidInput):
        svd(np.zeros((4, 0)))


def test_input_not_modified(rng):
    a = rng.standard_normal((3, 7))
    keep = a.copy()
    svd(a)
    svd(a.T)
    np.testing.assert_array_equal(a, keep)


def test_rejects_non_finite():
    with pytest.raises(InvalidInput):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(InvalidInput):
        as_matrix(np.array([[np.inf]]))


def test_sweep_cap_raises(rng):
    with pytest.raises(NumericalFailure):
        svd(rng.standard_normal((6, 6)), max_sweeps=1)


# oracles

def test_singular_values_match_eigen_oracle(rng):
    for _ in range(200):
        a = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 9)))
        res = svd(a)
        assert np.max(np.abs(res.s - brute_singular_values(a))) <= 1e-8
        assert np.linalg.norm(res.reconstruct() - a) <= 1e-10


def test_reconstruction_up_to_32(rng):
    for _ in range(500):
        m, n = rng.integers(1, 33, size=2)
        a = rng.standard_normal((m, n)) * 10.0 ** rng.uniform(-3, 3)
        res = svd(a)
        assert np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a) <= 1e-10
        assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)
        assert orthonormality_error(res.u) <= 1e-10
        assert orthonormality_error(res.vt, axis=1) <= 1e-10


def test_low_rank_detected(rng):
    for k in range(0, 5):
        a = rng.standard_normal((12, k)) @ rng.standard_normal((k, 9)) if k else np.zeros((12, 9))
        res = svd(a)
        assert res.rank == k
        assert orthonormality_error(res.u) <= 1e-10


def test_full_matrices(rng):
    a = rng.standard_normal((6, 2))
    res = svd(a, full_matrices=True)
    assert res.u.shape == (6, 6)
    assert orthonormality_error(res.u) <= 1e-12
    np.testing.assert_allclose(res.reconstruct(), a, atol=1e-12)
    wide = svd(a.T, full_matrices=True)
    assert wide.vt.shape == (6, 6)
    np.testing.assert_allclose(wide.reconstruct(), a.T, atol=1e-12)


@given(small_matrices())
def test_property_singular_values(a):
    res = svd(a)
    scale = max(1.0, float(np.abs(a).max()))
    # squared singular values avoid the square-root blow-up at rounding-level eigenvalues
    ev = np.linalg.eigvalsh(a.T @ a)[::-1][: res.s.size]
    assert np.max(np.abs(res.s**2 - ev)) <= 1e-8 * scale**2 * max(a.shape)
    assert np.linalg.norm(res.reconstruct() - a) <= 1e-10 * max(1.0, np.linalg.norm(a))


@given(small_matrices())
def test_property_sign_convention(a):
    res = svd(a)
    for row in res.vt:
        assert row[np.argmax(np.abs(row))] >= 0.0


# projections

def test_project_out_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(project_out(np.zeros((2, 0)), x), x)
    np.testing.assert_array_equal(project_out(np.array([[1.0], [0.0]]), x), [[0.0, 0.0], [3.0, 4.0]])
    np.testing.assert_array_equal(project_out(np.eye(2), x), np.zeros((2, 2)))


def test_project_in_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(project_in(np.array([[0.0], [1.0]]), x), [[0.0, 0.0], [3.0, 4.0]])
    np.testing.assert_array_equal(project_in(np.eye(2), x), x)
    np.testing.assert_array_equal(project_in(np.zeros((2, 0)), x), np.zeros((2, 2)))


def test_projection_errors():
    with pytest.raises(ShapeError):
        project_out(np.eye(3), np.ones((2, 2)))
    with pytest.raises(InvalidInput):
        project_in(np.array([[1.0], [1.0]]), np.ones((2, 2)))


def test_projections_sum_to_identity(rng):
    for _ in range(50):
        d = int(rng.integers(2, 10))
        m = svd(rng.standard_normal((d, int(rng.integers(1, d))))).u
        x = rng.standard_normal((d, 5))
        np.testing.assert_allclose(project_out(m, x) + project_in(m, x), x, atol=1e-10)


def test_complement_examples():
    c = orthonormal_complement(np.array([[1.0], [0.0], [0.0]]))
    assert c.shape == (3, 2)
    np.testing.assert_allclose(c[0], 0.0, atol=1e-15)
    assert orthonormal_complement(np.eye(4)).shape == (4, 0)
    c = orthonormal_complement(np.array([[1.0], [1.0]]) / np.sqrt(2.0))
    np.testing.assert_allclose(np.abs(c[:, 0]), [1 / np.sqrt(2.0)] * 2, atol=1e-15)
    assert c[0, 0] * c[1, 0] < 0


def test_complement_is_square_orthogonal(rng):
    for _ in range(50):
        d = int(rng.integers(1, 12))
        k = int(rng.integers(0, d + 1))
        m = svd(rng.standard_normal((d, k))).u if k else np.zeros((d, 0))
        q = np.column_stack([m, orthonormal_complement(m)])
        assert q.shape == (d, d)
        assert np.max(np.abs(q.T @ q - np.eye(d))) <= 1e-8


def test_orthonormalize_rows(rng):
    g = rng.standard_normal((3, 7))
    b = orthonormalize_rows(g)
    assert orthonormality_error(b, axis=1) <= 1e-12
    # same row space
    np.testing.assert_allclose(g - g @ b.T @ b, 0.0, atol=1e-12)
