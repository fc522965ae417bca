import numpy as np
import pytest

from inflora.data import TaskSpec, gen_task_sequence
from inflora.errors import InvalidInput, NumericalFailure, StateError
from inflora.metrics import (
    JITTER,
    AccuracyMatrix,
    ClassStats,
    acc_metrics,
    align_classifier,
    collect_stats,
    evaluate,
    param_count,
    predict,
    stats_from_features,
)
from inflora.model import build_network


def test_acc_metrics_hand_example():
    acc, avg = acc_metrics(AccuracyMatrix.from_rows([[0.9], [0.8, 0.7]]))
    assert acc[0] == 0.9 and acc[1] == 0.75 and avg == 0.825


def test_acc_metrics_edge_cases():
    acc, avg = acc_metrics(AccuracyMatrix.from_rows([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]]))
    assert avg == 1.0 and np.all(acc == 1.0)
    assert acc_metrics(AccuracyMatrix.from_rows([[0.37]]))[1] == 0.37
    m = AccuracyMatrix(2)
    m.set_row(0, [0.5])
    with pytest.raises(StateError):
        acc_metrics(m)
    with pytest.raises(InvalidInput):
        m.set_row(1, [0.5, 1.5])
    with pytest.raises(InvalidInput):
        m.set_row(1, [0.5])


def test_param_count_examples():
    assert param_count([(768, 768)], 10, [0]) == 15360
    assert param_count([(768, 768)], 0, [0]) == 0
    assert param_count([(32, 64), (64, 64)], 4, [0, 1]) == 896


def _perfect_net(seq):
    # one-hot logits from an identity feature map: inputs are the labels' one-hot vectors
    n = seq.n_classes
    net = build_network(n, [n], n, np.random.default_rng(0), activations=["none"])
    net.layers[0].w = np.eye(n)
    net.head.w = np.eye(n)
    return net


def test_evaluate_perfect_and_tied():
    seq = gen_task_sequence(TaskSpec(n_tasks=2, classes_per_task=2, n_train=3, n_test=5, d_in=4, base_n=3))
    for task in seq.tasks:
        task.test_x = np.eye(4)[:, task.test_y]
    net = _perfect_net(seq)
    np.testing.assert_array_equal(evaluate(net, seq, 1), [1.0, 1.0])
    net.head.w[:] = 0.0
    row = evaluate(net, seq, 1)
    np.testing.assert_array_equal(row, [np.mean(seq.tasks[0].test_y == 0), 0.0])
    assert np.array_equal(predict(net, np.ones((4, 3))), [0, 0, 0])
    np.testing.assert_array_equal(evaluate(net, seq, 1), row)
    with pytest.raises(InvalidInput):
        evaluate(net, seq, 2)


def test_stats_examples():
    st = stats_from_features(np.array([[1.0, 3.0], [1.0, 3.0]]), np.array([0, 0]))
    np.testing.assert_array_equal(st.means[0], [2.0, 2.0])
    np.testing.assert_allclose(st.covs[0], [[2.0 + JITTER, 2.0], [2.0, 2.0 + JITTER]], rtol=0, atol=1e-15)
    same = stats_from_features(np.ones((3, 4)), np.zeros(4, int))
    np.testing.assert_allclose(same.covs[0], JITTER * np.eye(3), rtol=0, atol=1e-18)
    with pytest.raises(InvalidInput):
        stats_from_features(np.ones((2, 1)), np.array([0]))


def test_stats_match_two_pass(rng):
    f = rng.standard_normal((5, 60))
    y = rng.integers(0, 3, 60)
    st = stats_from_features(f, y)
    perm = rng.permutation(60)
    st2 = stats_from_features(f[:, perm], y[perm])
    for c in range(3):
        g = f[:, y == c]
        mu = g.sum(axis=1) / g.shape[1]
        cov = sum(np.outer(v - mu, v - mu) for v in g.T) / (g.shape[1] - 1) + JITTER * np.eye(5)
        np.testing.assert_allclose(st.covs[c], cov, atol=1e-12)
        np.testing.assert_allclose(st2.means[c], st.means[c], atol=1e-15)
        assert np.max(np.abs(st.covs[c] - st.covs[c].T)) <= 1e-12
        assert np.linalg.eigvalsh(st.covs[c]).min() >= 0.0


def test_align_only_touches_head(rng):
    net = build_network(4, [6], 3, rng)
    x = rng.standard_normal((4, 30))
    y = np.repeat([0, 1, 2], 10)
    stats = collect_stats(net, x, y)
    layers = [l.w.copy() for l in net.layers]
    align_classifier(net, stats, samples=16, epochs=2)
    assert all(np.array_equal(l.w, w) for l, w in zip(net.layers, layers))
    assert np.any(net.head.w != 0.0)


def test_align_errors(rng):
    net = build_network(2, [2], 2, rng)
    bad = ClassStats({0: np.zeros(2)}, {0: -np.eye(2)}, {0: 2})
    with pytest.raises(NumericalFailure):
        align_classifier(net, bad)
    with pytest.raises(InvalidInput):
        align_classifier(net, ClassStats({}, {}, {}))
