import numpy as np
import pytest

from learnedprior.bma import PredictionSet, bma_predict, evaluate
from learnedprior.model import MlpModel, softmax
from learnedprior.samplers import SampleSet


@pytest.fixture
def net():
    return MlpModel([3, 4, 3], "tanh")


def test_single_sample_is_plain_softmax(net):
    rng = np.random.default_rng(0)
    w = rng.standard_normal(net.dim)
    x = rng.standard_normal((5, 3))
    p = bma_predict(net, [w], x, np.zeros(5, dtype=int))
    np.testing.assert_array_equal(p.probs, softmax(net.forward(w, x)))


def test_opposite_samples_average_to_half():
    m = MlpModel([1, 2])
    big = 60.0
    w1 = m.layout.flatten({"W0": np.zeros((2, 1)), "b0": np.array([big, -big])})
    w2 = m.layout.flatten({"W0": np.zeros((2, 1)), "b0": np.array([-big, big])})
    p = bma_predict(m, [w1, w2], np.zeros((1, 1)), [0])
    np.testing.assert_allclose(p.probs, [[0.5, 0.5]], atol=1e-12)


def test_bma_equals_mean_of_passes(net):
    rng = np.random.default_rng(1)
    ws = [rng.standard_normal(net.dim) for _ in range(10)]
    x = rng.standard_normal((7, 3))
    ss = SampleSet([(i // 2, i, w) for i, w in enumerate(ws)])
    p = bma_predict(net, ss, x, np.zeros(7, dtype=int))
    ref = np.mean([softmax(net.forward(w, x)) for w in ws], axis=0)
    np.testing.assert_allclose(p.probs, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, atol=1e-12)


def test_empty_sample_set(net):
    with pytest.raises(ValueError):
        bma_predict(net, SampleSet([]), np.zeros((1, 3)), [0])


def test_uniform_predictions():
    r = evaluate(PredictionSet(np.full((4, 10), 0.1), np.arange(4)))
    assert r.nll == pytest.approx(np.log(10), abs=1e-12)
    assert r.nll == pytest.approx(2.302585, abs=1e-6)


def test_perfect_predictions():
    r = evaluate(PredictionSet(np.eye(3), np.arange(3)))
    assert r.error == 0 and r.ece == 0 and r.nll == 0
    assert r.n == 3


def test_single_prediction_ece():
    r = evaluate(PredictionSet(np.array([[0.8, 0.2]]), [0]))
    assert r.ece == pytest.approx(0.2, abs=1e-12)
    assert r.error == 0
    assert sum(b.count for b in r.reliability_bins) == 1
    assert len(r.reliability_bins) == 15


def test_ties_go_to_lowest_class():
    r = evaluate(PredictionSet(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1]))
    assert r.error == 0.5


def test_zero_probability_is_clamped_and_flagged():
    r = evaluate(PredictionSet(np.array([[1.0, 0.0]]), [1]))
    assert r.nll_clamped
    assert r.nll == pytest.approx(-np.log(1e-12))


def test_ece_order_invariant_and_error_monotone_invariant():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(4), size=50)
    labels = rng.integers(0, 4, 50)
    perm = rng.permutation(50)
    a = evaluate(PredictionSet(probs, labels))
    b = evaluate(PredictionSet(probs[perm], labels[perm]))
    assert a.ece == pytest.approx(b.ece, abs=1e-12)
    squashed = probs ** 3 / (probs ** 3).sum(axis=1, keepdims=True)
    assert evaluate(PredictionSet(squashed, labels)).error == a.error


def test_mean_per_class_accuracy():
    probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.9, 0.1], [0.1, 0.9]])
    r = evaluate(PredictionSet(probs, [0, 0, 0, 0]), per_class=True)
    assert r.mean_per_class_accuracy == pytest.approx(0.75)
    r = evaluate(PredictionSet(probs, [0, 0, 1, 1]), per_class=True)
    assert r.mean_per_class_accuracy == pytest.approx(0.75)


def test_rejects_non_simplex_rows():
    with pytest.raises(ValueError):
        PredictionSet(np.array([[0.6, 0.6]]), [0])
