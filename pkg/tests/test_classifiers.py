import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgssm_bench.classifiers import (
    ClassificationError,
    LrtClassifier,
    evaluate,
    lrt_classify,
    lrt_scores,
)
from lgssm_bench.ssm import LabeledSequence, ModelError, ModelParams, generate_dataset, make_rng, simulate_sequence


def _walk(Q, R=1e-3):
    return ModelParams.scalar(F=1, H=1, Q=Q, R=R, mu0=0, Sigma0=1e-4)


class TestLrt:
    def test_identical_models_tie_to_label_one(self, random_walk, rng):
        c = LrtClassifier(random_walk, random_walk)
        _, seq = simulate_sequence(random_walk, 30, rng)
        label, (ll1, ll2) = lrt_classify(c, seq)
        assert ll1 == ll2
        assert label == 1

    def test_large_q_ratio_is_near_perfect(self):
        p1, p2 = _walk(1e-5), _walk(1e-1)
        c = LrtClassifier(p1, p2)
        rng = make_rng(3)
        hits = sum(lrt_classify(c, simulate_sequence(p2, 120, rng)[1])[0] == 2 for _ in range(100))
        assert hits >= 99

    def test_equal_models_give_chance_accuracy(self):
        p = _walk(1e-5)
        # distinct objects with the same values still describe the same hypothesis
        c = LrtClassifier(p, _walk(1e-5 * (1 + 1e-9)))
        data = generate_dataset(p, p, 200, 50, make_rng(4))
        labels, _, _ = lrt_scores(c, data)
        _, acc = evaluate(labels, data.labels)
        assert abs(acc - 0.5) < 0.1

    def test_mismatched_models_rejected(self, random_walk):
        p2 = ModelParams(np.eye(1), np.ones((2, 1)), [[1.0]], np.eye(2), [0.0], [[1.0]])
        with pytest.raises(ModelError, match="m_z"):
            LrtClassifier(random_walk, p2)

    def test_divergence_names_model(self, random_walk):
        bad = ModelParams.scalar(F=1e160, H=1, Q=1, R=1, Sigma0=1e-100)
        c = LrtClassifier(random_walk, bad)
        with pytest.raises(ClassificationError, match="model 2"):
            lrt_classify(c, LabeledSequence(np.zeros(5)))

    def test_batch_scores_match_single(self, rng):
        p1, p2 = _walk(1e-5), _walk(1e-3)
        data = generate_dataset(p1, p2, 5, 40, rng)
        c = LrtClassifier(p1, p2)
        labels, ll1, ll2 = lrt_scores(c, data)
        for i, seq in enumerate(data):
            label, (a, b) = lrt_classify(c, seq)
            assert label == labels[i]
            assert (a, b) == pytest.approx((ll1[i], ll2[i]), rel=1e-14)


class TestEvaluate:
    def test_perfect(self):
        counts, acc = evaluate([1, 2, 2, 1, 2], [1, 2, 2, 1, 2])
        assert acc == 1.0
        assert counts.tp == 3 and counts.tn == 2

    def test_total_inversion(self):
        counts, acc = evaluate([2, 2, 1, 1], [1, 1, 2, 2])
        assert acc == 0.0
        assert (counts.fp, counts.fn) == (2, 2)

    def test_hand_count(self):
        counts, acc = evaluate([1, 1, 1, 1], [1, 2, 1, 2])
        assert (counts.tp, counts.tn, counts.fp, counts.fn) == (0, 2, 0, 2)
        assert acc == 0.5

    @pytest.mark.parametrize("pred, truth", [([1, 2], [1]), ([], []), ([0, 1], [1, 1])])
    def test_bad_input(self, pred, truth):
        with pytest.raises(ValueError):
            evaluate(pred, truth)

    @given(st.lists(st.tuples(st.sampled_from([1, 2]), st.sampled_from([1, 2])), min_size=1, max_size=50))
    def test_counts_sum_to_total(self, pairs):
        pred, truth = zip(*pairs)
        counts, acc = evaluate(pred, truth)
        assert counts.total == len(pairs)
        assert 0.0 <= acc <= 1.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), q2=st.floats(1e-6, 1e-2))
def test_label_symmetry(seed, q2):
    p1, p2 = _walk(1e-5), _walk(q2)
    data = generate_dataset(p1, p2, 10, 30, make_rng(seed))
    a, _, _ = lrt_scores(LrtClassifier(p1, p2), data)
    b, _, _ = lrt_scores(LrtClassifier(p2, p1), data)
    acc_a = evaluate(a, data.labels)[1]
    acc_b = evaluate(b, 3 - data.labels)[1]
    assert acc_a == acc_b
