"""
Unit tests for CTC greedy decoding, prefix scoring, joint beam search and TER
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import numpy as np
from ml.decode import (
    ctc_greedy, ctc_initial_state, ctc_prefix_score, edit_distance, interpolate,
    joint_beam_search, joint_exhaustive_search, joint_greedy_search, token_error_rate,
)
from ml.errors import ConfigurationError, InputError
from ml.losses import collapse_path, ctc_loss
from ml.numerics import row_log_softmax

A, B, C = 2, 3, 4
VOCAB = 5


def random_log_probs(rng, T, V=VOCAB):
    return row_log_softmax(rng.standard_normal((T, V)))


def table_scorer(seed, V=VOCAB):
    """Fixed next-token distribution per prefix, independent of call order"""
    def score(prefix):
        rng = np.random.default_rng([seed, len(prefix)] + list(prefix))
        return row_log_softmax(2.0 * rng.standard_normal((1, V)))[0]
    return score


def one_hot_log_probs(path, V=VOCAB):
    lp = np.full((len(path), V), np.log(0.01 / (V - 1)))
    for t, token in enumerate(path):
        lp[t, token] = np.log(0.99)
    return lp


def test_greedy_examples():
    assert ctc_greedy(one_hot_log_probs([A, A, 0, A])) == [A, A]
    assert ctc_greedy(one_hot_log_probs([0, 0, 0])) == []
    assert ctc_greedy(np.zeros((2, VOCAB))) == []


def test_greedy_matches_path_collapse():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lp = random_log_probs(rng, int(rng.integers(1, 10)))
        assert ctc_greedy(lp) == list(collapse_path(np.argmax(lp, axis=1)))


def test_prefix_score_single_frame():
    lp = np.log(np.array([[0.2, 0.1, 0.4, 0.3, 0.0 + 1e-300]]))
    state, score = ctc_prefix_score(ctc_initial_state(lp), lp, A)
    assert score == pytest.approx(np.log(0.4), abs=1e-12)
    assert state.full_score == pytest.approx(np.log(0.4), abs=1e-12)


def test_prefix_rejects_blank():
    lp = random_log_probs(np.random.default_rng(0), 3)
    with pytest.raises(InputError):
        ctc_prefix_score(ctc_initial_state(lp), lp, 0)


def test_full_sequence_matches_ctc_loss():
    """summing both endings at the last frame gives P(labels | x)"""
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = int(rng.integers(2, 9))
        labels = [int(t) for t in rng.integers(2, VOCAB, size=int(rng.integers(1, 4)))]
        lp = random_log_probs(rng, T)
        state = ctc_initial_state(lp)
        for token in labels:
            state, _ = ctc_prefix_score(state, lp, token)
        try:
            loss, _ = ctc_loss(lp, labels)
        except InputError:
            assert state.full_score == -np.inf
            continue
        assert abs(np.exp(state.full_score) - np.exp(-loss)) <= 1e-9


def test_prefix_score_never_increases():
    rng = np.random.default_rng(2)
    for _ in range(50):
        lp = random_log_probs(rng, 6)
        state = ctc_initial_state(lp)
        previous = 0.0
        for token in rng.integers(2, VOCAB, size=4):
            state, score = ctc_prefix_score(state, lp, int(token))
            assert score <= previous + 1e-12
            previous = score


def test_interpolate():
    assert interpolate(-2.0, -1.0, 0.3) == pytest.approx(-1.3, abs=1e-12)
    assert interpolate(-np.inf, -1.0, 0.0) == -1.0
    assert interpolate(-2.0, -np.inf, 1.0) == -2.0


def test_hypothesis_score_is_interpolated():
    rng = np.random.default_rng(3)
    hyp = joint_beam_search(table_scorer(0), random_log_probs(rng, 5), beam=4, ctc_weight=0.3,
                            max_len=3)
    assert hyp.ended
    assert abs(hyp.joint_score - (0.3 * hyp.ctc_score + 0.7 * hyp.s2s_score)) <= 1e-12


def test_beam_matches_exhaustive_search():
    """a beam that never prunes finds the exhaustive optimum"""
    rng = np.random.default_rng(4)
    for instance in range(50):
        lp = random_log_probs(rng, 4)
        scorer = table_scorer(instance)
        beam = joint_beam_search(scorer, lp, beam=1000, ctc_weight=0.3, max_len=3)
        oracle = joint_exhaustive_search(scorer, lp, ctc_weight=0.3, max_len=3)
        assert beam.tokens == oracle.tokens
        assert beam.joint_score == oracle.joint_score


def test_beam_one_equals_greedy():
    rng = np.random.default_rng(5)
    for instance in range(30):
        lp = random_log_probs(rng, 6)
        scorer = table_scorer(100 + instance)
        beam = joint_beam_search(scorer, lp, beam=1, ctc_weight=0.3, max_len=5)
        greedy = joint_greedy_search(scorer, lp, ctc_weight=0.3, max_len=5)
        assert beam.tokens == greedy.tokens


def test_zero_ctc_weight_ignores_ctc():
    """attention-only decoding does not depend on the CTC posteriors"""
    rng = np.random.default_rng(6)
    for instance in range(20):
        scorer = table_scorer(200 + instance)
        a = joint_beam_search(scorer, random_log_probs(rng, 5), beam=3, ctc_weight=0.0, max_len=4)
        b = joint_beam_search(scorer, random_log_probs(rng, 5), beam=3, ctc_weight=0.0, max_len=4)
        assert a.tokens == b.tokens
        assert a.joint_score == a.s2s_score


def test_decoding_is_deterministic():
    lp = random_log_probs(np.random.default_rng(7), 6)
    first = joint_beam_search(table_scorer(9), lp, beam=10, max_len=4)
    second = joint_beam_search(table_scorer(9), lp, beam=10, max_len=4)
    assert first.tokens == second.tokens


def test_decode_argument_checks():
    lp = random_log_probs(np.random.default_rng(8), 3)
    with pytest.raises(ConfigurationError):
        joint_beam_search(table_scorer(0), lp, beam=0)
    with pytest.raises(ConfigurationError):
        joint_beam_search(table_scorer(0), lp, ctc_weight=1.5)


def test_max_len_guard():
    """eos keeps getting cheaper, so decoding runs until max_len stops it"""
    def never_stop(prefix):
        out = np.full(VOCAB, -50.0)
        out[1] = -50.0 + 10.0 * len(prefix)
        out[A] = 0.0
        return out
    lp = one_hot_log_probs([A, 0, A, 0, A, 0, A])
    hyp = joint_beam_search(never_stop, lp, beam=2, ctc_weight=0.0, max_len=3)
    assert hyp.tokens == (A, A, A)


def test_token_error_rate():
    assert token_error_rate([A, B, C], [A, B, C]) == 0.0
    assert token_error_rate([A, B, C], [A, 5, C]) == pytest.approx(1 / 3)
    assert token_error_rate([A, B, C], []) == 1.0
    assert edit_distance([A, B], [B, A, B]) == 1
    with pytest.raises(InputError):
        token_error_rate([], [A])


def full_table_distance(ref, hyp):
    costs = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=int)
    costs[:, 0] = np.arange(len(ref) + 1)
    costs[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            sub = 0 if ref[i - 1] == hyp[j - 1] else 1
            costs[i, j] = min(costs[i - 1, j] + 1, costs[i, j - 1] + 1, costs[i - 1, j - 1] + sub)
    return int(costs[-1, -1])


def test_edit_distance_matches_full_table():
    assert edit_distance([], []) == 0
    assert edit_distance([], [A, B]) == 2
    assert edit_distance([A, B, C], []) == 3
    assert edit_distance([A, A, A], [A]) == 2
    assert edit_distance([A, B, C, A], [B, C, A, B]) == 2
    rng = np.random.default_rng(12)
    for _ in range(200):
        ref = [int(t) for t in rng.integers(2, 6, size=rng.integers(0, 8))]
        hyp = tuple(int(t) for t in rng.integers(2, 6, size=rng.integers(0, 8)))
        assert edit_distance(ref, hyp) == full_table_distance(ref, hyp)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
