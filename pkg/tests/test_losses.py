"""
Unit tests for the training objectives
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import numpy as np
import numpy.testing as npt
from ml.errors import ConfigurationError, CTCInfeasibleError, GuardError, InputError
from ml.losses import (
    LossBreakdown, coeff_mse, collapse_path, ctc_brute_force, ctc_loss, ctc_posteriors,
    jca_loss, min_ctc_frames, mtl_loss, s2s_loss,
)
from ml.numerics import row_log_softmax

A, B = 2, 3


def uniform_log_probs(T, V):
    return np.full((T, V), -np.log(V))


def random_log_probs(rng, T, V):
    return row_log_softmax(rng.standard_normal((T, V)))


def test_single_frame():
    lp = np.log(np.array([[0.3, 0.1, 0.6]]))
    loss, _ = ctc_loss(lp, [A])
    assert loss == pytest.approx(-np.log(0.6), abs=1e-12)


def test_two_frames_uniform():
    """(a,a), (a,-) and (-,a) collapse to [a]: P = 3/9"""
    loss, _ = ctc_loss(uniform_log_probs(2, 3), [A])
    assert loss == pytest.approx(np.log(3.0), abs=1e-12)


def test_repeated_label_needs_blank():
    """[a, a] in three frames has the single alignment (a, -, a)"""
    loss, _ = ctc_loss(uniform_log_probs(3, 3), [A, A])
    assert loss == pytest.approx(3 * np.log(3.0), abs=1e-12)
    assert min_ctc_frames([A, A]) == 3
    assert min_ctc_frames([A, B, B, A]) == 5


def test_infeasible():
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(uniform_log_probs(2, 3), [A, A])
    assert ctc_brute_force(uniform_log_probs(2, 3), [A, A]) == float('inf')
    assert ctc_brute_force(uniform_log_probs(1, 3), [A, B]) == float('inf')


def test_invalid_labels():
    with pytest.raises(InputError):
        ctc_loss(uniform_log_probs(3, 3), [])
    with pytest.raises(InputError):
        ctc_loss(uniform_log_probs(3, 3), [0])
    with pytest.raises(InputError):
        ctc_loss(uniform_log_probs(3, 3), [5])


def test_ctc_matches_brute_force():
    """200 seeded instances with T <= 6, V <= 4 and at most 3 labels"""
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        length = int(rng.integers(1, 4))
        labels = [int(t) for t in rng.integers(1, V, size=length)]
        lp = random_log_probs(rng, T, V)
        expected = ctc_brute_force(lp, labels)
        if T < min_ctc_frames(labels):
            assert expected == float('inf')
            with pytest.raises(CTCInfeasibleError):
                ctc_loss(lp, labels)
            continue
        loss, _ = ctc_loss(lp, labels)
        assert abs(loss - expected) <= 1e-9
        checked += 1
    assert checked > 100


def test_brute_force_guard():
    with pytest.raises(GuardError):
        ctc_brute_force(uniform_log_probs(7, 10), [A])


def test_posteriors_are_distributions():
    rng = np.random.default_rng(1)
    post = ctc_posteriors(random_log_probs(rng, 6, 4), [A, B, A])
    npt.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(post >= 0)


def test_collapse_path():
    assert collapse_path([A, A, 0, A]) == (A, A)
    assert collapse_path([0, 0, 0]) == ()
    assert collapse_path([A, B, B, 0, B]) == (A, B, B)


def test_s2s_uniform_and_confident():
    V = 5
    targets = [2, 3, 4]
    loss, grad = s2s_loss(uniform_log_probs(len(targets) + 1, V), targets)
    assert loss == pytest.approx(np.log(V), abs=1e-12)
    assert grad.shape == (len(targets) + 1, V)

    confident = np.full((len(targets) + 1, V), -1e6)
    for row, token in enumerate(targets + [1]):
        confident[row, token] = 0.0
    loss, _ = s2s_loss(confident, targets)
    assert loss == 0.0


def test_s2s_row_count_checked():
    with pytest.raises(InputError):
        s2s_loss(uniform_log_probs(3, 5), [2, 3, 4])


def test_jca_arithmetic():
    assert jca_loss(2.0, 1.0, 0.3) == pytest.approx(1.3, abs=1e-15)
    assert jca_loss(2.0, 1.0, 0.0) == 1.0
    assert jca_loss(2.0, 1.0, 1.0) == 2.0
    with pytest.raises(ConfigurationError):
        jca_loss(2.0, 1.0, 1.5)


def test_coeff_mse():
    loss, grad = coeff_mse(np.array([1.0, 0, 0, 0]), np.full(4, 0.25))
    assert loss == pytest.approx(0.1875, abs=1e-15)
    npt.assert_allclose(grad, 2 * (np.full(4, 0.25) - [1, 0, 0, 0]) / 4)
    same, zero_grad = coeff_mse(np.full(3, 1 / 3), np.full(3, 1 / 3))
    assert same == 0.0
    npt.assert_array_equal(zero_grad, 0.0)
    with pytest.raises(ConfigurationError):
        coeff_mse(np.ones(3), np.ones(4))


def test_mtl_arithmetic():
    assert mtl_loss(1.3, 0.1875, 0.01) == pytest.approx(1.301875, abs=1e-12)
    assert mtl_loss(1.3, 0.1875, 0.0) == 1.3


def test_loss_breakdown_consistency():
    losses = LossBreakdown.from_components(2.0, 1.0, 0.1875, 0.3, 0.01)
    assert losses.l_jca == pytest.approx(1.3, abs=1e-12)
    assert losses.l_mtl == pytest.approx(1.301875, abs=1e-12)
    assert losses.is_consistent()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
