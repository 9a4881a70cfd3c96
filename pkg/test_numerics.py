"""
Test script for the numerics kernel
TopK tie-breaking, orthonormalization, softmax and the Adam step
"""

import math

import numpy as np
import pytest

from backend.errors import DegenerateInputError, InvalidArgumentError
from backend.numerics import (
    AdamState,
    adam_step,
    derive_seed,
    gram_schmidt,
    make_rng,
    quantize,
    relative_error,
    sample_token,
    softmax,
    spawn_rng,
    spectral_norm,
    topk_mask,
    topk_mask_rows,
)


def _topk_scalar(v, k):
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    keep = set(order[:k])
    return np.array([v[i] if i in keep else 0.0 for i in range(len(v))])


def test_topk_keeps_k_largest():
    assert np.array_equal(topk_mask(np.array([0.1, 3.0, 2.0, -1.0]), 2), [0.0, 3.0, 2.0, 0.0])


def test_topk_ties_go_to_lowest_index():
    assert np.array_equal(topk_mask(np.array([1.0, 2.0, 2.0, 2.0]), 2), [0.0, 2.0, 2.0, 0.0])
    masked, keep = topk_mask_rows(np.ones((2, 5)), 3)
    assert keep.sum(axis=1).tolist() == [3, 3]
    assert keep[:, :3].all()


def test_topk_matches_scalar_oracle():
    rng = make_rng(11)
    for _ in range(20):
        a = np.round(rng.standard_normal((6, 17)), 1)   # rounding forces ties
        k = int(rng.integers(1, 18))
        masked, _ = topk_mask_rows(a, k)
        for row, out in zip(a, masked):
            assert np.array_equal(out, _topk_scalar(row, k))


def test_topk_rejects_bad_k():
    with pytest.raises(InvalidArgumentError):
        topk_mask(np.ones(3), 0)
    with pytest.raises(InvalidArgumentError):
        topk_mask(np.ones(3), 4)


def test_topk_is_idempotent():
    rng = make_rng(12)
    for _ in range(20):
        # sparse codes are non-negative; zeroed slots never outrank a kept entry
        v = np.round(np.abs(rng.standard_normal(15)), 1)
        k = int(rng.integers(1, 16))
        once = topk_mask(v, k)
        assert np.array_equal(topk_mask(once, k), once)


def test_gram_schmidt_orthonormal():
    rows = make_rng(3).standard_normal((7, 12))
    q = gram_schmidt(rows)
    assert np.allclose(q @ q.T, np.eye(7), atol=1e-12)
    # same span, same order: first row is the normalized input row
    assert np.allclose(q[0], rows[0] / np.linalg.norm(rows[0]))


def test_gram_schmidt_rank_deficient():
    rows = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(DegenerateInputError):
        gram_schmidt(rows)
    with pytest.raises(InvalidArgumentError):
        gram_schmidt(np.ones((4, 3)))


def test_gram_schmidt_of_triangular_pair_is_identity():
    assert np.array_equal(gram_schmidt(np.array([[2.0, 0.0], [1.0, 1.0]])), np.eye(2))


def test_softmax_temperature_zero_is_argmax():
    probs = softmax(np.array([1.0, 5.0, 5.0, 0.0]), 0.0)
    assert probs.tolist() == [0.0, 1.0, 0.0, 0.0]


def test_softmax_is_stable_and_normalized():
    probs = softmax(np.array([1000.0, 1000.0, -1000.0]), 1.0)
    assert np.isclose(probs.sum(), 1.0)
    assert np.allclose(probs[:2], 0.5)
    with pytest.raises(InvalidArgumentError):
        softmax(np.ones(3), -1.0)


def test_softmax_matches_scalar_oracle():
    logits = [1.0, 2.0, 3.0]
    total = sum(math.exp(x) for x in logits)
    expected = [math.exp(x) / total for x in logits]
    assert np.allclose(softmax(np.array(logits), 1.0), expected, rtol=0.0, atol=1e-12)
    assert softmax(np.array([0.0, 0.0]), 1.0).tolist() == [0.5, 0.5]


def test_softmax_tiny_temperature_stays_finite():
    probs = softmax(np.array([1.0, 2.0]), 1e-310)
    assert np.all(np.isfinite(probs))
    assert probs.tolist() == [0.0, 1.0]
    assert np.isclose(probs.sum(), 1.0, atol=1e-12)


def test_softmax_permutation_and_shift():
    logits = make_rng(8).standard_normal(9)
    perm = make_rng(9).permutation(9)
    for temperature in (0.3, 1.0, 2.5):
        probs = softmax(logits, temperature)
        assert np.allclose(softmax(logits[perm], temperature), probs[perm], atol=1e-12)
        assert np.allclose(softmax(logits + 17.5, temperature), probs, atol=1e-12)


def test_sample_token_greedy_without_rng():
    assert sample_token(np.array([0.0, 2.0, 1.0]), 1.0, None) == 1
    draws = {sample_token(np.array([0.0, 0.0]), 1.0, make_rng(s)) for s in range(30)}
    assert draws == {0, 1}


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -3.0])}
    new, state = adam_step(params, grads, AdamState.zeros_like(params), 1, lr=0.1)
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(new["w"], [0.9, -1.9], atol=1e-6)
    assert np.allclose(state.m["w"], 0.1 * grads["w"])
    assert params["w"].tolist() == [1.0, -2.0]


def test_adam_single_step_by_hand():
    params = {"w": np.array([0.0])}
    new, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.zeros_like(params), 1, lr=0.1)
    m_hat = (0.1 * 1.0) / (1.0 - 0.9)
    v_hat = (0.001 * 1.0) / (1.0 - 0.999)
    expected = 0.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(new["w"][0] - expected) < 1e-12


def test_adam_zero_gradient():
    params = {"w": np.array([1.5, -0.5])}
    zero = {"w": np.zeros(2)}
    new, state = adam_step(params, zero, AdamState.zeros_like(params), 1, lr=0.1)
    assert new["w"].tolist() == [1.5, -0.5]
    assert not state.m["w"].any() and not state.v["w"].any()

    warm = AdamState(m={"w": np.array([0.2, -0.4])}, v={"w": np.array([0.01, 0.04])})
    _, decayed = adam_step(params, zero, warm, 3, lr=0.1)
    assert np.allclose(decayed.m["w"], 0.9 * warm.m["w"], rtol=0.0, atol=1e-15)
    assert np.allclose(decayed.v["w"], 0.999 * warm.v["w"], rtol=0.0, atol=1e-15)


def test_adam_identical_params_stay_identical():
    params = {"a": np.array([0.3, -1.2]), "b": np.array([0.3, -1.2])}
    state = AdamState.zeros_like(params)
    rng = make_rng(2)
    for step in range(1, 25):
        g = rng.standard_normal(2)
        params, state = adam_step(params, {"a": g, "b": g.copy()}, state, step, lr=0.05)
    assert np.array_equal(params["a"], params["b"])


def test_adam_rejects_mismatch():
    params = {"w": np.zeros(2)}
    with pytest.raises(InvalidArgumentError):
        adam_step(params, {"v": np.zeros(2)}, AdamState.zeros_like(params), 1, 0.1)
    with pytest.raises(InvalidArgumentError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.zeros_like(params), 1, 0.1)
    with pytest.raises(InvalidArgumentError):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros_like(params), 0, 0.1)


def test_streams_are_reproducible_and_distinct():
    a = spawn_rng(4, 1).standard_normal(5)
    assert np.array_equal(a, spawn_rng(4, 1).standard_normal(5))
    assert not np.array_equal(a, spawn_rng(4, 2).standard_normal(5))
    assert derive_seed(4, 1) == derive_seed(4, 1) != derive_seed(4, 2)


def test_spectral_norm_of_diagonal():
    m = np.diag([0.5, 3.0, 1.0])
    assert abs(spectral_norm(m, make_rng(0)) - 3.0) < 1e-8


def test_quantize_is_idempotent():
    a = make_rng(0).standard_normal(50)
    once = quantize(a)
    assert np.array_equal(once, quantize(once))
    assert np.max(np.abs(once - a)) < 1e-6


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-6) == pytest.approx(1e-2)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
