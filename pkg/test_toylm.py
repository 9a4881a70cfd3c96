"""
Test script for the toy language model
Construction guarantees, hook semantics and corpus sampling
"""

import numpy as np
import pytest

from backend.errors import InvalidArgumentError
from backend.numerics import make_rng
from backend.toylm import (
    ANSWER_MARKER,
    BOS,
    Trajectory,
    activation_bound,
    alternating_schedule,
    build_toylm,
    extend,
    generate,
    planted_directions,
    prefill,
    readout,
    sample_prefixes,
    sample_strategy_corpus,
    step,
)


def test_build_is_deterministic(lm):
    again = build_toylm()
    for name in ("embed", "transition", "unembed", "strategy_dirs", "positions"):
        assert np.array_equal(getattr(lm, name), getattr(again, name))
    other = build_toylm(seed=1)
    assert not np.array_equal(lm.unembed, other.unembed)


def test_reserved_directions_orthonormal(lm):
    reserved = np.vstack([lm.strategy_dirs, lm.answer_dir[None, :], lm.cue_dirs])
    assert np.allclose(reserved @ reserved.T, np.eye(2 * lm.n_strategies + 1), atol=1e-10)


def test_transition_is_contractive(lm):
    assert lm.transition_norm < 1.0
    assert np.linalg.norm(lm.transition, 2) < 1.0


def test_keyword_columns_carry_strategy_direction(lm):
    for spec in lm.strategies:
        g = lm.strategy_dirs[spec.id]
        for w in spec.keywords:
            assert lm.unembed[:, w] @ g == pytest.approx(lm.keyword_gain, abs=1e-9)
        assert lm.unembed[:, spec.answer_token] @ lm.answer_dir == pytest.approx(lm.keyword_gain, abs=1e-9)
        other = lm.strategies[(spec.id + 1) % lm.n_strategies]
        assert lm.unembed[:, other.keywords[0]] @ g == pytest.approx(0.0, abs=1e-9)


def test_planted_directions_returns_copy(lm):
    g = planted_directions(lm)
    g[0, 0] += 1.0
    assert not np.array_equal(g, lm.strategy_dirs)
    with pytest.raises(ValueError):
        lm.strategy_dirs[0, 0] = 0.0


def test_injection_changes_logits_only(lm):
    x0 = np.zeros(lm.n_dim)
    v = lm.strategy_dirs[2]
    x_plain, logits_plain = step(lm, x0, BOS)
    x_steered, logits_steered = step(lm, x0, BOS, injection=(v, 3.0))
    assert np.array_equal(x_plain, x_steered)
    assert np.allclose(logits_steered - logits_plain, 3.0 * lm.unembed.T @ v, atol=1e-12)


def test_step_matches_definition(lm):
    x_prev = make_rng(0).standard_normal(lm.n_dim)
    x, logits = step(lm, x_prev, 17, position=4)
    expected = lm.transition @ x_prev + lm.embed[17] + lm.positions[4]
    assert np.allclose(x, expected, atol=1e-12)
    assert np.allclose(logits, readout(lm, expected), atol=1e-12)


def test_step_rejects_bad_input(lm):
    with pytest.raises(InvalidArgumentError):
        step(lm, np.zeros(lm.n_dim), lm.vocab)
    with pytest.raises(InvalidArgumentError):
        step(lm, np.zeros(lm.n_dim + 1), 0)
    with pytest.raises(InvalidArgumentError):
        step(lm, np.zeros(lm.n_dim), 0, injection=(np.zeros(3), 1.0))


def test_generate_resumes_from_prefix(lm):
    prefix = Trajectory(tokens=[BOS, 20, 30])
    full = generate(lm, prefix, 10, capture=True)
    assert full.prompt_len == 3
    assert len(full.generated) == 10
    assert np.allclose(full.activations[:3], prefill(lm, prefix.tokens))
    # the same continuation from a prefix that already carries activations
    captured = Trajectory(tokens=prefix.tokens, activations=prefill(lm, prefix.tokens))
    assert generate(lm, captured, 10).tokens == full.tokens


def test_generate_temperature_zero_is_deterministic(lm):
    prefix = Trajectory(tokens=[BOS])
    assert generate(lm, prefix, 40).tokens == generate(lm, prefix, 40).tokens


def test_generate_stop_callback(lm):
    out = generate(lm, Trajectory(tokens=[BOS]), 50, stop=lambda tokens: len(tokens) >= 6)
    assert len(out.tokens) == 6


def test_extend_keeps_activations_aligned(lm):
    base = generate(lm, Trajectory(tokens=[BOS]), 5, capture=True)
    longer = extend(lm, base, [ANSWER_MARKER, 3])
    assert longer.tokens[-2:] == [ANSWER_MARKER, 3]
    assert longer.activations.shape == (len(longer.tokens), lm.n_dim)
    assert np.allclose(longer.activations, prefill(lm, longer.tokens))


def test_activation_bound_holds(lm):
    bound = activation_bound(lm)
    traj = generate(lm, Trajectory(tokens=[BOS]), 10_000, temperature=1.0, rng=make_rng(3), capture=True)
    assert len(traj.generated) == 10_000
    assert np.all(np.isfinite(traj.activations))
    assert np.linalg.norm(traj.activations, axis=1).max() <= bound


def test_corpus_labels_and_signal(lm):
    schedule = alternating_schedule(lm.n_strategies, 2, 16)
    data, segments = sample_strategy_corpus(lm, schedule, seed=9)
    assert len(data) == len(data.tokens) == 2 * lm.n_strategies * 2 * 16
    assert [label for label, _ in segments] == [label for label, _ in schedule]
    proj = data.activations @ lm.strategy_dirs.T
    labels = np.array([-1 if l is None else l for l in data.labels])
    for s in range(lm.n_strategies):
        assert proj[labels == s, s].mean() >= proj[labels == -1, s].mean() + 2.0
        assert proj[labels == s, s].mean() > proj[labels != s, s].mean() + 1.0


def test_corpus_half_and_half_schedule(lm):
    data, _ = sample_strategy_corpus(lm, [(0, 50), (None, 50)], seed=2)
    assert len(data) == 100
    assert data.labels.count(0) == 50
    assert data.labels[50:] == [None] * 50
    only_none, _ = sample_strategy_corpus(lm, [(None, 20)], seed=2)
    assert only_none.labels == [None] * 20


def test_generate_rejects_empty_horizon(lm):
    with pytest.raises(InvalidArgumentError):
        generate(lm, Trajectory(tokens=[BOS]), 0)
    with pytest.raises(InvalidArgumentError):
        generate(lm, Trajectory(tokens=[BOS]), -3)
    with pytest.raises(InvalidArgumentError):
        generate(lm, Trajectory(tokens=[]), 4)



def test_corpus_rejects_bad_schedule(lm):
    with pytest.raises(InvalidArgumentError):
        sample_strategy_corpus(lm, [(0, 0)], seed=0)
    with pytest.raises(InvalidArgumentError):
        sample_strategy_corpus(lm, [(lm.n_strategies, 4)], seed=0)


def test_sample_prefixes(lm):
    prefixes = sample_prefixes(lm, 3, 32, seed=4)
    assert all(len(p) == 32 and p.prompt_len == 32 and p.generated == [] for p in prefixes)
    assert prefixes[0].tokens != prefixes[1].tokens
    assert sample_prefixes(lm, 3, 32, seed=4)[2].tokens == prefixes[2].tokens


def test_build_rejects_small_vocab():
    with pytest.raises(InvalidArgumentError):
        build_toylm(vocab=20)
    with pytest.raises(InvalidArgumentError):
        build_toylm(n_dim=8)
    with pytest.raises(InvalidArgumentError):
        build_toylm(leak=1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
