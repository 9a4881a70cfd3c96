"""
Test script for the keyword judge and majority voting
Hand-built suffixes plus planted steering runs on the toy model
"""

import pytest

from backend.errors import InvalidArgumentError
from backend.judge import JudgePanel, KeywordJudge, keyword_judge, majority_vote
from backend.steering import SteeringConfig, steer_generate
from backend.toylm import StrategySpec, Trajectory, generate, planted_directions, sample_prefixes

SPEC = StrategySpec(id=0, name="backtracking", keywords=(10, 11, 12), answer_token=3)
PREFIX = [0, 10, 10, 10]


def _traj(suffix):
    return Trajectory(tokens=PREFIX + list(suffix), prompt_len=len(PREFIX))


def test_identical_continuations_judged_zero():
    t = _traj([40, 10, 41, 11])
    assert keyword_judge(t, t, SPEC, 1).value == 0


def test_boundary_at_m_min():
    j = keyword_judge(_traj([40, 41, 42, 43]), _traj([10, 11, 12, 43]), SPEC, 3)
    assert (j.value, j.baseline_count, j.steered_count) == (1, 0, 3)
    assert keyword_judge(_traj([40, 41, 42, 43]), _traj([10, 11, 42, 43]), SPEC, 3).value == 0


def test_prefix_keywords_are_ignored():
    j = keyword_judge(_traj([40, 41]), _traj([40, 41]), SPEC, 0)
    assert j.baseline_count == j.steered_count == 0


def test_length_mismatch_rejected():
    with pytest.raises(InvalidArgumentError):
        keyword_judge(_traj([40, 41]), _traj([40]), SPEC, 3)


def test_swap_never_gives_two_ones():
    suffixes = [[10, 10, 10, 40], [11, 40, 41, 42], [10, 11, 12, 12], [40, 41, 42, 43]]
    for a in suffixes:
        for b in suffixes:
            forward = keyword_judge(_traj(a), _traj(b), SPEC, 1).value
            backward = keyword_judge(_traj(b), _traj(a), SPEC, 1).value
            assert forward + backward <= 1


def test_more_keywords_never_flip_to_zero():
    baseline = _traj([40, 41, 42, 43, 44, 45])
    steered = [10, 11, 12, 43, 44, 45]
    assert keyword_judge(baseline, _traj(steered), SPEC, 3).value == 1
    for i in range(3, 6):
        steered[i] = 10
        assert keyword_judge(baseline, _traj(steered), SPEC, 3).value == 1


def test_majority_vote():
    assert majority_vote([1, 1, 0]) == 1
    assert majority_vote([0, 0, 1]) == 0
    assert majority_vote([1]) == 1
    with pytest.raises(InvalidArgumentError):
        majority_vote([1, 0])
    with pytest.raises(InvalidArgumentError):
        majority_vote([])


def test_panel_votes_across_thresholds():
    baseline = _traj([40, 41, 42, 43])
    steered = _traj([10, 11, 42, 43])        # two keywords
    panel = JudgePanel.from_thresholds([1, 2, 5])
    assert panel(baseline, steered, SPEC).value == 1
    assert JudgePanel.from_thresholds([2, 3, 5])(baseline, steered, SPEC).value == 0
    assert KeywordJudge(2)(baseline, steered, SPEC).value == 1
    with pytest.raises(InvalidArgumentError):
        JudgePanel([KeywordJudge(1), KeywordJudge(2)])


def test_planted_injections_are_recognized(lm):
    """Steering along g_s for 64 tokens is judged as strategy s, and only as s"""
    directions = planted_directions(lm)
    prefixes = sample_prefixes(lm, 100, 8, seed=21)
    judges = [KeywordJudge(3), JudgePanel.from_thresholds([2, 3, 4])]
    agreed = {repr(judge): 0 for judge in judges}
    for i, prefix in enumerate(prefixes):
        target = i % lm.n_strategies
        baseline = generate(lm, prefix, 64)
        steered = steer_generate(lm, prefix, SteeringConfig(feature=directions[target], alpha=6.0, horizon=64))
        for judge in judges:
            verdicts = [judge(baseline, steered, spec).value for spec in lm.strategies]
            expected = [int(spec.id == target) for spec in lm.strategies]
            agreed[repr(judge)] += verdicts == expected
    for name, count in agreed.items():
        assert count >= 95, f"{name} agreed on {count} of 100 runs"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
