"""
Keyword Judge
Programmatic stand-in for an LLM judge of strategy steering

A judge compares a steered continuation with the baseline continuation of the
same prefix and returns 1 when the steered one shows the target strategy more
explicitly. Only generated suffixes are inspected; the shared prefix would
add the same count to both sides.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

from backend.errors import InvalidArgumentError
from backend.toylm import StrategySpec, Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Judgment:
    value: int
    baseline_count: int
    steered_count: int


def count_keywords(tokens: Sequence[int], strategy: StrategySpec) -> int:
    return sum(1 for t in tokens if strategy.is_keyword(t))


def keyword_judge(
    baseline: Trajectory,
    steered: Trajectory,
    strategy: StrategySpec,
    m_min: int = 3,
) -> Judgment:
    """1 iff the steered suffix has more strategy keywords than the baseline and at least m_min"""
    if m_min < 0:
        raise InvalidArgumentError(f"m_min must be non-negative, got {m_min}")
    if len(baseline.generated) != len(steered.generated):
        raise InvalidArgumentError(
            f"generated lengths differ: baseline {len(baseline.generated)}, "
            f"steered {len(steered.generated)}"
        )
    base = count_keywords(baseline.generated, strategy)
    steer = count_keywords(steered.generated, strategy)
    value = int(steer > base and steer >= m_min)
    return Judgment(value=value, baseline_count=base, steered_count=steer)


def majority_vote(judgments: Sequence[int]) -> int:
    if len(judgments) == 0 or len(judgments) % 2 == 0:
        raise InvalidArgumentError(f"majority vote needs an odd, non-empty list, got {len(judgments)}")
    if any(j not in (0, 1) for j in judgments):
        raise InvalidArgumentError("judgments must be binary")
    return int(2 * sum(judgments) > len(judgments))


class KeywordJudge:
    """Callable judge with a fixed m_min; the pipeline accepts any object with this call signature"""

    def __init__(self, m_min: int = 3):
        if m_min < 0:
            raise InvalidArgumentError(f"m_min must be non-negative, got {m_min}")
        self.m_min = m_min

    def __call__(self, baseline: Trajectory, steered: Trajectory, strategy: StrategySpec) -> Judgment:
        return keyword_judge(baseline, steered, strategy, self.m_min)

    def __repr__(self) -> str:
        return f"KeywordJudge(m_min={self.m_min})"


class JudgePanel:
    """Several judges voting on every comparison; the reported counts come from the first member"""

    def __init__(self, judges: List):
        if len(judges) == 0 or len(judges) % 2 == 0:
            raise InvalidArgumentError(f"a judge panel needs an odd number of members, got {len(judges)}")
        self.judges = list(judges)

    @classmethod
    def from_thresholds(cls, thresholds: Sequence[int]) -> "JudgePanel":
        return cls([KeywordJudge(m) for m in thresholds])

    def __call__(self, baseline: Trajectory, steered: Trajectory, strategy: StrategySpec) -> Judgment:
        votes = [judge(baseline, steered, strategy) for judge in self.judges]
        value = majority_vote([v.value for v in votes])
        logger.debug("panel votes for %s: %s -> %d", strategy.name, [v.value for v in votes], value)
        return Judgment(value=value, baseline_count=votes[0].baseline_count, steered_count=votes[0].steered_count)

    def __repr__(self) -> str:
        return f"JudgePanel({self.judges!r})"
