"""
Error Correction Harness
Flawed toy reasoning prefixes and the arms that try to correct them

A problem's prefix is generated while the wrong strategy is active and ends
with ANSWER-MARKER followed by that strategy's answer token. The carried
residual also holds a cue for the problem's target strategy s*; the cue is
invisible to the unembedding and only a router reading the final activation
can use it. Every arm appends WAIT and keeps generating; the problem counts as
corrected when the first answer emitted after a new ANSWER-MARKER is answer(s*).
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from backend.errors import InvalidArgumentError
from backend.identify import Selection
from backend.numerics import Vector, make_rng
from backend.router import RouterParams, RouterTrainingPair, route_index
from backend.sae import SaeParams, feature
from backend.steering import SteeringConfig, steer_generate
from backend.toylm import (
    ANSWER_MARKER,
    BOS,
    WAIT,
    ToyLM,
    Trajectory,
    extend,
    generate,
)

logger = logging.getLogger(__name__)

BUDGET_FORCE = "budget_force"
TRAINED_ROUTER = "trained_router"
ORACLE_ROUTER = "oracle_router"


@dataclass
class ToyProblem:
    prefix: Trajectory
    target_strategy: int
    wrong_strategy: int
    correct_answer: int
    cue: Vector

    def __post_init__(self):
        if self.wrong_strategy == self.target_strategy:
            raise InvalidArgumentError("a problem's prefix strategy must differ from its target")


@dataclass
class CorrectionResult:
    method: str
    corrected: bool
    answer: Optional[int]
    length: int
    routed_strategy: Optional[int] = None


@dataclass
class SteeringCandidate:
    strategy_id: int
    feature_id: int
    feature: Vector
    alpha: float


def build_pool(selection: Selection, sae: SaeParams) -> List[SteeringCandidate]:
    """Selected features as steering candidates, strategy by strategy in rank order"""
    return [
        SteeringCandidate(
            strategy_id=e.strategy_id,
            feature_id=e.feature_id,
            feature=feature(sae, e.feature_id),
            alpha=e.alpha,
        )
        for e in selection.pool()
    ]


def make_problem_set(
    lm: ToyLM,
    count: int,
    seed: int,
    prefix_length: int = 32,
    problem_alpha: float = 6.0,
    cue_amplitude: float = 1.0,
    temperature: float = 1.0,
) -> List[ToyProblem]:
    """
    Seeded problems with balanced targets; each prefix is sampled under the
    wrong strategy's direction and closed with its (wrong) answer
    """
    if count < 1:
        raise InvalidArgumentError(f"count must be at least 1, got {count}")
    if lm.n_strategies < 2:
        raise InvalidArgumentError("problems need at least two strategies")
    if prefix_length < 2:
        raise InvalidArgumentError(f"prefix_length must be at least 2, got {prefix_length}")

    rng = make_rng(seed)
    targets = rng.permutation(np.arange(count) % lm.n_strategies)
    problems = []
    for target in targets:
        target = int(target)
        others = [s for s in range(lm.n_strategies) if s != target]
        wrong = int(others[rng.integers(len(others))])
        cue = cue_amplitude * lm.cue_dirs[target]
        draft = generate(
            lm, Trajectory(tokens=[BOS]), prefix_length - 1,
            temperature=temperature,
            injection=(lm.strategy_dirs[wrong], problem_alpha),
            rng=rng,
            capture=True,
            planted=cue,
        )
        closed = extend(lm, draft, [ANSWER_MARKER, lm.strategy(wrong).answer_token], rng=rng, planted=cue)
        prefix = Trajectory(tokens=closed.tokens, activations=closed.activations, prompt_len=len(closed.tokens))
        problems.append(ToyProblem(
            prefix=prefix,
            target_strategy=target,
            wrong_strategy=wrong,
            correct_answer=lm.strategy(target).answer_token,
            cue=cue,
        ))
    logger.info("made %d problems, targets %s", count, dict(sorted(Counter(int(t) for t in targets).items())))
    return problems


def first_answer(tokens: Sequence[int], answer_tokens: Sequence[int]) -> Optional[int]:
    """Answer token that directly follows the first ANSWER-MARKER that is followed by one"""
    answers = set(answer_tokens)
    for i in range(len(tokens) - 1):
        if tokens[i] == ANSWER_MARKER and tokens[i + 1] in answers:
            return int(tokens[i + 1])
    return None


def _outcome(lm: ToyLM, problem: ToyProblem, continuation: Trajectory, method: str,
             routed_strategy: Optional[int] = None) -> CorrectionResult:
    answer = first_answer(continuation.generated, lm.answer_tokens)
    return CorrectionResult(
        method=method,
        corrected=answer == problem.correct_answer,
        answer=answer,
        length=len(continuation),
        routed_strategy=routed_strategy,
    )


def _continue(
    lm: ToyLM,
    problem: ToyProblem,
    horizon: int,
    candidate: Optional[SteeringCandidate] = None,
) -> Trajectory:
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be at least 1, got {horizon}")
    waited = extend(lm, problem.prefix, [WAIT], planted=problem.cue)
    start = len(waited.tokens)
    answer_tokens = lm.answer_tokens

    def answered(tokens: List[int]) -> bool:
        return first_answer(tokens[start:], answer_tokens) is not None

    if candidate is None:
        return generate(lm, waited, horizon, planted=problem.cue, stop=answered)
    config = SteeringConfig(candidate.feature, candidate.alpha, horizon)
    return steer_generate(lm, waited, config, planted=problem.cue, stop=answered)


def budget_force(lm: ToyLM, problem: ToyProblem, horizon: int = 128) -> CorrectionResult:
    """Append WAIT and continue without intervention"""
    return _outcome(lm, problem, _continue(lm, problem, horizon), BUDGET_FORCE)


class OracleRouter:
    """Always picks the highest-ranked pool feature of the problem's target strategy"""

    def select(self, problem: ToyProblem, pool: Sequence[SteeringCandidate]) -> int:
        for index, candidate in enumerate(pool):
            if candidate.strategy_id == problem.target_strategy:
                return index
        raise InvalidArgumentError(f"pool has no feature for strategy {problem.target_strategy}")


Router = Union[RouterParams, OracleRouter]


def choose_candidate(router: Router, problem: ToyProblem, pool: Sequence[SteeringCandidate]) -> int:
    if len(pool) == 0:
        raise InvalidArgumentError("the steering pool is empty")
    if isinstance(router, OracleRouter):
        return router.select(problem, pool)
    return route_index(router, problem.prefix.final_activation, [c.feature for c in pool])


def steered_correct(
    lm: ToyLM,
    problem: ToyProblem,
    router: Router,
    pool: Sequence[SteeringCandidate],
    horizon: int = 128,
    method: Optional[str] = None,
) -> CorrectionResult:
    """Route on the flawed prefix's final activation, then steer the continuation after WAIT"""
    candidate = pool[choose_candidate(router, problem, pool)]
    if method is None:
        method = ORACLE_ROUTER if isinstance(router, OracleRouter) else TRAINED_ROUTER
    continuation = _continue(lm, problem, horizon, candidate)
    return _outcome(lm, problem, continuation, method, routed_strategy=candidate.strategy_id)


def correction_rate(results: Sequence[CorrectionResult]) -> Dict[str, float]:
    """Corrected share per method label"""
    if not results:
        raise InvalidArgumentError("no correction results")
    totals: Counter = Counter()
    corrected: Counter = Counter()
    for r in results:
        totals[r.method] += 1
        corrected[r.method] += int(r.corrected)
    return {method: corrected[method] / totals[method] for method in sorted(totals)}


def routing_accuracy(router: Router, problems: Sequence[ToyProblem], pool: Sequence[SteeringCandidate]) -> float:
    """Share of problems routed to a feature of their target strategy"""
    if not problems:
        raise InvalidArgumentError("no problems to route")
    hits = sum(
        1 for p in problems if pool[choose_candidate(router, p, pool)].strategy_id == p.target_strategy
    )
    return hits / len(problems)


def build_router_pairs(
    lm: ToyLM,
    problems: Sequence[ToyProblem],
    pool: Sequence[SteeringCandidate],
    horizon: int = 128,
) -> List[RouterTrainingPair]:
    """
    Steer every problem with every pool feature. Features that correct it are
    positives, the others negatives; one pair per positive.
    """
    if len(pool) < 2:
        raise InvalidArgumentError("router pairs need a pool of at least two features")
    pairs = []
    skipped = 0
    for problem in problems:
        outcomes = [
            _outcome(lm, problem, _continue(lm, problem, horizon, c), "pair-mining").corrected for c in pool
        ]
        positives = [c for c, ok in zip(pool, outcomes) if ok]
        negatives = [c.feature for c, ok in zip(pool, outcomes) if not ok]
        if not positives or not negatives:
            skipped += 1
            continue
        for c in positives:
            pairs.append(RouterTrainingPair(
                context_activation=problem.prefix.final_activation,
                positive_feature=c.feature,
                negative_features=negatives,
            ))
    logger.info("built %d router pairs from %d problems (%d without contrast)", len(pairs), len(problems), skipped)
    return pairs


def run_arms(
    lm: ToyLM,
    problems: Sequence[ToyProblem],
    pool: Sequence[SteeringCandidate],
    router: Optional[RouterParams],
    horizon: int = 128,
) -> List[CorrectionResult]:
    """Budget forcing, trained-router and oracle-router arms on the same problems"""
    results = []
    oracle = OracleRouter()
    for problem in problems:
        results.append(budget_force(lm, problem, horizon))
        if router is not None:
            results.append(steered_correct(lm, problem, router, pool, horizon))
        results.append(steered_correct(lm, problem, oracle, pool, horizon))
    rates = correction_rate(results)
    logger.info("correction rates: %s", rates)
    return results
