"""
Strategy Feature Identification
Two-stage search for SAE features that steer a reasoning strategy

Stage 1 (recall) is a logit-lens filter: project every decoder column through
the unembedding and keep features whose highest-contribution tokens include
enough strategy keywords, each above a threshold. Stage 2 (ranking) steers
with every recalled feature on held-out prefixes and scores it by the share
of prefixes where the judge prefers the steered continuation.
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from backend.errors import InvalidArgumentError
from backend.judge import Judgment
from backend.numerics import Matrix, Vector, as_matrix
from backend.sae import SaeParams, encode_batch, feature
from backend.steering import (
    DEFAULT_ALPHA_START,
    RepetitionRule,
    SteeringConfig,
    search_alpha_per_prefix,
    steer_generate,
)
from backend.toylm import StrategySpec, ToyLM, Trajectory, generate

logger = logging.getLogger(__name__)

Judge = Callable[[Trajectory, Trajectory, StrategySpec], Judgment]


# ---------------------------------------------------------------------------
# Keywords
# ---------------------------------------------------------------------------

@dataclass
class KeywordTable:
    """Per strategy, (token, count) pairs by decreasing count"""
    entries: Dict[int, List[Tuple[int, int]]]
    top_n: int

    def tokens(self, strategy_id: int) -> List[int]:
        return [token for token, _ in self.entries.get(strategy_id, [])]

    def token_sets(self) -> Dict[int, frozenset]:
        return {s: frozenset(self.tokens(s)) for s in self.entries}

    def to_dict(self) -> Dict:
        return {
            "top_n": self.top_n,
            "entries": {str(s): [[t, c] for t, c in pairs] for s, pairs in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "KeywordTable":
        return cls(
            entries={int(s): [(int(t), int(c)) for t, c in pairs] for s, pairs in data["entries"].items()},
            top_n=int(data["top_n"]),
        )


def group_segments(
    segments: Sequence[Tuple[Optional[int], Sequence[int]]],
    n_strategies: int,
) -> Dict[int, List[int]]:
    """Concatenate the tokens of every labeled segment by strategy; unlabeled segments are dropped"""
    corpus: Dict[int, List[int]] = {s: [] for s in range(n_strategies)}
    for label, tokens in segments:
        if label is None:
            continue
        if label not in corpus:
            raise InvalidArgumentError(f"segment label {label} outside [0, {n_strategies})")
        corpus[label].extend(tokens)
    return corpus


def extract_keywords(
    corpus: Mapping[int, Sequence[int]],
    top_n: int = 20,
    stop_tokens: Sequence[int] = (),
) -> KeywordTable:
    """Most frequent tokens per strategy, stop tokens excluded, ties to the lowest token id"""
    if top_n < 1:
        raise InvalidArgumentError(f"top_n must be at least 1, got {top_n}")
    stop = set(stop_tokens)
    entries = {}
    for strategy_id, tokens in sorted(corpus.items()):
        if len(tokens) == 0:
            raise InvalidArgumentError(f"empty corpus for strategy {strategy_id}")
        counts = Counter(t for t in tokens if t not in stop)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        entries[strategy_id] = ranked[:top_n]
    return KeywordTable(entries=entries, top_n=top_n)


def curate_keywords(table: KeywordTable, strategies: Sequence[StrategySpec]) -> KeywordTable:
    """Keep only extracted tokens that are planted keywords of their strategy"""
    by_id = {spec.id: spec for spec in strategies}
    entries = {}
    for strategy_id, pairs in table.entries.items():
        spec = by_id.get(strategy_id)
        if spec is None:
            raise InvalidArgumentError(f"no strategy spec for id {strategy_id}")
        entries[strategy_id] = [(t, c) for t, c in pairs if spec.is_keyword(t)]
    return KeywordTable(entries=entries, top_n=table.top_n)


# ---------------------------------------------------------------------------
# Stage 1: logit-lens recall
# ---------------------------------------------------------------------------

@dataclass
class CandidateFeature:
    feature_id: int
    strategy_id: int
    top_tokens: List[int]
    contributions: List[float]
    matched_keywords: List[int]


@dataclass
class CandidateSet:
    per_strategy: Dict[int, List[CandidateFeature]]
    total_features: int

    @property
    def feature_ids(self) -> List[int]:
        return sorted({c.feature_id for cands in self.per_strategy.values() for c in cands})

    @property
    def recall_fraction(self) -> float:
        if self.total_features == 0:
            return 0.0
        return len(self.feature_ids) / self.total_features

    def pairs(self) -> List[Tuple[int, int]]:
        """(strategy id, feature id) for every candidate"""
        return sorted((s, c.feature_id) for s, cands in self.per_strategy.items() for c in cands)

    def is_empty(self) -> bool:
        return not any(self.per_strategy.values())

    def counts(self) -> Dict[int, int]:
        return {s: len(cands) for s, cands in self.per_strategy.items()}

    def to_dict(self) -> Dict:
        return {
            "total_features": self.total_features,
            "recall_fraction": self.recall_fraction,
            "per_strategy": {
                str(s): [asdict(c) for c in cands] for s, cands in sorted(self.per_strategy.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CandidateSet":
        return cls(
            per_strategy={
                int(s): [CandidateFeature(**c) for c in cands] for s, cands in data["per_strategy"].items()
            },
            total_features=int(data["total_features"]),
        )


def logit_contribution_matrix(w_dec: Matrix, u: Matrix) -> Matrix:
    """L = W_decᵀ·U; row i holds feature i's contribution to every vocabulary logit"""
    w_dec = as_matrix(w_dec, "w_dec")
    u = as_matrix(u, "u")
    if w_dec.shape[0] != u.shape[0]:
        raise InvalidArgumentError(f"w_dec has {w_dec.shape[0]} rows but u has {u.shape[0]}")
    return w_dec.T @ u


def top_tokens(contributions: Matrix, top_m: int) -> np.ndarray:
    """Per row, the top_m column indices by decreasing value, lowest index first on ties"""
    return np.argsort(-contributions, axis=1, kind="stable")[:, :min(top_m, contributions.shape[1])]


def _candidate(contributions: Matrix, feature_id: int, strategy_id: int, order: np.ndarray,
               matched: List[int]) -> CandidateFeature:
    row = contributions[feature_id]
    return CandidateFeature(
        feature_id=feature_id,
        strategy_id=strategy_id,
        top_tokens=[int(t) for t in order],
        contributions=[float(row[t]) for t in order],
        matched_keywords=matched,
    )


def recall_stage1(
    contributions: Matrix,
    keywords: KeywordTable,
    n: int = 2,
    tau: float = 0.1,
    top_m: int = 10,
) -> CandidateSet:
    """
    Recall feature i for strategy s iff at least n of its top_m tokens are
    keywords of s and every matched keyword contributes more than tau

    A feature can be recalled for several strategies.
    """
    if n < 1:
        raise InvalidArgumentError(f"n must be at least 1, got {n}")
    if top_m < n:
        raise InvalidArgumentError(f"top_m ({top_m}) must be at least n ({n})")
    contributions = as_matrix(contributions, "contributions")
    orders = top_tokens(contributions, top_m)
    keyword_sets = keywords.token_sets()

    per_strategy: Dict[int, List[CandidateFeature]] = {s: [] for s in sorted(keyword_sets)}
    for feature_id, order in enumerate(orders):
        row = contributions[feature_id]
        for strategy_id, kw in sorted(keyword_sets.items()):
            matched = [int(t) for t in order if t in kw]
            if len(matched) >= n and all(row[t] > tau for t in matched):
                per_strategy[strategy_id].append(_candidate(contributions, feature_id, strategy_id, order, matched))

    result = CandidateSet(per_strategy=per_strategy, total_features=contributions.shape[0])
    logger.info(
        "stage 1 recalled %d of %d features (%.4f), per strategy %s",
        len(result.feature_ids), result.total_features, result.recall_fraction, result.counts(),
    )
    return result


# ---------------------------------------------------------------------------
# Activation-based recall (comparison baseline)
# ---------------------------------------------------------------------------

def reason_score(
    sae: SaeParams,
    activations: Matrix,
    tokens: Sequence[int],
    strategies: Sequence[StrategySpec],
) -> Matrix:
    """M×S: mean activation on keyword-token positions of s minus the mean elsewhere"""
    activations = as_matrix(activations, "activations")
    if len(tokens) != activations.shape[0]:
        raise InvalidArgumentError(f"{len(tokens)} tokens for {activations.shape[0]} activations")
    z, _, _ = encode_batch(sae, activations)
    tokens = np.asarray(tokens)
    scores = np.zeros((sae.m_dim, len(strategies)))
    for column, spec in enumerate(strategies):
        on_keyword = np.isin(tokens, spec.keywords)
        if on_keyword.all() or not on_keyword.any():
            logger.warning("strategy %s: keyword positions do not split the corpus, score left at 0", spec.name)
            continue
        scores[:, column] = z[on_keyword].mean(axis=0) - z[~on_keyword].mean(axis=0)
    return scores


def recall_by_reason_score(
    scores: Matrix,
    counts: Mapping[int, int],
    contributions: Matrix,
    keywords: KeywordTable,
    top_m: int = 10,
) -> CandidateSet:
    """Per strategy, the counts[s] highest-scoring features (ties to the lowest id)"""
    scores = as_matrix(scores, "scores")
    orders = top_tokens(contributions, top_m)
    keyword_sets = keywords.token_sets()
    per_strategy: Dict[int, List[CandidateFeature]] = {}
    for strategy_id, count in sorted(counts.items()):
        ranked = np.argsort(-scores[:, strategy_id], kind="stable")[:count]
        kw = keyword_sets.get(strategy_id, frozenset())
        per_strategy[strategy_id] = [
            _candidate(contributions, int(i), strategy_id, orders[i], [int(t) for t in orders[i] if t in kw])
            for i in ranked
        ]
    return CandidateSet(per_strategy=per_strategy, total_features=scores.shape[0])


# ---------------------------------------------------------------------------
# Stage 2: steering effectiveness
# ---------------------------------------------------------------------------

@dataclass
class FeatureEffectiveness:
    strategy_id: int
    feature_id: int
    alpha: float
    judgments: List[int]
    success_rate: float
    steered_counts: List[int] = field(default_factory=list)
    baseline_counts: List[int] = field(default_factory=list)


@dataclass
class EffectivenessReport:
    """Per strategy, evaluated features by decreasing success rate (lowest id first on ties)"""
    per_strategy: Dict[int, List[FeatureEffectiveness]]
    validation_size: int

    def entries(self) -> List[FeatureEffectiveness]:
        return [e for _, entries in sorted(self.per_strategy.items()) for e in entries]

    def to_dict(self) -> Dict:
        return {
            "validation_size": self.validation_size,
            "per_strategy": {
                str(s): [asdict(e) for e in entries] for s, entries in sorted(self.per_strategy.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EffectivenessReport":
        return cls(
            per_strategy={
                int(s): [FeatureEffectiveness(**e) for e in entries]
                for s, entries in data["per_strategy"].items()
            },
            validation_size=int(data["validation_size"]),
        )


def _sorted_entries(entries: List[FeatureEffectiveness]) -> List[FeatureEffectiveness]:
    return sorted(entries, key=lambda e: (-e.success_rate, e.feature_id))


def baseline_continuations(lm: ToyLM, validation: Sequence[Trajectory], horizon: int) -> List[Trajectory]:
    return [generate(lm, prefix, horizon) for prefix in validation]


def judge_continuations(
    baselines: Sequence[Trajectory],
    steered: Sequence[Trajectory],
    strategy: StrategySpec,
    judge: Judge,
) -> List[Judgment]:
    return [judge(base, steer, strategy) for base, steer in zip(baselines, steered)]


def evaluate_vector(
    lm: ToyLM,
    vector: Vector,
    alpha: float,
    validation: Sequence[Trajectory],
    baselines: Sequence[Trajectory],
    strategy: StrategySpec,
    judge: Judge,
    horizon: int,
) -> List[Judgment]:
    """Judge steering with α·vector on every validation prefix against its baseline"""
    config = SteeringConfig(vector, alpha, horizon)
    steered = [steer_generate(lm, prefix, config) for prefix in validation]
    return judge_continuations(baselines, steered, strategy, judge)


def rank_stage2(
    candidates: CandidateSet,
    sae: SaeParams,
    lm: ToyLM,
    validation: Sequence[Trajectory],
    judge: Judge,
    horizon: int = 64,
    alpha_start: float = DEFAULT_ALPHA_START,
    rule: RepetitionRule = RepetitionRule(),
) -> EffectivenessReport:
    """
    Steer with every candidate at its searched α and score it by the mean
    binary judgment over the validation prefixes

    α and the steered continuations depend only on the feature, so a feature
    recalled for several strategies is generated once and judged per strategy.
    """
    if not validation:
        raise InvalidArgumentError("stage 2 needs at least one validation prefix")
    if candidates.is_empty():
        raise InvalidArgumentError("stage 2 needs at least one candidate feature")

    baselines = baseline_continuations(lm, validation, horizon)
    steered_cache: Dict[int, Tuple[float, List[Trajectory]]] = {}

    def steered_for(feature_id: int) -> Tuple[float, List[Trajectory]]:
        if feature_id not in steered_cache:
            f = feature(sae, feature_id)
            alpha = search_alpha_per_prefix(lm, f, validation, alpha_start, rule, horizon)
            mean_alpha = float(np.mean(alpha))
            config = SteeringConfig(f, mean_alpha, horizon)
            steered_cache[feature_id] = (mean_alpha, [steer_generate(lm, p, config) for p in validation])
            logger.info("feature %d: alpha %.3f", feature_id, mean_alpha)
        return steered_cache[feature_id]

    per_strategy: Dict[int, List[FeatureEffectiveness]] = {}
    for strategy_id, cands in sorted(candidates.per_strategy.items()):
        strategy = lm.strategy(strategy_id)
        entries = []
        for cand in cands:
            alpha, steered = steered_for(cand.feature_id)
            judgments = judge_continuations(baselines, steered, strategy, judge)
            values = [j.value for j in judgments]
            entries.append(FeatureEffectiveness(
                strategy_id=strategy_id,
                feature_id=cand.feature_id,
                alpha=alpha,
                judgments=values,
                success_rate=sum(values) / len(values),
                steered_counts=[j.steered_count for j in judgments],
                baseline_counts=[j.baseline_count for j in judgments],
            ))
            logger.debug("strategy %s feature %d judgments %s", strategy.name, cand.feature_id, values)
        per_strategy[strategy_id] = _sorted_entries(entries)

    return EffectivenessReport(per_strategy=per_strategy, validation_size=len(validation))


@dataclass
class Selection:
    chosen: Dict[int, List[FeatureEffectiveness]]
    shortfall: List[int]            # strategies with fewer candidates than requested

    def feature_ids(self, strategy_id: int) -> List[int]:
        return [e.feature_id for e in self.chosen.get(strategy_id, [])]

    def pool(self) -> List[FeatureEffectiveness]:
        return [e for _, entries in sorted(self.chosen.items()) for e in entries]


def select_top(report: EffectivenessReport, per_strategy: int = 1) -> Selection:
    if per_strategy < 1:
        raise InvalidArgumentError(f"per_strategy must be at least 1, got {per_strategy}")
    chosen = {}
    shortfall = []
    for strategy_id, entries in sorted(report.per_strategy.items()):
        chosen[strategy_id] = _sorted_entries(entries)[:per_strategy]
        if len(entries) < per_strategy:
            shortfall.append(strategy_id)
    if shortfall:
        logger.warning("fewer than %d candidates for strategies %s", per_strategy, shortfall)
    return Selection(chosen=chosen, shortfall=shortfall)


@dataclass
class RecallPrecision:
    per_strategy: Dict[int, float]
    overall: float


def recall_precision(report: EffectivenessReport, threshold: float = 0.5) -> RecallPrecision:
    """Share of evaluated candidates whose success rate reaches the threshold"""
    per_strategy = {}
    hits = total = 0
    for strategy_id, entries in sorted(report.per_strategy.items()):
        good = sum(1 for e in entries if e.success_rate >= threshold)
        per_strategy[strategy_id] = good / len(entries) if entries else 0.0
        hits += good
        total += len(entries)
    return RecallPrecision(per_strategy=per_strategy, overall=hits / total if total else 0.0)
