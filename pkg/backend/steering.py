"""
Feature Steering
Injection of a feature direction at the hook point, repetition detection and
the steering-strength search

Steering adds α·f to the hook-point activation of every generated position.
The strength is chosen per feature: start high, and step α down by one while
the steered continuation degenerates into a loop.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from backend.errors import InvalidArgumentError
from backend.numerics import Matrix, Rng, Vector, as_matrix, as_vector
from backend.toylm import HOOK_POINT, StrategySpec, ToyLM, Trajectory, generate

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_START = 15.0


@dataclass
class SteeringConfig:
    feature: Vector
    alpha: float
    horizon: int
    hook_point: str = HOOK_POINT

    def __post_init__(self):
        self.feature = as_vector(self.feature, name="feature")
        if self.alpha < 0:
            raise InvalidArgumentError(f"alpha must be non-negative, got {self.alpha}")
        if self.horizon < 1:
            raise InvalidArgumentError(f"horizon must be at least 1, got {self.horizon}")


@dataclass(frozen=True)
class RepetitionRule:
    """A block of min_gram or more tokens repeated min_repeats times back to back"""
    min_gram: int = 3
    min_repeats: int = 3

    def __post_init__(self):
        if self.min_gram < 1 or self.min_repeats < 2:
            raise InvalidArgumentError(
                f"need min_gram >= 1 and min_repeats >= 2, got {self.min_gram}, {self.min_repeats}"
            )


def steer_generate(
    lm: ToyLM,
    prefix: Trajectory,
    config: SteeringConfig,
    temperature: float = 0.0,
    rng: Optional[Rng] = None,
    capture: bool = False,
    planted: Optional[Vector] = None,
    stop: Optional[Callable[[List[int]], bool]] = None,
) -> Trajectory:
    if config.hook_point != lm.hook_point:
        raise InvalidArgumentError(f"model has no hook point '{config.hook_point}'")
    if config.feature.shape[0] != lm.n_dim:
        raise InvalidArgumentError(f"feature has dim {config.feature.shape[0]}, expected {lm.n_dim}")
    return generate(
        lm, prefix, config.horizon,
        temperature=temperature,
        injection=(config.feature, config.alpha),
        rng=rng,
        capture=capture,
        planted=planted,
        stop=stop,
    )


def has_consecutive_repeat(tokens: Sequence[int], rule: RepetitionRule) -> bool:
    """True iff some block of length ≥ min_gram occurs min_repeats times in a row"""
    tokens = list(tokens)
    n = len(tokens)
    r = rule.min_repeats
    for length in range(rule.min_gram, n // r + 1):
        for start in range(0, n - length * r + 1):
            block = tokens[start:start + length]
            if all(tokens[start + j * length:start + (j + 1) * length] == block for j in range(1, r)):
                return True
    return False


def is_repetitive(traj: Trajectory, rule: RepetitionRule) -> bool:
    """Loop detection on the generated suffix only"""
    if len(traj.tokens) < rule.min_gram:
        raise InvalidArgumentError(
            f"trajectory of {len(traj.tokens)} tokens is shorter than min_gram {rule.min_gram}"
        )
    return has_consecutive_repeat(traj.generated, rule)


def decrement_search(alpha_start: float, degenerate: Callable[[float], bool]) -> Tuple[float, List[float]]:
    """
    Step α down by one from alpha_start while degenerate(α) holds and α > 0

    Returns the final α and every α that was tried, in order. α never goes
    below 0.
    """
    if alpha_start < 1:
        raise InvalidArgumentError(f"alpha_start must be at least 1, got {alpha_start}")
    alpha = float(alpha_start)
    tried = [alpha]
    while degenerate(alpha) and alpha > 0:
        alpha = max(alpha - 1.0, 0.0)
        tried.append(alpha)
    return alpha, tried


def search_alpha_per_prefix(
    lm: ToyLM,
    feature: Vector,
    prefixes: Sequence[Trajectory],
    alpha_start: float = DEFAULT_ALPHA_START,
    rule: RepetitionRule = RepetitionRule(),
    horizon: int = 64,
) -> List[float]:
    if not prefixes:
        raise InvalidArgumentError("alpha search needs at least one validation prefix")
    feature = as_vector(feature, lm.n_dim, "feature")
    chosen = []
    for index, prefix in enumerate(prefixes):
        def degenerate(alpha: float) -> bool:
            steered = steer_generate(lm, prefix, SteeringConfig(feature, alpha, horizon))
            return is_repetitive(steered, rule)

        alpha, tried = decrement_search(alpha_start, degenerate)
        logger.debug("prefix %d: alpha trace %s", index, tried)
        chosen.append(alpha)
    return chosen


def search_alpha(
    lm: ToyLM,
    feature: Vector,
    prefixes: Sequence[Trajectory],
    alpha_start: float = DEFAULT_ALPHA_START,
    rule: RepetitionRule = RepetitionRule(),
    horizon: int = 64,
) -> float:
    """Mean over validation prefixes of the α each one settles on"""
    return float(np.mean(search_alpha_per_prefix(lm, feature, prefixes, alpha_start, rule, horizon)))


def logit_delta_oracle(u: Matrix, feature: Vector, alpha: float) -> Vector:
    """α·Uᵀ·f, the exact logit change an injection causes at one position"""
    u = as_matrix(u, "u")
    feature = as_vector(feature, u.shape[0], "feature")
    return alpha * (u.T @ feature)


def keyword_logit_bias(lm: ToyLM, strategy: StrategySpec, beta: float) -> Vector:
    """+β on every keyword logit of the strategy, 0 elsewhere"""
    bias = np.zeros(lm.vocab)
    bias[list(strategy.keywords)] = beta
    return bias


def logit_boost_generate(
    lm: ToyLM,
    prefix: Trajectory,
    strategy: StrategySpec,
    beta: float,
    horizon: int,
    temperature: float = 0.0,
    rng: Optional[Rng] = None,
) -> Trajectory:
    """Baseline intervention: bias keyword logits directly, residual stream untouched"""
    return generate(
        lm, prefix, horizon,
        temperature=temperature,
        rng=rng,
        logit_bias=keyword_logit_bias(lm, strategy, beta),
    )
