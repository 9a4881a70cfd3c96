"""
Toy Language Model
Analytically constructed decoder with planted strategy directions

The residual stream has a single hook point, immediately before the
unembedding. One generation step computes

    x_t      = A·x_{t-1} + E[token_t] + P[t] (+ noise) (+ planted signal)
    logits_t = Uᵀ·(x_t + α·v)        (α·v only when an injection is given)

The carried residual x_t never includes the injection: steering acts on the
readout of every generated position, exactly like a forward hook that edits
one layer's output. Planted signals (the strategy amplitudes of the training
corpus, the problem cues of the correction harness) are part of the carried
residual.

Every keyword column of strategy s in U carries c·g_s, so injecting g_s raises
exactly that strategy's keyword logits by α·c. Everything else (embeddings,
positions, the mixing part of A, the random part of U) lives in the orthogonal
complement of the reserved directions.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from backend.errors import InvalidArgumentError
from backend.numerics import (
    Matrix,
    Rng,
    Vector,
    gram_schmidt,
    make_rng,
    project_out,
    sample_token,
    spectral_norm,
)

logger = logging.getLogger(__name__)

BOS = 0
WAIT = 1
ANSWER_MARKER = 2
N_RESERVED_TOKENS = 3

HOOK_POINT = "resid_pre_unembed"

STRATEGY_NAMES = (
    "problem_understanding",
    "procedural_planning",
    "backtracking",
    "multi_perspective_verification",
    "hypothesis_reasoning",
)

Injection = Tuple[Vector, float]


@dataclass(frozen=True)
class StrategySpec:
    """One planted reasoning strategy: its keyword tokens and answer token"""
    id: int
    name: str
    keywords: Tuple[int, ...]
    answer_token: int

    def is_keyword(self, token: int) -> bool:
        return token in self.keywords


@dataclass(frozen=True, eq=False)
class ToyLM:
    """Immutable toy model; rebuild it from (config, seed), it is never serialized"""
    n_dim: int
    vocab: int
    embed: Matrix            # V×N
    transition: Matrix       # N×N
    unembed: Matrix          # N×V
    strategy_dirs: Matrix    # S×N, orthonormal rows g_s
    answer_dir: Vector       # h
    cue_dirs: Matrix         # S×N, problem-type cues q_s
    positions: Matrix        # max_positions×N
    keyword_gain: float
    leak: float
    noise_sigma: float
    transition_norm: float
    strategies: Tuple[StrategySpec, ...]
    hook_point: str = HOOK_POINT

    @property
    def n_strategies(self) -> int:
        return len(self.strategies)

    @property
    def max_positions(self) -> int:
        return self.positions.shape[0]

    @property
    def answer_tokens(self) -> Tuple[int, ...]:
        return tuple(s.answer_token for s in self.strategies)

    @property
    def control_tokens(self) -> Tuple[int, ...]:
        """Reserved tokens plus answer tokens; never counted as keywords"""
        return (BOS, WAIT, ANSWER_MARKER) + self.answer_tokens

    def strategy(self, strategy_id: int) -> StrategySpec:
        if not 0 <= strategy_id < self.n_strategies:
            raise InvalidArgumentError(f"unknown strategy id {strategy_id}")
        return self.strategies[strategy_id]

    def token_label(self, token: int) -> str:
        if token == BOS:
            return "<bos>"
        if token == WAIT:
            return "<wait>"
        if token == ANSWER_MARKER:
            return "<answer>"
        for spec in self.strategies:
            if token == spec.answer_token:
                return f"ans:{spec.name}"
            if token in spec.keywords:
                return f"kw:{spec.name}:{spec.keywords.index(token)}"
        return f"t{token}"


@dataclass
class Trajectory:
    """Token sequence with optional hook-point activations, one row per token"""
    tokens: List[int]
    activations: Optional[Matrix] = None
    prompt_len: int = 0

    def __post_init__(self):
        if self.activations is not None and len(self.activations) != len(self.tokens):
            raise InvalidArgumentError(
                f"{len(self.activations)} activations for {len(self.tokens)} tokens"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def generated(self) -> List[int]:
        return self.tokens[self.prompt_len:]

    @property
    def final_activation(self) -> Vector:
        if self.activations is None:
            raise InvalidArgumentError("trajectory was generated without capture")
        return self.activations[-1]


@dataclass
class LabeledActivationSet:
    """Hook-point activations with the strategy active when each was produced"""
    activations: Matrix                 # n×N
    labels: List[Optional[int]]
    tokens: List[int]                   # input token of each sample's position
    source_seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def samples(self) -> List[Tuple[Vector, Optional[int]]]:
        return list(zip(self.activations, self.labels))


def _strategy_specs(n_strategies: int, keyword_count: int) -> Tuple[StrategySpec, ...]:
    first_keyword = N_RESERVED_TOKENS + n_strategies
    specs = []
    for s in range(n_strategies):
        start = first_keyword + s * keyword_count
        name = STRATEGY_NAMES[s] if n_strategies <= len(STRATEGY_NAMES) else f"strategy_{s}"
        specs.append(StrategySpec(
            id=s,
            name=name,
            keywords=tuple(range(start, start + keyword_count)),
            answer_token=N_RESERVED_TOKENS + s,
        ))
    return tuple(specs)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def build_toylm(
    n_dim: int = 64,
    vocab: int = 96,
    n_strategies: int = 5,
    keyword_count_per_strategy: int = 5,
    keyword_gain: float = 4.0,
    leak: float = 0.8,
    noise_sigma: float = 0.05,
    seed: int = 0,
    mix_scale: float = 0.1,
    position_scale: float = 0.5,
    filler_scale: float = 2.0,
    keyword_base_scale: float = 0.25,
    max_positions: int = 2048,
) -> ToyLM:
    """Construct the toy model deterministically from its parameters and seed"""
    n_keywords = n_strategies * keyword_count_per_strategy
    if n_strategies < 1 or keyword_count_per_strategy < 1:
        raise InvalidArgumentError("need at least one strategy and one keyword per strategy")
    if n_keywords + N_RESERVED_TOKENS + n_strategies > vocab:
        raise InvalidArgumentError(
            f"vocab {vocab} cannot hold {n_keywords} keywords, "
            f"{n_strategies} answer tokens and {N_RESERVED_TOKENS} reserved tokens"
        )
    if 2 * n_strategies + 1 > n_dim:
        raise InvalidArgumentError(
            f"n_dim {n_dim} cannot hold {n_strategies} strategy, {n_strategies} cue "
            f"and one answer direction"
        )
    if not 0 < leak < 1:
        raise InvalidArgumentError(f"leak must be in (0, 1), got {leak}")
    if noise_sigma < 0 or keyword_gain <= 0 or max_positions < 1:
        raise InvalidArgumentError("noise_sigma >= 0, keyword_gain > 0 and max_positions >= 1 required")
    if leak + mix_scale >= 1:
        raise InvalidArgumentError(f"leak + mix_scale must stay below 1, got {leak + mix_scale}")

    rng = make_rng(seed)
    strategies = _strategy_specs(n_strategies, keyword_count_per_strategy)

    reserved = gram_schmidt(rng.standard_normal((2 * n_strategies + 1, n_dim)))
    g = reserved[:n_strategies]
    h = reserved[n_strategies]
    q = reserved[n_strategies + 1:]
    complement = np.eye(n_dim) - reserved.T @ reserved

    embed = project_out(rng.standard_normal((vocab, n_dim)), reserved)
    embed /= np.linalg.norm(embed, axis=1, keepdims=True)
    embed[ANSWER_MARKER] = h

    positions = project_out(rng.standard_normal((max_positions, n_dim)), reserved)
    positions *= position_scale / np.linalg.norm(positions, axis=1, keepdims=True)

    delta = complement @ rng.standard_normal((n_dim, n_dim)) @ complement
    delta *= mix_scale / spectral_norm(delta, rng)
    transition = leak * np.eye(n_dim) + delta
    transition_norm = spectral_norm(transition, rng)
    if transition_norm >= 1.0:
        raise InvalidArgumentError(f"transition spectral norm {transition_norm:.4f} is not below 1")

    scales = np.full(vocab, filler_scale)
    scales[:N_RESERVED_TOKENS + n_strategies + n_keywords] = keyword_base_scale
    unembed = complement @ rng.standard_normal((n_dim, vocab)) * scales
    for spec in strategies:
        for w in spec.keywords:
            unembed[:, w] += keyword_gain * g[spec.id]
        unembed[:, spec.answer_token] += keyword_gain * (g[spec.id] + h)
        unembed[:, ANSWER_MARKER] += keyword_gain * g[spec.id]

    logger.debug(
        "built toy LM: N=%d V=%d S=%d |A|=%.4f seed=%d",
        n_dim, vocab, n_strategies, transition_norm, seed,
    )
    return ToyLM(
        n_dim=n_dim,
        vocab=vocab,
        embed=_frozen(embed),
        transition=_frozen(transition),
        unembed=_frozen(unembed),
        strategy_dirs=_frozen(g),
        answer_dir=_frozen(h),
        cue_dirs=_frozen(q),
        positions=_frozen(positions),
        keyword_gain=keyword_gain,
        leak=leak,
        noise_sigma=noise_sigma,
        transition_norm=transition_norm,
        strategies=strategies,
    )


def planted_directions(lm: ToyLM) -> Matrix:
    """Ground-truth strategy directions G (S×N), by value"""
    return np.array(lm.strategy_dirs)


def activation_bound(lm: ToyLM, planted_norm: float = 0.0, noise_sigmas: float = 6.0) -> float:
    """
    Upper bound on the carried residual norm of any trajectory

    Per-step input is at most max‖E row‖ + ‖P row‖ + planted + noise, and A
    contracts by its spectral norm, so the geometric series bounds the state.
    The readout adds at most α·‖v‖ on top of this.
    """
    step_input = (
        float(np.linalg.norm(lm.embed, axis=1).max())
        + float(np.linalg.norm(lm.positions, axis=1).max())
        + planted_norm
        + noise_sigmas * lm.noise_sigma * np.sqrt(lm.n_dim)
    )
    return step_input / (1.0 - lm.transition_norm)


def _advance(
    lm: ToyLM,
    prev_activation: Vector,
    token: int,
    position: int,
    rng: Optional[Rng],
    planted: Optional[Vector],
) -> Vector:
    x = lm.transition @ prev_activation + lm.embed[token] + lm.positions[position % lm.max_positions]
    if rng is not None and lm.noise_sigma > 0:
        x = x + lm.noise_sigma * rng.standard_normal(lm.n_dim)
    if planted is not None:
        x = x + planted
    return x


def readout(
    lm: ToyLM,
    activation: Vector,
    injection: Optional[Injection] = None,
    logit_bias: Optional[Vector] = None,
) -> Vector:
    """Logits at the hook point: Uᵀ·(x + α·v) (+ optional logit bias)"""
    hooked = activation
    if injection is not None:
        vector, alpha = injection
        if np.shape(vector) != (lm.n_dim,):
            raise InvalidArgumentError(
                f"injection vector has shape {np.shape(vector)}, expected ({lm.n_dim},)"
            )
        hooked = activation + alpha * np.asarray(vector, dtype=np.float64)
    logits = lm.unembed.T @ hooked
    if logit_bias is not None:
        logits = logits + logit_bias
    return logits


def step(
    lm: ToyLM,
    prev_activation: Vector,
    prev_token: int,
    position: int = 0,
    injection: Optional[Injection] = None,
    rng: Optional[Rng] = None,
    planted: Optional[Vector] = None,
    logit_bias: Optional[Vector] = None,
) -> Tuple[Vector, Vector]:
    """
    Consume one token and return (carried activation, next-token logits)

    Noise is drawn only when an rng is given; the injection touches the
    logits only.
    """
    if not 0 <= prev_token < lm.vocab:
        raise InvalidArgumentError(f"token {prev_token} outside vocab of {lm.vocab}")
    if np.shape(prev_activation) != (lm.n_dim,):
        raise InvalidArgumentError(
            f"prev_activation has shape {np.shape(prev_activation)}, expected ({lm.n_dim},)"
        )
    if planted is not None and np.shape(planted) != (lm.n_dim,):
        raise InvalidArgumentError(f"planted signal has shape {np.shape(planted)}")
    x = _advance(lm, prev_activation, prev_token, position, rng, planted)
    return x, readout(lm, x, injection, logit_bias)


def prefill(
    lm: ToyLM,
    tokens: Sequence[int],
    rng: Optional[Rng] = None,
    planted: Optional[Vector] = None,
) -> Matrix:
    """Run a token sequence through the model from a zero state; one activation per token"""
    activations = np.zeros((len(tokens), lm.n_dim))
    x = np.zeros(lm.n_dim)
    for position, token in enumerate(tokens):
        if not 0 <= token < lm.vocab:
            raise InvalidArgumentError(f"token {token} outside vocab of {lm.vocab}")
        x = _advance(lm, x, token, position, rng, planted)
        activations[position] = x
    return activations


def extend(
    lm: ToyLM,
    trajectory: Trajectory,
    forced_tokens: Sequence[int],
    rng: Optional[Rng] = None,
    planted: Optional[Vector] = None,
) -> Trajectory:
    """Append tokens chosen by the caller (not sampled), keeping activations aligned"""
    tokens = list(trajectory.tokens)
    if trajectory.activations is None:
        activations = list(prefill(lm, tokens, rng, planted))
    else:
        activations = list(trajectory.activations)
    x = activations[-1] if activations else np.zeros(lm.n_dim)
    for token in forced_tokens:
        if not 0 <= token < lm.vocab:
            raise InvalidArgumentError(f"token {token} outside vocab of {lm.vocab}")
        x = _advance(lm, x, token, len(tokens), rng, planted)
        tokens.append(token)
        activations.append(x)
    return Trajectory(tokens=tokens, activations=np.array(activations), prompt_len=trajectory.prompt_len)


def generate(
    lm: ToyLM,
    prefix: Trajectory,
    horizon: int,
    temperature: float = 0.0,
    injection: Optional[Injection] = None,
    rng: Optional[Rng] = None,
    capture: bool = False,
    planted: Optional[Vector] = None,
    logit_bias: Optional[Vector] = None,
    stop: Optional[Callable[[List[int]], bool]] = None,
) -> Trajectory:
    """
    Append `horizon` tokens to the prefix

    The injection is applied at every one of the generated positions. The
    returned trajectory's prompt_len is the prefix length. `stop`, when given,
    ends generation early once it returns True for the tokens so far.
    """
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be at least 1, got {horizon}")
    if not prefix.tokens:
        raise InvalidArgumentError("prefix must contain at least one token")

    tokens = list(prefix.tokens)
    if prefix.activations is not None:
        activations = list(prefix.activations)
    else:
        activations = list(prefill(lm, tokens, rng, planted))

    x = activations[-1]
    logits = readout(lm, x, injection, logit_bias)
    for _ in range(horizon):
        token = sample_token(logits, temperature, rng)
        tokens.append(token)
        x, logits = step(lm, x, token, len(tokens) - 1, injection, rng, planted, logit_bias)
        activations.append(x)
        if stop is not None and stop(tokens):
            break

    return Trajectory(
        tokens=tokens,
        activations=np.array(activations) if capture else None,
        prompt_len=len(prefix.tokens),
    )


def sample_strategy_corpus(
    lm: ToyLM,
    schedule: Sequence[Tuple[Optional[int], int]],
    seed: int,
    temperature: float = 1.0,
    amplitude_range: Tuple[float, float] = (2.0, 6.0),
) -> Tuple[LabeledActivationSet, List[Tuple[Optional[int], List[int]]]]:
    """
    Generate one continuous stream segment by segment

    During a segment labeled s the carried residual receives +a·g_s at every
    step, with a drawn uniformly from amplitude_range once per segment.
    Returns the labeled activations and the token sequence of every segment.
    """
    for label, length in schedule:
        if length < 1:
            raise InvalidArgumentError(f"run lengths must be at least 1, got {length}")
        if label is not None and not 0 <= label < lm.n_strategies:
            raise InvalidArgumentError(f"unknown strategy id {label}")

    rng = make_rng(seed)
    total = sum(length for _, length in schedule)
    activations = np.zeros((total, lm.n_dim))
    labels: List[Optional[int]] = []
    input_tokens: List[int] = []
    segments: List[Tuple[Optional[int], List[int]]] = []

    x = _advance(lm, np.zeros(lm.n_dim), BOS, 0, rng, None)
    position = 1
    row = 0
    for label, length in schedule:
        planted = None
        if label is not None:
            amplitude = rng.uniform(*amplitude_range)
            planted = amplitude * lm.strategy_dirs[label]
        segment_tokens: List[int] = []
        for _ in range(length):
            token = sample_token(readout(lm, x), temperature, rng)
            x = _advance(lm, x, token, position, rng, planted)
            activations[row] = x
            labels.append(label)
            input_tokens.append(token)
            segment_tokens.append(token)
            position += 1
            row += 1
        segments.append((label, segment_tokens))

    logger.info("sampled corpus: %d activations in %d segments", total, len(schedule))
    return (
        LabeledActivationSet(activations=activations, labels=labels, tokens=input_tokens, source_seed=seed),
        segments,
    )


def alternating_schedule(n_strategies: int, rounds: int, run_length: int) -> List[Tuple[Optional[int], int]]:
    """s0, none, s1, none, ... repeated `rounds` times"""
    schedule: List[Tuple[Optional[int], int]] = []
    for _ in range(rounds):
        for s in range(n_strategies):
            schedule.append((s, run_length))
            schedule.append((None, run_length))
    return schedule


def sample_prefixes(lm: ToyLM, count: int, length: int, seed: int, temperature: float = 1.0) -> List[Trajectory]:
    """Unsteered prefixes sampled from BOS, activations captured, prompt_len = length"""
    if count < 1 or length < 2:
        raise InvalidArgumentError(f"need count >= 1 and length >= 2, got {count}, {length}")
    rng = make_rng(seed)
    prefixes = []
    for _ in range(count):
        traj = generate(lm, Trajectory(tokens=[BOS]), length - 1, temperature=temperature, rng=rng, capture=True)
        prefixes.append(Trajectory(tokens=traj.tokens, activations=traj.activations, prompt_len=length))
    return prefixes
