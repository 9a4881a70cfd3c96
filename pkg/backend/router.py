"""
Strategy Router
Bi-encoder that scores (reasoning context, steering feature) pairs

    score(c, f) = ⟨E_c(c), E_f(f)⟩,   E(x) = W2·tanh(W1·x + b1) + b2

Trained with InfoNCE: each pair holds one feature whose steering corrected
the problem and a list of features whose steering did not.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from backend.errors import InvalidArgumentError
from backend.numerics import AdamState, Matrix, Vector, adam_step, as_vector, make_rng, relative_error

logger = logging.getLogger(__name__)

ENCODERS = ("context", "feature")
LAYER_PARAMS = ("w1", "b1", "w2", "b2")


@dataclass
class EncoderParams:
    w1: Matrix      # H×N
    b1: Vector      # H
    w2: Matrix      # D×H
    b2: Vector      # D

    def forward(self, x: Matrix) -> Tuple[Matrix, Matrix]:
        """Rows of x → (hidden activations, embeddings)"""
        hidden = np.tanh(x @ self.w1.T + self.b1)
        return hidden, hidden @ self.w2.T + self.b2

    def backward(self, x: Matrix, hidden: Matrix, grad_out: Matrix) -> Dict[str, np.ndarray]:
        d_pre = (grad_out @ self.w2) * (1.0 - hidden * hidden)
        return {
            "w1": d_pre.T @ x,
            "b1": d_pre.sum(axis=0),
            "w2": grad_out.T @ hidden,
            "b2": grad_out.sum(axis=0),
        }


@dataclass
class RouterParams:
    context: EncoderParams
    feature: EncoderParams

    def __post_init__(self):
        for name in ENCODERS:
            enc = getattr(self, name)
            h, n = enc.w1.shape
            if enc.b1.shape != (h,) or enc.w2.shape[1] != h or enc.b2.shape != (enc.w2.shape[0],):
                raise InvalidArgumentError(f"{name} encoder has inconsistent shapes")
            if not all(np.all(np.isfinite(getattr(enc, p))) for p in LAYER_PARAMS):
                raise InvalidArgumentError(f"{name} encoder has non-finite weights")
        if self.context.w2.shape[0] != self.feature.w2.shape[0]:
            raise InvalidArgumentError("context and feature encoders must share the output dimension")
        if self.context.w1.shape[1] != self.feature.w1.shape[1]:
            raise InvalidArgumentError("context and feature encoders must share the input dimension")

    @property
    def n_dim(self) -> int:
        return self.context.w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.context.w2.shape[0]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {
            f"{enc}.{p}": getattr(getattr(self, enc), p) for enc in ENCODERS for p in LAYER_PARAMS
        }

    @classmethod
    def from_dict(cls, tensors: Dict[str, np.ndarray]) -> "RouterParams":
        missing = [f"{e}.{p}" for e in ENCODERS for p in LAYER_PARAMS if f"{e}.{p}" not in tensors]
        if missing:
            raise InvalidArgumentError(f"missing router tensors: {missing}")
        return cls(**{
            enc: EncoderParams(**{p: np.asarray(tensors[f"{enc}.{p}"], dtype=np.float64) for p in LAYER_PARAMS})
            for enc in ENCODERS
        })

    def copy(self) -> "RouterParams":
        return RouterParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class RouterTrainingPair:
    context_activation: Vector
    positive_feature: Vector
    negative_features: List[Vector]

    def __post_init__(self):
        if len(self.negative_features) < 1:
            raise InvalidArgumentError("a training pair needs at least one negative feature")
        dim = len(self.context_activation)
        self.context_activation = as_vector(self.context_activation, dim, "context_activation")
        self.positive_feature = as_vector(self.positive_feature, dim, "positive_feature")
        self.negative_features = [as_vector(f, dim, "negative_feature") for f in self.negative_features]

    def features(self) -> Matrix:
        """Positive first, then the negatives"""
        return np.vstack([self.positive_feature] + self.negative_features)


@dataclass
class RouterTrainConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        problems = [
            f"{name} must be positive"
            for name in ("hidden_dim", "embed_dim", "batch_size")
            if getattr(self, name) < 1
        ]
        if self.steps < 0:
            problems.append("steps must be non-negative")
        if self.learning_rate <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            problems.append("learning_rate > 0 and betas in [0, 1) required")
        if problems:
            raise InvalidArgumentError("; ".join(problems))


@dataclass
class RouterTrainLog:
    losses: List[float] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0


def init_router(n_dim: int, config: RouterTrainConfig) -> RouterParams:
    """Gaussian weights scaled by 1/sqrt(fan-in), zero biases"""
    config.validate()
    rng = make_rng(config.seed)

    def encoder() -> EncoderParams:
        return EncoderParams(
            w1=rng.standard_normal((config.hidden_dim, n_dim)) / np.sqrt(n_dim),
            b1=np.zeros(config.hidden_dim),
            w2=rng.standard_normal((config.embed_dim, config.hidden_dim)) / np.sqrt(config.hidden_dim),
            b2=np.zeros(config.embed_dim),
        )

    return RouterParams(context=encoder(), feature=encoder())


def score(router: RouterParams, context_activation: Vector, feature: Vector) -> float:
    context_activation = as_vector(context_activation, router.n_dim, "context_activation")
    feature = as_vector(feature, router.n_dim, "feature")
    _, e_c = router.context.forward(context_activation[None, :])
    _, e_f = router.feature.forward(feature[None, :])
    return float(e_c[0] @ e_f[0])


def score_all(router: RouterParams, context_activation: Vector, features: Matrix) -> Vector:
    context_activation = as_vector(context_activation, router.n_dim, "context_activation")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != router.n_dim:
        raise InvalidArgumentError(f"features must be k×{router.n_dim}, got shape {features.shape}")
    _, e_c = router.context.forward(context_activation[None, :])
    _, e_f = router.feature.forward(features)
    return e_f @ e_c[0]


def infonce_loss(router: RouterParams, pair: RouterTrainingPair) -> Tuple[float, Dict[str, np.ndarray]]:
    """−log softmax(scores)[positive] with max-subtraction, and its gradients"""
    if len(pair.context_activation) != router.n_dim:
        raise InvalidArgumentError(
            f"pair has dim {len(pair.context_activation)}, router expects {router.n_dim}"
        )
    context = pair.context_activation[None, :]
    features = pair.features()
    h_c, e_c = router.context.forward(context)
    h_f, e_f = router.feature.forward(features)
    scores = e_f @ e_c[0]

    shifted = scores - scores.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[0])

    d_scores = np.exp(shifted - log_norm)
    d_scores[0] -= 1.0
    d_e_c = (d_scores @ e_f)[None, :]
    d_e_f = np.outer(d_scores, e_c[0])

    grads = {}
    for p, g in router.context.backward(context, h_c, d_e_c).items():
        grads[f"context.{p}"] = g
    for p, g in router.feature.backward(features, h_f, d_e_f).items():
        grads[f"feature.{p}"] = g
    return loss, grads


def mean_loss(router: RouterParams, pairs: Sequence[RouterTrainingPair]) -> float:
    return float(np.mean([infonce_loss(router, pair)[0] for pair in pairs]))


def grad_check(router: RouterParams, pair: RouterTrainingPair, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error of the analytic InfoNCE gradients against central differences"""
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    _, grads = infonce_loss(router, pair)
    rng = make_rng(seed)
    worst = 0.0
    for name, tensor in router.as_dict().items():
        coords = np.arange(tensor.size)
        if max_coords is not None and max_coords < tensor.size:
            coords = rng.choice(tensor.size, size=max_coords, replace=False)
        for flat in coords:
            index = np.unravel_index(int(flat), tensor.shape)
            probes = []
            for sign in (1.0, -1.0):
                tensors = {k: v.copy() for k, v in router.as_dict().items()}
                tensors[name][index] += sign * eps
                probes.append(infonce_loss(RouterParams.from_dict(tensors), pair)[0])
            numeric = (probes[0] - probes[1]) / (2.0 * eps)
            worst = max(worst, relative_error(float(grads[name][index]), numeric))
    return worst


def train_router(
    pairs: Sequence[RouterTrainingPair],
    config: RouterTrainConfig,
    progress: bool = False,
) -> Tuple[RouterParams, RouterTrainLog]:
    """Minibatch Adam on mean InfoNCE; deterministic given config.seed"""
    if not pairs:
        raise InvalidArgumentError("router training needs at least one pair")
    config.validate()
    n_dim = len(pairs[0].context_activation)
    router = init_router(n_dim, config)
    rng = make_rng(config.seed + 1)

    log = RouterTrainLog(initial_loss=mean_loss(router, pairs))
    logger.info("training router on %d pairs: initial loss %.4f", len(pairs), log.initial_loss)

    state = AdamState.zeros_like(router.as_dict())
    batch_size = min(config.batch_size, len(pairs))
    for t in tqdm(range(1, config.steps + 1), desc="train-router", disable=not progress):
        batch = rng.choice(len(pairs), size=batch_size, replace=False)
        total = {name: np.zeros_like(p) for name, p in router.as_dict().items()}
        batch_loss = 0.0
        for i in batch:
            loss, grads = infonce_loss(router, pairs[int(i)])
            batch_loss += loss
            for name, g in grads.items():
                total[name] += g
        grads = {name: g / batch_size for name, g in total.items()}
        log.losses.append(batch_loss / batch_size)
        updated, state = adam_step(
            router.as_dict(), grads, state, t,
            config.learning_rate, config.beta1, config.beta2, config.adam_eps,
        )
        router = RouterParams.from_dict(updated)

    log.final_loss = mean_loss(router, pairs)
    logger.info("router trained: loss %.4f -> %.4f", log.initial_loss, log.final_loss)
    return router, log


def route_index(router: RouterParams, context_activation: Vector, features: Sequence[Vector]) -> int:
    """Index of the highest-scoring feature; the lowest index wins ties"""
    if len(features) == 0:
        raise InvalidArgumentError("route needs at least one candidate")
    return int(np.argmax(score_all(router, context_activation, np.vstack(features))))


def route(
    router: RouterParams,
    context_activation: Vector,
    candidates: Sequence[Tuple[int, Vector]],
) -> Tuple[int, Vector]:
    """(strategy, feature) candidate with the highest score"""
    if len(candidates) == 0:
        raise InvalidArgumentError("route needs at least one candidate")
    index = route_index(router, context_activation, [f for _, f in candidates])
    return candidates[index]
