"""
TopK Sparse Autoencoder
Encoder/decoder forward passes, analytic gradients and the training loop

    z = TopK(ReLU(W_enc·(x − b_dec) + b_enc))
    x̂ = W_dec·z + b_dec

Decoder columns are the features f_i. They are kept at unit norm after every
update (the column-parallel part of the gradient is removed first), so a
feature can be used directly as a steering vector. Gradients flow only
through the coordinates TopK retained.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from backend.errors import InvalidArgumentError
from backend.numerics import (
    AdamState,
    Matrix,
    Rng,
    Vector,
    adam_step,
    as_vector,
    make_rng,
    relative_error,
    topk_mask_rows,
)
from backend.toylm import LabeledActivationSet

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w_enc", "b_enc", "w_dec", "b_dec")


@dataclass
class SaeParams:
    """SAE weights: w_enc M×N, b_enc M, w_dec N×M, b_dec N, sparsity k"""
    w_enc: Matrix
    b_enc: Vector
    w_dec: Matrix
    b_dec: Vector
    k: int

    def __post_init__(self):
        m_dim, n_dim = self.w_enc.shape
        if self.w_dec.shape != (n_dim, m_dim):
            raise InvalidArgumentError(
                f"w_dec shape {self.w_dec.shape} does not match w_enc shape {self.w_enc.shape}"
            )
        if self.b_enc.shape != (m_dim,) or self.b_dec.shape != (n_dim,):
            raise InvalidArgumentError("bias shapes do not match the weight matrices")
        if not 1 <= self.k <= m_dim:
            raise InvalidArgumentError(f"k must be in [1, {m_dim}], got {self.k}")

    @property
    def m_dim(self) -> int:
        return self.w_enc.shape[0]

    @property
    def n_dim(self) -> int:
        return self.w_enc.shape[1]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, tensors: Dict[str, np.ndarray], k: int) -> "SaeParams":
        missing = [name for name in PARAM_NAMES if name not in tensors]
        if missing:
            raise InvalidArgumentError(f"missing SAE tensors: {missing}")
        return cls(**{name: np.asarray(tensors[name], dtype=np.float64) for name in PARAM_NAMES}, k=k)

    def copy(self) -> "SaeParams":
        return SaeParams.from_dict({name: t.copy() for name, t in self.as_dict().items()}, self.k)


@dataclass
class SaeTrainConfig:
    """Training hyperparameters; defaults are the toy-scale values"""
    m_dim: int = 512
    k: int = 8
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dead_feature_window: int = 1000
    init_sample_size: int = 1000
    eval_sample_size: int = 2048

    def validate(self, n_dim: Optional[int] = None):
        problems = []
        for name in ("m_dim", "k", "batch_size", "dead_feature_window", "init_sample_size", "eval_sample_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.steps < 0:
            problems.append("steps must be non-negative")
        if self.k > self.m_dim:
            problems.append(f"k ({self.k}) cannot exceed m_dim ({self.m_dim})")
        if n_dim is not None and self.m_dim <= n_dim:
            problems.append(f"m_dim ({self.m_dim}) must exceed the activation width ({n_dim})")
        if self.learning_rate <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            problems.append("learning_rate > 0 and betas in [0, 1) required")
        if problems:
            raise InvalidArgumentError("; ".join(problems))


@dataclass
class SaeTrainLog:
    """Per-step batch losses, dead-feature counts per window, and eval losses"""
    losses: List[float] = field(default_factory=list)
    dead_counts: List[int] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0

    def summary(self) -> Dict[str, float]:
        return {
            "steps": len(self.losses),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "last_dead_count": self.dead_counts[-1] if self.dead_counts else None,
        }


def _check_batch(params: SaeParams, batch) -> Matrix:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise InvalidArgumentError("batch must not be empty")
    if batch.shape[1] != params.n_dim:
        raise InvalidArgumentError(f"batch has dim {batch.shape[1]}, expected {params.n_dim}")
    return batch


def encode_batch(params: SaeParams, batch: Matrix) -> Tuple[Matrix, np.ndarray, Matrix]:
    """Returns (z, active mask, pre-activations) for a B×N batch"""
    batch = _check_batch(params, batch)
    centered = batch - params.b_dec
    pre = centered @ params.w_enc.T + params.b_enc
    z, keep = topk_mask_rows(np.maximum(pre, 0.0), params.k)
    return z, keep & (pre > 0), pre


def encode(params: SaeParams, x: Vector) -> Vector:
    x = as_vector(x, params.n_dim, "x")
    z, _, _ = encode_batch(params, x[None, :])
    return z[0]


def decode(params: SaeParams, z: Vector) -> Vector:
    z = as_vector(z, params.m_dim, "z")
    return params.w_dec @ z + params.b_dec


def feature(params: SaeParams, i: int) -> Vector:
    """Decoder column f_i"""
    if not 0 <= i < params.m_dim:
        raise InvalidArgumentError(f"feature id {i} outside [0, {params.m_dim})")
    return params.w_dec[:, i].copy()


def _forward_backward(params: SaeParams, batch: Matrix, with_grads: bool = True):
    batch = _check_batch(params, batch)
    n = batch.shape[0]
    centered = batch - params.b_dec
    pre = centered @ params.w_enc.T + params.b_enc
    z, keep = topk_mask_rows(np.maximum(pre, 0.0), params.k)
    active = keep & (pre > 0)
    residual = z @ params.w_dec.T + params.b_dec - batch
    loss = float((residual * residual).sum() / n)
    if not with_grads:
        return loss, None, z, active

    g = 2.0 * residual / n
    d_pre = (g @ params.w_dec) * active
    grads = {
        "w_enc": d_pre.T @ centered,
        "b_enc": d_pre.sum(axis=0),
        "w_dec": g.T @ z,
        "b_dec": g.sum(axis=0) - (d_pre @ params.w_enc).sum(axis=0),
    }
    return loss, grads, z, active


def loss_and_grads(params: SaeParams, batch) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean squared reconstruction error over the batch and its analytic gradients"""
    loss, grads, _, _ = _forward_backward(params, batch)
    return loss, grads


def reconstruction_loss(params: SaeParams, data: Matrix, chunk: int = 4096) -> float:
    """Mean ‖x − decode(encode(x))‖² over all rows"""
    data = _check_batch(params, data)
    total = 0.0
    for start in range(0, data.shape[0], chunk):
        part = data[start:start + chunk]
        loss, _, _, _ = _forward_backward(params, part, with_grads=False)
        total += loss * part.shape[0]
    return total / data.shape[0]


def grad_check(
    params: SaeParams,
    batch,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Max relative error between analytic and central-difference gradients

    Coordinates whose ±eps perturbation changes the TopK/ReLU active set are
    skipped. With max_coords, that many coordinates per tensor are sampled.
    """
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    batch = _check_batch(params, batch)
    _, grads, _, base_active = _forward_backward(params, batch)
    rng = make_rng(seed)

    worst = 0.0
    for name in PARAM_NAMES:
        tensor = getattr(params, name)
        flat_count = tensor.size
        if max_coords is not None and max_coords < flat_count:
            coords = rng.choice(flat_count, size=max_coords, replace=False)
        else:
            coords = np.arange(flat_count)
        for flat in coords:
            index = np.unravel_index(int(flat), tensor.shape)
            losses = []
            stable = True
            for sign in (1.0, -1.0):
                probe = params.copy()
                getattr(probe, name)[index] += sign * eps
                loss, _, _, active = _forward_backward(probe, batch, with_grads=False)
                if not np.array_equal(active, base_active):
                    stable = False
                    break
                losses.append(loss)
            if not stable:
                continue
            numeric = (losses[0] - losses[1]) / (2.0 * eps)
            worst = max(worst, relative_error(float(grads[name][index]), numeric))
    return worst


def _project_decoder_grad(w_dec: Matrix, grad: Matrix) -> Matrix:
    return grad - w_dec * (w_dec * grad).sum(axis=0, keepdims=True)


def _normalize_columns(w_dec: Matrix) -> Matrix:
    return w_dec / np.linalg.norm(w_dec, axis=0, keepdims=True)


def init_params(data: Matrix, config: SaeTrainConfig, rng: Rng) -> SaeParams:
    """b_dec = subset mean, unit Gaussian decoder columns, w_enc = w_decᵀ, b_enc = 0"""
    n_samples, n_dim = data.shape
    subset = rng.choice(n_samples, size=min(config.init_sample_size, n_samples), replace=False)
    w_dec = _normalize_columns(rng.standard_normal((n_dim, config.m_dim)))
    return SaeParams(
        w_enc=w_dec.T.copy(),
        b_enc=np.zeros(config.m_dim),
        w_dec=w_dec,
        b_dec=data[np.sort(subset)].mean(axis=0),
        k=config.k,
    )


def train_sae(
    data: LabeledActivationSet,
    config: SaeTrainConfig,
    progress: bool = False,
) -> Tuple[SaeParams, SaeTrainLog]:
    """Minibatch Adam training with unit-norm decoder columns; deterministic given config.seed"""
    activations = np.asarray(data.activations, dtype=np.float64)
    config.validate(activations.shape[1])
    if activations.shape[0] < config.batch_size:
        raise InvalidArgumentError(
            f"{activations.shape[0]} samples is fewer than batch_size {config.batch_size}"
        )

    rng = make_rng(config.seed)
    params = init_params(activations, config, rng)
    eval_rows = np.sort(rng.choice(
        activations.shape[0], size=min(config.eval_sample_size, activations.shape[0]), replace=False
    ))
    eval_data = activations[eval_rows]

    log = SaeTrainLog(initial_loss=reconstruction_loss(params, eval_data))
    logger.info(
        "training SAE: M=%d k=%d steps=%d batch=%d initial loss %.4f",
        config.m_dim, config.k, config.steps, config.batch_size, log.initial_loss,
    )

    state = AdamState.zeros_like(params.as_dict())
    fired = np.zeros(config.m_dim, dtype=bool)
    for t in tqdm(range(1, config.steps + 1), desc="train-sae", disable=not progress):
        batch = activations[rng.integers(0, activations.shape[0], size=config.batch_size)]
        loss, grads, z, _ = _forward_backward(params, batch)
        if int((z != 0).sum(axis=1).max()) > config.k:
            raise AssertionError("TopK emitted more than k nonzeros")
        log.losses.append(loss)
        fired |= (z > 0).any(axis=0)

        grads["w_dec"] = _project_decoder_grad(params.w_dec, grads["w_dec"])
        updated, state = adam_step(
            params.as_dict(), grads, state, t,
            config.learning_rate, config.beta1, config.beta2, config.adam_eps,
        )
        updated["w_dec"] = _normalize_columns(updated["w_dec"])
        params = SaeParams.from_dict(updated, config.k)

        if t % config.dead_feature_window == 0:
            dead = int(config.m_dim - fired.sum())
            log.dead_counts.append(dead)
            fired[:] = False
            logger.info(
                "step %d: window loss %.4f, dead features %d",
                t, float(np.mean(log.losses[-config.dead_feature_window:])), dead,
            )

    log.final_loss = reconstruction_loss(params, eval_data)
    logger.info("SAE trained: loss %.4f -> %.4f", log.initial_loss, log.final_loss)
    return params, log


def match_directions(params: SaeParams, directions: Matrix) -> List[Tuple[int, float]]:
    """For each unit direction, the (feature id, cosine) of the best-aligned decoder column"""
    norms = np.linalg.norm(params.w_dec, axis=0)
    cosines = (directions @ params.w_dec) / (np.linalg.norm(directions, axis=1, keepdims=True) * norms)
    best = np.argmax(cosines, axis=1)
    return [(int(i), float(cosines[row, i])) for row, i in enumerate(best)]
