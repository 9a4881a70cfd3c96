"""
Numerics Kernel
Deterministic linear algebra and optimization helpers shared by every module

Matrices and vectors are float64 numpy arrays. Every selection (TopK, argmax)
breaks ties toward the lowest index so results are a total function of the input.
Random streams use the PCG64 bit generator, whose output sequence is fixed
across platforms for a given seed.
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from backend.errors import DegenerateInputError, InvalidArgumentError

Matrix = np.ndarray
Vector = np.ndarray
Rng = np.random.Generator

RANK_TOLERANCE = 1e-10


def make_rng(seed: int) -> Rng:
    """Seeded PCG64 generator"""
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(seed: int, stream: int) -> Rng:
    """Generator for one named stream of a run, independent of the other streams"""
    if seed < 0 or stream < 0:
        raise InvalidArgumentError(f"seed and stream must be non-negative, got {seed}, {stream}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def as_vector(values, dim: int = -1, name: str = "vector") -> Vector:
    """Coerce to a finite float64 vector, optionally checking its length"""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-dimensional, got shape {v.shape}")
    if dim >= 0 and v.shape[0] != dim:
        raise InvalidArgumentError(f"{name} has dim {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return v


def as_matrix(values, name: str = "matrix") -> Matrix:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return m


def topk_mask_rows(a: Matrix, k: int) -> Tuple[Matrix, np.ndarray]:
    """
    Row-wise TopK: keep the k largest entries of every row, zero the rest

    Returns (masked values, boolean keep mask). Ties at the k-th value are
    filled from the lowest column index.
    """
    if a.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-dimensional array, got shape {a.shape}")
    width = a.shape[1]
    if k < 1 or k > width:
        raise InvalidArgumentError(f"k must be in [1, {width}], got {k}")
    if k == width:
        return a.copy(), np.ones(a.shape, dtype=bool)

    kth = -np.partition(-a, k - 1, axis=1)[:, k - 1:k]
    above = a > kth
    tied = a == kth
    need = k - above.sum(axis=1, keepdims=True)
    keep = above | (tied & (np.cumsum(tied, axis=1) <= need))
    return np.where(keep, a, 0.0), keep


def topk_mask(v: Vector, k: int) -> Vector:
    """Keep the k largest entries of v (lowest index wins ties), zero the rest"""
    v = as_vector(v)
    masked, _ = topk_mask_rows(v[None, :], k)
    return masked[0]


def gram_schmidt(rows: Matrix) -> Matrix:
    """
    Orthonormalize the rows of a matrix (modified Gram-Schmidt)

    The output rows span the same space as the input rows, in the same order.
    """
    rows = as_matrix(rows, "rows")
    n_rows, n_cols = rows.shape
    if n_rows > n_cols:
        raise InvalidArgumentError(f"cannot orthonormalize {n_rows} rows in dimension {n_cols}")

    basis = np.zeros_like(rows)
    for i in range(n_rows):
        residual = rows[i].copy()
        for j in range(i):
            residual -= (basis[j] @ residual) * basis[j]
        norm = np.linalg.norm(residual)
        if norm < RANK_TOLERANCE:
            raise DegenerateInputError(f"row {i} is linearly dependent on the previous rows")
        basis[i] = residual / norm
    return basis


def softmax(logits: Vector, temperature: float = 1.0) -> Vector:
    """
    Temperature softmax with max-subtraction

    temperature 0 gives the one-hot vector at the argmax (lowest index on ties).
    """
    logits = as_vector(logits, name="logits")
    if temperature < 0:
        raise InvalidArgumentError(f"temperature must be non-negative, got {temperature}")
    if temperature == 0:
        probs = np.zeros_like(logits)
        probs[int(np.argmax(logits))] = 1.0
        return probs
    # shifted logits are <= 0, so a tiny temperature can only reach -inf
    with np.errstate(over="ignore"):
        scaled = (logits - logits.max()) / temperature
    weights = np.exp(scaled)
    return weights / weights.sum()


def sample_token(logits: Vector, temperature: float, rng=None) -> int:
    """Greedy argmax at temperature 0, otherwise a draw from the softmax"""
    if temperature == 0 or rng is None:
        return int(np.argmax(logits))
    probs = softmax(logits, temperature)
    return int(rng.choice(len(probs), p=probs))


@dataclass
class AdamState:
    """First and second moment estimates, keyed like the parameter set"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update

    `step` counts from 1. Inputs are not modified; new parameter and state
    dictionaries are returned.
    """
    if step < 1:
        raise InvalidArgumentError(f"step counts from 1, got {step}")
    if set(params) != set(grads) or set(params) != set(state.m) or set(params) != set(state.v):
        raise InvalidArgumentError("params, grads and moment state must have the same keys")

    new_params: Dict[str, np.ndarray] = {}
    new_state = AdamState()
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise InvalidArgumentError(
                f"shape mismatch for '{name}': param {p.shape}, grad {g.shape}"
            )
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def spectral_norm(m: Matrix, rng: Rng, iterations: int = 200) -> float:
    """Largest singular value estimated by power iteration on MᵀM"""
    m = as_matrix(m)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        sigma = float(np.sqrt(norm))
    return sigma


def project_out(rows: Matrix, basis: Matrix) -> Matrix:
    """Remove from every row its component in span(basis); basis rows orthonormal"""
    return rows - (rows @ basis.T) @ basis


def quantize(a: np.ndarray) -> np.ndarray:
    """Round through float32 and widen back, the precision of persisted tensors"""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """|a - n| / max(|a|, |n|, floor)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def derive_seed(seed: int, stream: int) -> int:
    """Integer seed for one stream of a run, for APIs that take a seed rather than a generator"""
    if seed < 0 or stream < 0:
        raise InvalidArgumentError(f"seed and stream must be non-negative, got {seed}, {stream}")
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])
