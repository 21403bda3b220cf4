"""
Trainable projection: standardized features -> single linear layer -> unit-norm rows.
Includes the manual backward pass through the row normalization, the optimizer
step and the JSON checkpoint format.
"""

import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import attrs
import numpy as np

from rank_embedding_common import (
    DegenerateOutputError,
    NonFiniteGradientError,
    ShapeMismatchError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_D_IN = 128
DEFAULT_D_OUT = 3
STD_FLOOR = 1e-8
NORM_FLOOR = 1e-12

OPTIMIZER_SGD = "sgd"
OPTIMIZER_ADAM = "adam"


@attrs.frozen
class FeatureStats:
    """Per-dimension training-set mean and standard deviation."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ShapeMismatchError(f"need a non-empty feature matrix, got shape {features.shape}")
        return cls(mean=features.mean(axis=0), std=np.maximum(features.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, d_in: int) -> "FeatureStats":
        return cls(mean=np.zeros(d_in), std=np.ones(d_in))


@attrs.define
class ProjectionModel:
    W: np.ndarray
    b: np.ndarray
    stats: FeatureStats

    @property
    def d_in(self) -> int:
        return int(self.W.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.W.shape[0])

    def copy(self) -> "ProjectionModel":
        return ProjectionModel(W=self.W.copy(), b=self.b.copy(), stats=self.stats)


@attrs.frozen
class ForwardCache:
    x: np.ndarray
    z: np.ndarray
    norms: np.ndarray
    e: np.ndarray


@attrs.define
class OptimizerState:
    """Learning rate, algorithm tag and moment accumulators."""
    learning_rate: float = 1e-3
    algorithm: str = OPTIMIZER_ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m_W: Optional[np.ndarray] = None
    v_W: Optional[np.ndarray] = None
    m_b: Optional[np.ndarray] = None
    v_b: Optional[np.ndarray] = None

    def __attrs_post_init__(self):
        # A zero learning rate is allowed and freezes the parameters
        if self.learning_rate < 0:
            raise ValidationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.algorithm not in (OPTIMIZER_SGD, OPTIMIZER_ADAM):
            raise ValidationError(f"unknown optimizer {self.algorithm!r}")


def init(seed: Optional[int], d_in: int = DEFAULT_D_IN, d_out: int = DEFAULT_D_OUT,
         stats: Optional[FeatureStats] = None) -> ProjectionModel:
    """
    Create a projection with W ~ U(-sqrt(1/d_in), sqrt(1/d_in)) and b = 0.

    Args:
        seed: Seed for the weight draw
        d_in: Input dimension
        d_out: Embedding dimension
        stats: Standardization statistics (identity when omitted)
    """
    if d_in < 1 or d_out < 1:
        raise ValidationError(f"dimensions must be positive, got d_in={d_in}, d_out={d_out}")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(1.0 / d_in)
    W = rng.uniform(-bound, bound, size=(d_out, d_in))
    if stats is None:
        stats = FeatureStats.identity(d_in)
    elif stats.mean.shape != (d_in,):
        raise ShapeMismatchError(f"feature stats have dimension {stats.mean.shape}, expected ({d_in},)")
    return ProjectionModel(W=W, b=np.zeros(d_out), stats=stats)


def standardize(features: np.ndarray, stats: FeatureStats) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != stats.mean.shape[0]:
        raise ShapeMismatchError(
            f"features of shape {features.shape} do not match stats of dimension {stats.mean.shape[0]}"
        )
    return (features - stats.mean) / stats.std


def forward(model: ProjectionModel, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Project standardized inputs and normalize each row.

    Returns:
        (embeddings, cache) with unit-norm embedding rows
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeMismatchError(f"input of shape {x.shape} does not match d_in={model.d_in}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input features contain non-finite values")
    z = x @ model.W.T + model.b
    norms = np.linalg.norm(z, axis=1)
    degenerate = np.flatnonzero(norms < NORM_FLOOR)
    if degenerate.size:
        raise DegenerateOutputError(
            f"row {int(degenerate[0])} projects to a near-zero vector (norm {norms[degenerate[0]]:.3e})"
        )
    e = z / norms[:, None]
    return e, ForwardCache(x=x, z=z, norms=norms, e=e)


def embed(model: ProjectionModel, features: np.ndarray) -> np.ndarray:
    """Standardize raw features with the model's stats and project them."""
    embeddings, _ = forward(model, standardize(features, model.stats))
    return embeddings


def backward(cache: ForwardCache, grad_e: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backpropagate through e = z / |z| and z = x W^T + b.

    Returns:
        (grad_W, grad_b)
    """
    grad_e = np.asarray(grad_e, dtype=np.float64)
    if grad_e.shape != cache.e.shape:
        raise ShapeMismatchError(f"gradient of shape {grad_e.shape} does not match outputs {cache.e.shape}")
    radial = np.sum(grad_e * cache.e, axis=1, keepdims=True)
    grad_z = (grad_e - radial * cache.e) / cache.norms[:, None]
    grad_W = grad_z.T @ cache.x
    grad_b = grad_z.sum(axis=0)
    return grad_W, grad_b


def step(model: ProjectionModel, state: OptimizerState,
         grad_W: np.ndarray, grad_b: np.ndarray) -> Tuple[ProjectionModel, OptimizerState]:
    """
    Apply one update in place and return the (model, state) pair.
    Raises NonFiniteGradientError before touching parameters.
    """
    if grad_W.shape != model.W.shape or grad_b.shape != model.b.shape:
        raise ShapeMismatchError("gradient shapes do not match the model parameters")
    if not (np.all(np.isfinite(grad_W)) and np.all(np.isfinite(grad_b))):
        raise NonFiniteGradientError("non-finite gradient; update skipped")

    state.step_count += 1
    lr = state.learning_rate

    if state.algorithm == OPTIMIZER_SGD:
        model.W -= lr * grad_W
        model.b -= lr * grad_b
        return model, state

    if state.m_W is None:
        state.m_W = np.zeros_like(model.W)
        state.v_W = np.zeros_like(model.W)
        state.m_b = np.zeros_like(model.b)
        state.v_b = np.zeros_like(model.b)

    b1, b2, t = state.beta1, state.beta2, state.step_count
    state.m_W = b1 * state.m_W + (1 - b1) * grad_W
    state.v_W = b2 * state.v_W + (1 - b2) * grad_W ** 2
    state.m_b = b1 * state.m_b + (1 - b1) * grad_b
    state.v_b = b2 * state.v_b + (1 - b2) * grad_b ** 2

    correction1 = 1 - b1 ** t
    correction2 = 1 - b2 ** t
    model.W -= lr * (state.m_W / correction1) / (np.sqrt(state.v_W / correction2) + state.eps)
    model.b -= lr * (state.m_b / correction1) / (np.sqrt(state.v_b / correction2) + state.eps)
    return model, state


def checkpoint_dict(model: ProjectionModel) -> Dict[str, Any]:
    return {
        "d_in": model.d_in,
        "d_out": model.d_out,
        "W": model.W.tolist(),
        "b": model.b.tolist(),
        "feature_mean": model.stats.mean.tolist(),
        "feature_std": model.stats.std.tolist(),
    }


def save_checkpoint(model: ProjectionModel, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(checkpoint_dict(model), f)
    logger.debug(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> ProjectionModel:
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"checkpoint {path} is not valid JSON: {e}") from e
    try:
        W = np.asarray(data["W"], dtype=np.float64)
        b = np.asarray(data["b"], dtype=np.float64)
        stats = FeatureStats(
            mean=np.asarray(data["feature_mean"], dtype=np.float64),
            std=np.asarray(data["feature_std"], dtype=np.float64),
        )
        d_in, d_out = int(data["d_in"]), int(data["d_out"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed checkpoint {path}: {e}") from e
    if W.shape != (d_out, d_in) or b.shape != (d_out,) or stats.mean.shape != (d_in,) or stats.std.shape != (d_in,):
        raise ShapeMismatchError(f"checkpoint {path} has inconsistent shapes")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ValidationError(f"checkpoint {path} holds non-finite parameters")
    return ProjectionModel(W=W, b=b, stats=stats)
