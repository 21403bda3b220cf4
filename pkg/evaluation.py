"""
Silhouette evaluation at every hierarchy level and early stopping on the
validation average.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np

from hierarchy import LabelPath, format_label_path
from rank_embedding_common import ShapeMismatchError, UndefinedScoreError, ValidationError

logger = logging.getLogger(__name__)

METRIC_COSINE = "cosine"
METRIC_EUCLIDEAN = "euclidean"
DEFAULT_PATIENCE = 20


def pairwise_distances(X: np.ndarray, metric: str = METRIC_COSINE) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if metric == METRIC_COSINE:
        norms = np.linalg.norm(X, axis=1)
        unit = X / np.maximum(norms, 1e-12)[:, None]
        return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    if metric == METRIC_EUCLIDEAN:
        sq = np.sum(X ** 2, axis=1)
        return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    raise ValidationError(f"unknown metric {metric!r}")


def silhouette_samples(X: np.ndarray, labels: Sequence, metric: str = METRIC_COSINE) -> np.ndarray:
    """
    Silhouette coefficient of every sample: (b - a) / max(a, b), with a the
    mean distance to the rest of its own cluster and b the smallest mean
    distance to another cluster. Samples in singleton clusters score 0.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-d matrix, got shape {X.shape}")
    n = X.shape[0]
    if len(labels) != n:
        raise ShapeMismatchError(f"{len(labels)} labels for {n} samples")
    if n < 2:
        raise UndefinedScoreError(f"silhouette needs at least 2 samples, got {n}")

    unique, codes = np.unique(np.array([str(label) for label in labels]), return_inverse=True)
    if len(unique) < 2:
        raise UndefinedScoreError("silhouette needs at least 2 distinct labels")

    distances = pairwise_distances(X, metric)
    counts = np.bincount(codes, minlength=len(unique))

    # Mean distance from every sample to every cluster
    sums = np.zeros((n, len(unique)))
    for k in range(len(unique)):
        sums[:, k] = distances[:, codes == k].sum(axis=1)
    own = counts[codes]
    intra = np.where(own > 1, sums[np.arange(n), codes] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(n), codes] = np.inf
    inter = means.min(axis=1)

    denom = np.maximum(intra, inter)
    coeff = np.where(denom > 0, (inter - intra) / np.where(denom > 0, denom, 1.0), 0.0)
    coeff[own == 1] = 0.0
    return coeff


def silhouette(X: np.ndarray, labels: Sequence, metric: str = METRIC_COSINE) -> float:
    """Mean silhouette coefficient over all samples."""
    return float(np.mean(silhouette_samples(X, labels, metric)))


def level_names(height: int) -> List[str]:
    """Report names per level, coarsest first: coarse, level_2, ..., fine."""
    if height == 1:
        return ["fine"]
    names = [f"level_{k}" for k in range(1, height + 1)]
    names[0] = "coarse"
    names[-1] = "fine"
    return names


@attrs.frozen
class SilhouetteReport:
    """Silhouette per hierarchy level (None when unavailable) and their average."""
    level_names: Tuple[str, ...]
    level_scores: Tuple[Optional[float], ...]
    average: float

    def score(self, name: str) -> Optional[float]:
        return self.level_scores[self.level_names.index(name)]

    def to_dict(self) -> Dict[str, object]:
        return {
            "levels": list(self.level_names),
            "sil_per_level": list(self.level_scores),
            "avSil": self.average,
        }


def multilevel_report(embeddings: np.ndarray, label_paths: Sequence[LabelPath],
                      height: Optional[int] = None, metric: str = METRIC_COSINE) -> SilhouetteReport:
    """
    Silhouette at each hierarchy level, clustering by the label prefix up to
    that level. Samples whose label is truncated above a level are left out
    of that level; a level with fewer than 2 distinct labels is unavailable.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    paths = [tuple(p) for p in label_paths]
    if len(paths) != embeddings.shape[0]:
        raise ShapeMismatchError(f"{len(paths)} labels for {embeddings.shape[0]} embeddings")
    if height is None:
        height = max((len(p) for p in paths), default=0)
    if height < 1:
        raise UndefinedScoreError("no labels to evaluate")

    scores: List[Optional[float]] = []
    for level in range(1, height + 1):
        rows = [i for i, p in enumerate(paths) if len(p) >= level]
        clusters = [paths[i][:level] for i in rows]
        if len(rows) < 2 or len(set(clusters)) < 2:
            logger.debug(f"Level {level} unavailable: fewer than 2 distinct labels")
            scores.append(None)
            continue
        scores.append(silhouette(embeddings[rows], [format_label_path(c) for c in clusters], metric))

    available = [s for s in scores if s is not None]
    if not available:
        raise UndefinedScoreError("no hierarchy level has 2 or more distinct labels")
    return SilhouetteReport(
        level_names=tuple(level_names(height)),
        level_scores=tuple(scores),
        average=float(np.mean(available)),
    )


@attrs.define
class EarlyStopper:
    patience: int = DEFAULT_PATIENCE
    best_score: float = -math.inf
    best_epoch: Optional[int] = None
    epochs_since_improvement: int = 0

    def __attrs_post_init__(self):
        if self.patience < 1:
            raise ValidationError(f"patience must be at least 1, got {self.patience}")


@attrs.frozen
class StopDecision:
    stop: bool
    save_checkpoint: bool


def stopper_update(stopper: EarlyStopper, score: float, epoch: Optional[int] = None) -> StopDecision:
    """
    Record one validation score. A strict improvement resets the counter and
    asks for a checkpoint; otherwise the counter grows and training stops
    once it reaches the patience.
    """
    if not math.isfinite(score):
        raise ValidationError(f"validation score must be finite, got {score}")
    if score > stopper.best_score:
        stopper.best_score = float(score)
        stopper.best_epoch = epoch
        stopper.epochs_since_improvement = 0
        return StopDecision(stop=False, save_checkpoint=True)
    stopper.epochs_since_improvement += 1
    return StopDecision(stop=stopper.epochs_since_improvement >= stopper.patience, save_checkpoint=False)
