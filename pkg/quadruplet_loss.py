"""
Quadruplet loss baseline for two-level taxonomies.

Each quadruplet holds an anchor, a positive with the same full label, a
negative sharing only the coarse label and a negative from another coarse
class. Two hinges with fixed margins push the fine negative at least m_fine
and the coarse negative at least m_coarse further from the anchor than the
positive.
"""

import logging
from typing import List, Optional, Sequence

import attrs
import numpy as np

from hierarchy import LabelPath
from rank_embedding_common import ShapeMismatchError, UnusableBatchError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_MARGIN_FINE = 0.25
DEFAULT_MARGIN_COARSE = 0.5


@attrs.frozen
class Quadruplet:
    anchor: int
    positive: int
    neg_fine: int
    neg_coarse: int


def _check_margins(instance, attribute, value):
    if value < 0:
        raise ValidationError(f"{attribute.name} must be non-negative, got {value}")


@attrs.frozen
class Margins:
    m_fine: float = attrs.field(default=DEFAULT_MARGIN_FINE, validator=_check_margins)
    m_coarse: float = attrs.field(default=DEFAULT_MARGIN_COARSE, validator=_check_margins)

    def __attrs_post_init__(self):
        if not self.m_coarse > self.m_fine:
            raise ValidationError(
                f"coarse margin ({self.m_coarse}) must be larger than fine margin ({self.m_fine})"
            )


def mine_quadruplets(labels: Sequence[LabelPath], seed: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None) -> List[Quadruplet]:
    """
    Build one quadruplet per anchor that has a partner for every role.

    Args:
        labels: Two-level label path of every batch row
        seed: Seed for the partner draws (ignored when rng is given)
        rng: Optional generator to draw from

    Returns:
        List of quadruplets in anchor order; anchors missing a role are skipped
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    paths = [tuple(p) for p in labels]
    # Truncated labels cannot take any role
    usable = [idx for idx, p in enumerate(paths) if len(p) >= 2]

    quads: List[Quadruplet] = []
    for a in usable:
        anchor = paths[a]
        positives, fine_negatives, coarse_negatives = [], [], []
        for other in usable:
            if other == a:
                continue
            path = paths[other]
            if path == anchor:
                positives.append(other)
            elif path[0] == anchor[0]:
                fine_negatives.append(other)
            else:
                coarse_negatives.append(other)
        if not positives or not fine_negatives or not coarse_negatives:
            continue
        quads.append(Quadruplet(
            anchor=a,
            positive=int(rng.choice(positives)),
            neg_fine=int(rng.choice(fine_negatives)),
            neg_coarse=int(rng.choice(coarse_negatives)),
        ))
    logger.debug(f"Mined {len(quads)} quadruplets from {len(paths)} examples")
    return quads


def _quad_arrays(quads: Sequence[Quadruplet]):
    if not quads:
        raise UnusableBatchError("batch yields no quadruplets")
    a = np.array([q.anchor for q in quads], dtype=np.int64)
    p = np.array([q.positive for q in quads], dtype=np.int64)
    nf = np.array([q.neg_fine for q in quads], dtype=np.int64)
    nc = np.array([q.neg_coarse for q in quads], dtype=np.int64)
    return a, p, nf, nc


def _distances(embeddings: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 1.0 - np.einsum("qd,qd->q", embeddings[x], embeddings[y])


def _hinge_terms(embeddings, quads, margins):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ShapeMismatchError(f"embeddings must be a 2-d matrix, got shape {embeddings.shape}")
    a, p, nf, nc = _quad_arrays(quads)
    if max(a.max(), p.max(), nf.max(), nc.max()) >= embeddings.shape[0]:
        raise ShapeMismatchError("quadruplet refers to a row outside the batch")
    d_ap = _distances(embeddings, a, p)
    fine = d_ap - _distances(embeddings, a, nf) + margins.m_fine
    coarse = d_ap - _distances(embeddings, a, nc) + margins.m_coarse
    return embeddings, (a, p, nf, nc), fine, coarse


def quad_forward(embeddings: np.ndarray, quads: Sequence[Quadruplet], margins: Margins) -> float:
    """Mean over quadruplets of the fine hinge plus the coarse hinge."""
    _, _, fine, coarse = _hinge_terms(embeddings, quads, margins)
    return float(np.mean(np.maximum(fine, 0.0) + np.maximum(coarse, 0.0)))


def quad_backward(embeddings: np.ndarray, quads: Sequence[Quadruplet], margins: Margins) -> np.ndarray:
    """Subgradient of quad_forward; inactive hinges contribute zero."""
    embeddings, (a, p, nf, nc), fine, coarse = _hinge_terms(embeddings, quads, margins)
    grad = np.zeros_like(embeddings)
    scale = 1.0 / len(a)

    for active, neg in ((fine > 0, nf), (coarse > 0, nc)):
        if not active.any():
            continue
        qa, qp, qn = a[active], p[active], neg[active]
        # hinge = (1 - <a,p>) - (1 - <a,n>) + m
        np.add.at(grad, qa, scale * (embeddings[qn] - embeddings[qp]))
        np.add.at(grad, qp, -scale * embeddings[qa])
        np.add.at(grad, qn, scale * embeddings[qa])
    return grad
