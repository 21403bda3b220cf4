"""
Rank based loss over a batch of unit-norm embeddings.

For every pair of batch rows the cosine distance is computed and all included
distances are sorted. Each rank owns a contiguous span of sorted positions
(rank 0 first), and the distance found at the middle of that span becomes the
target for every pair of that rank. A pair whose distance could sit inside its
rank's span is correct and contributes nothing; a wrong pair contributes the
squared gap to its target. The loss averages over all included pairs.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import attrs
import numpy as np

from rank_embedding_common import (
    UNDETERMINED_RANK,
    NoIncludedPairsError,
    NonUnitEmbeddingError,
    ShapeMismatchError,
    ValidationError,
)

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-6


@attrs.frozen
class RankSpans:
    """Sorted-position span and target distance of every rank present in a batch."""
    ranks: np.ndarray
    counts: np.ndarray
    starts: np.ndarray
    targets: np.ndarray

    @property
    def ends(self) -> np.ndarray:
        return self.starts + self.counts - 1

    def as_dict(self) -> Dict[int, Tuple[int, int, float]]:
        return {
            int(r): (int(s), int(e), float(t))
            for r, s, e, t in zip(self.ranks, self.starts, self.ends, self.targets)
        }


@attrs.frozen
class PairTable:
    """
    Per-pair bookkeeping for one batch, indexed like np.triu_indices(n, k=1).
    Excluded pairs have position -1, target NaN and correct False.
    """
    n: int
    i: np.ndarray
    j: np.ndarray
    dist: np.ndarray
    rank: np.ndarray
    position: np.ndarray
    target: np.ndarray
    correct: np.ndarray
    included: np.ndarray

    @property
    def num_pairs(self) -> int:
        return len(self.dist)

    @property
    def num_included(self) -> int:
        return int(self.included.sum())

    @property
    def wrong(self) -> np.ndarray:
        return self.included & ~self.correct


def _check_unit_rows(embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ShapeMismatchError(f"embeddings must be a 2-d matrix, got shape {embeddings.shape}")
    if embeddings.shape[0] < 2:
        raise ValidationError(f"need at least 2 embeddings to form pairs, got {embeddings.shape[0]}")
    norms = np.linalg.norm(embeddings, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
    if bad.size:
        raise NonUnitEmbeddingError(
            f"row {int(bad[0])} has norm {norms[bad[0]]:.9f}; embeddings must be unit-norm"
        )
    return embeddings


def pairwise_cosine_distances(embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Cosine distances of all i<j pairs of unit-norm rows.

    Returns:
        (i, j, d) arrays where d = 1 - <e_i, e_j> clamped to [0, 2]
    """
    embeddings = _check_unit_rows(embeddings)
    rows, cols = np.triu_indices(embeddings.shape[0], k=1)
    dots = np.einsum("pd,pd->p", embeddings[rows], embeddings[cols])
    dist = np.clip(1.0 - dots, 0.0, 2.0)
    return rows, cols, dist


def assign_targets(
    distances: Sequence[float],
    ranks: Sequence[int],
    pairs: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    n: Optional[int] = None,
) -> Tuple[RankSpans, PairTable]:
    """
    Sort included distances, allot each present rank its span of positions,
    read the target at the middle of each span and flag each pair as correct
    when one of its tied positions falls inside its rank's span.

    Args:
        distances: One distance per pair
        ranks: One rank per pair, UNDETERMINED_RANK for excluded pairs
        pairs: Optional (i, j) row indices of the pairs
        n: Batch size the pairs were drawn from

    Returns:
        (RankSpans, PairTable)
    """
    dist = np.asarray(distances, dtype=np.float64)
    rank = np.asarray(ranks, dtype=np.int64)
    if dist.shape != rank.shape or dist.ndim != 1:
        raise ShapeMismatchError(f"got {dist.shape} distances for {rank.shape} ranks")

    included = rank != UNDETERMINED_RANK
    if not included.any():
        raise NoIncludedPairsError("every pair in the batch has an undetermined rank")

    inc_idx = np.flatnonzero(included)
    inc_dist = dist[inc_idx]
    inc_rank = rank[inc_idx]

    # Stable sort keeps pair-index order for exact ties
    order = np.argsort(inc_dist, kind="stable")
    sorted_dist = inc_dist[order]
    inc_pos = np.empty(len(inc_idx), dtype=np.int64)
    inc_pos[order] = np.arange(len(inc_idx))

    present, counts = np.unique(inc_rank, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    span_targets = sorted_dist[starts + counts // 2]
    spans = RankSpans(ranks=present, counts=counts, starts=starts, targets=span_targets)

    span_of = np.searchsorted(present, inc_rank)
    span_start = starts[span_of]
    span_end = starts[span_of] + counts[span_of] - 1

    # Lenient ties: any position holding an equal distance is a valid position
    tie_lo = np.searchsorted(sorted_dist, inc_dist, side="left")
    tie_hi = np.searchsorted(sorted_dist, inc_dist, side="right") - 1
    inc_correct = (tie_lo <= span_end) & (tie_hi >= span_start)

    position = np.full(len(dist), -1, dtype=np.int64)
    position[inc_idx] = inc_pos
    target = np.full(len(dist), np.nan)
    target[inc_idx] = span_targets[span_of]
    correct = np.zeros(len(dist), dtype=bool)
    correct[inc_idx] = inc_correct

    if pairs is None:
        if n is None:
            # Recover n from P = n(n-1)/2
            n = int(round((1 + np.sqrt(1 + 8 * len(dist))) / 2))
        rows, cols = np.triu_indices(n, k=1)
        if len(rows) != len(dist):
            raise ShapeMismatchError(f"{len(dist)} distances do not form all pairs of a batch of {n}")
    else:
        rows, cols = (np.asarray(a, dtype=np.int64) for a in pairs)
        if n is None:
            n = int(max(rows.max(), cols.max()) + 1) if len(rows) else 0

    table = PairTable(
        n=int(n),
        i=rows,
        j=cols,
        dist=dist,
        rank=rank,
        position=position,
        target=target,
        correct=correct,
        included=included,
    )
    return spans, table


def rbl_forward(embeddings: np.ndarray, ranks: Sequence[int]) -> Tuple[float, PairTable]:
    """
    Rank based loss of a batch.

    Args:
        embeddings: N x d matrix of unit-norm rows
        ranks: Rank per i<j pair (np.triu_indices order), UNDETERMINED_RANK to exclude

    Returns:
        (loss, PairTable) where loss = mean over included pairs of the
        squared target gap of wrong pairs
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    rows, cols, dist = pairwise_cosine_distances(embeddings)
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) != len(dist):
        raise ShapeMismatchError(
            f"batch of {embeddings.shape[0]} rows has {len(dist)} pairs but {len(ranks)} ranks were given"
        )
    _, table = assign_targets(dist, ranks, pairs=(rows, cols), n=embeddings.shape[0])
    wrong = table.wrong
    gap = table.dist[wrong] - table.target[wrong]
    loss = float(np.sum(gap ** 2) / table.num_included)
    return loss, table


def frozen_rbl_loss(pair_table: PairTable, embeddings: np.ndarray) -> float:
    """
    Loss with targets, spans and correctness flags frozen to those in
    pair_table and distances recomputed as 1 - <e_i, e_j> (no clamping, no
    norm check). This is the function whose gradient rbl_backward returns.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    wrong = pair_table.wrong
    i = pair_table.i[wrong]
    j = pair_table.j[wrong]
    dist = 1.0 - np.einsum("pd,pd->p", embeddings[i], embeddings[j])
    gap = dist - pair_table.target[wrong]
    return float(np.sum(gap ** 2) / pair_table.num_included)


def rbl_backward(pair_table: PairTable, embeddings: np.ndarray) -> np.ndarray:
    """
    Gradient of the loss with respect to the batch embeddings, treating
    targets and correctness flags as constants.

    Returns:
        N x d gradient matrix
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != pair_table.n:
        raise ShapeMismatchError(
            f"pair table was built for {pair_table.n} rows, got embeddings of shape {embeddings.shape}"
        )
    grad = np.zeros_like(embeddings)
    wrong = pair_table.wrong
    if not wrong.any():
        return grad

    i = pair_table.i[wrong]
    j = pair_table.j[wrong]
    coef = (2.0 / pair_table.num_included) * (pair_table.dist[wrong] - pair_table.target[wrong])
    # d = 1 - <e_i, e_j>, so dd/de_i = -e_j and dd/de_j = -e_i
    np.add.at(grad, i, -coef[:, None] * embeddings[j])
    np.add.at(grad, j, -coef[:, None] * embeddings[i])
    return grad
