"""
Training batch plans.

Balanced plans guarantee that the pairs inside every batch realize every rank
of the taxonomy (0 .. tree height) at least once; unconstrained plans are plain
shuffled chunks.
"""

import logging
from typing import Dict, List, Optional, Sequence, Set, Tuple

import attrs
import numpy as np

from dataio import Dataset
from hierarchy import LabelPath, RankMap
from rank_embedding_common import (
    BATCH_BALANCED,
    BATCH_UNCONSTRAINED,
    SPLIT_TRAIN,
    UNDETERMINED_RANK,
    CoverageError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 12


@attrs.frozen
class BatchPlan:
    batches: Tuple[Tuple[int, ...], ...]
    mode: str
    seed: Optional[int]
    batch_size: int

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def _pool_indices(dataset: Dataset, split: Optional[str]) -> np.ndarray:
    if split is None or dataset.splits is None:
        return np.arange(len(dataset), dtype=np.int64)
    return dataset.split_indices(split)


def batch_rank_coverage(batch: Sequence[int], labels: Sequence[LabelPath], rank_map: RankMap) -> Set[int]:
    """Ranks realized by the pairs of a batch (undetermined pairs ignored)."""
    ranks = rank_map.pair_ranks([labels[i] for i in batch])
    return {int(r) for r in ranks if r != UNDETERMINED_RANK}


class _RankIndex:
    """Label-level rank matrix over a pool of examples, used to find pair partners quickly."""

    def __init__(self, pool: np.ndarray, labels: Sequence[LabelPath], rank_map: RankMap):
        self.pool = pool
        unique = sorted({labels[i] for i in pool})
        self.label_id = {label: k for k, label in enumerate(unique)}
        self.example_label = {int(i): self.label_id[labels[i]] for i in pool}
        self.members: Dict[int, List[int]] = {k: [] for k in range(len(unique))}
        for i in pool:
            self.members[self.label_id[labels[i]]].append(int(i))
        size = len(unique)
        self.ranks = np.full((size, size), UNDETERMINED_RANK, dtype=np.int64)
        for a in range(size):
            for b in range(size):
                r = rank_map.rank(unique[a], unique[b])
                self.ranks[a, b] = UNDETERMINED_RANK if r is None else r

    def realizable(self, rank: int) -> bool:
        for a, b in zip(*np.nonzero(self.ranks == rank)):
            if a != b or len(self.members[int(a)]) >= 2:
                return True
        return False

    def partners(self, example: int, rank: int, taken: Set[int]) -> List[int]:
        row = self.ranks[self.example_label[example]]
        found = []
        for label in np.flatnonzero(row == rank):
            found.extend(i for i in self.members[int(label)] if i != example and i not in taken)
        return found

    def fresh_pair(self, rank: int, taken: Set[int], rng: np.random.Generator) -> Optional[Tuple[int, int]]:
        """Draw a label pair of the given rank uniformly, then one free example from each side."""
        options = []
        for a, b in zip(*np.nonzero(self.ranks == rank)):
            if a > b:
                continue
            left = [i for i in self.members[int(a)] if i not in taken]
            if a == b:
                if len(left) >= 2:
                    options.append((left, None))
                continue
            right = [i for i in self.members[int(b)] if i not in taken]
            if left and right:
                options.append((left, right))
        if not options:
            return None
        left, right = options[int(rng.integers(len(options)))]
        if right is None:
            x, y = rng.choice(len(left), size=2, replace=False)
            return left[int(x)], left[int(y)]
        return left[int(rng.integers(len(left)))], right[int(rng.integers(len(right)))]


def plan_balanced(dataset: Dataset, rank_map: RankMap, batch_size: int = DEFAULT_BATCH_SIZE,
                  seed: Optional[int] = None, split: Optional[str] = SPLIT_TRAIN) -> BatchPlan:
    """
    Build ceil(n / batch_size) batches whose pairs cover every rank 0..L.

    Each batch starts from a rank-covering skeleton (for a two-level tree: two
    examples of one fine class, one from a sibling fine class and one from
    another coarse class) and is filled from a shuffled pass over the pool.

    Args:
        dataset: Dataset holding the examples
        rank_map: Rank map of the training labels
        batch_size: Examples per batch
        seed: Seed for every random choice
        split: Split whose rows form the pool (None for all rows)
    """
    if batch_size < 2:
        raise ValidationError(f"batch size must be at least 2, got {batch_size}")
    pool = _pool_indices(dataset, split)
    required = list(range(rank_map.tree.height + 1))
    if len(pool) < 2:
        raise CoverageError("fewer than 2 examples available for balanced batches",
                            missing_rank=required[0])

    index = _RankIndex(pool, dataset.labels, rank_map)
    for r in required:
        if not index.realizable(r):
            raise CoverageError(f"no pair of training examples has rank {r}", missing_rank=r)

    rng = np.random.default_rng(seed)
    fill_queue: List[int] = []
    num_batches = int(np.ceil(len(pool) / batch_size))
    size = min(batch_size, len(pool))
    batches = []

    for _ in range(num_batches):
        batch: List[int] = []
        taken: Set[int] = set()
        covered: Set[int] = set()

        for r in required:
            if r in covered:
                continue
            candidates: List[int] = []
            for member in (rng.permutation(batch) if batch else []):
                candidates = index.partners(int(member), r, taken)
                if candidates:
                    break
            if candidates:
                chosen = [candidates[int(rng.integers(len(candidates)))]]
            else:
                pair = index.fresh_pair(r, taken, rng)
                if pair is None:
                    raise CoverageError(f"cannot place a rank-{r} pair in a batch", missing_rank=r)
                chosen = list(pair)
            if len(batch) + len(chosen) > size:
                raise CoverageError(
                    f"batch size {batch_size} is too small to cover ranks {required}", missing_rank=r
                )
            for i in chosen:
                batch.append(i)
                taken.add(i)
            covered = batch_rank_coverage(batch, dataset.labels, rank_map)

        while len(batch) < size:
            if not fill_queue:
                fill_queue = [int(i) for i in rng.permutation(pool)]
            candidate = fill_queue.pop()
            if candidate in taken:
                continue
            batch.append(candidate)
            taken.add(candidate)

        batches.append(tuple(batch))

    logger.debug(f"Planned {len(batches)} balanced batches of {size} from {len(pool)} examples")
    return BatchPlan(batches=tuple(batches), mode=BATCH_BALANCED, seed=seed, batch_size=batch_size)


def plan_unconstrained(dataset: Dataset, batch_size: int = DEFAULT_BATCH_SIZE,
                       seed: Optional[int] = None, split: Optional[str] = SPLIT_TRAIN) -> BatchPlan:
    """Shuffle the pool and cut it into consecutive chunks; a final chunk under 2 examples is dropped."""
    if batch_size < 2:
        raise ValidationError(f"batch size must be at least 2, got {batch_size}")
    pool = _pool_indices(dataset, split)
    if len(pool) < 2:
        raise ValidationError(f"need at least 2 examples to form a batch, got {len(pool)}")
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(pool)]
    batches = [tuple(order[k:k + batch_size]) for k in range(0, len(order), batch_size)]
    if len(batches[-1]) < 2:
        batches.pop()
    return BatchPlan(batches=tuple(batches), mode=BATCH_UNCONSTRAINED, seed=seed, batch_size=batch_size)
