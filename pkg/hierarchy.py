"""
Label taxonomy construction and pair ranks.

A label path lists class names from the coarsest level to the finest, e.g.
("guitar", "guitar_003"). Paths shorter than the tree height are incomplete
labels: only their known prefix is used.

The rank of a pair is L - depth(LCA), where L is the tree height and the root
has depth 0. Identical full-depth paths have rank 0.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import attrs
import numpy as np

from rank_embedding_common import (
    LABEL_SEPARATOR,
    UNDETERMINED_RANK,
    LabelNotInTreeError,
    LabelPathError,
    TreeConstructionError,
)

logger = logging.getLogger(__name__)

LabelPath = Tuple[str, ...]

ROOT: LabelPath = ()


def parse_label_path(text: str) -> LabelPath:
    """Parse a '/'-joined label string such as 'c0/f0_1' into a LabelPath."""
    if text is None or not str(text).strip():
        raise LabelPathError("label path is empty")
    segments = tuple(str(text).strip().split(LABEL_SEPARATOR))
    return validate_label_path(segments)


def validate_label_path(segments: Iterable[str]) -> LabelPath:
    path = tuple(segments)
    if not path:
        raise LabelPathError("label path is empty")
    for segment in path:
        if not isinstance(segment, str) or segment == "":
            raise LabelPathError(f"label path {path!r} contains an empty segment")
        if LABEL_SEPARATOR in segment:
            raise LabelPathError(f"label {segment!r} contains the reserved separator '{LABEL_SEPARATOR}'")
    return path


def format_label_path(path: LabelPath) -> str:
    return LABEL_SEPARATOR.join(validate_label_path(path))


@attrs.frozen
class LabelTree:
    """
    Rooted label taxonomy. Nodes are identified by their prefix from the root,
    so sibling labels are unique by construction and every node has one parent.
    """
    height: int
    children: Dict[LabelPath, Tuple[str, ...]]

    @property
    def nodes(self) -> List[LabelPath]:
        return sorted(self.children.keys(), key=lambda p: (len(p), p))

    def contains(self, path: LabelPath) -> bool:
        return tuple(path) in self.children

    def parent(self, path: LabelPath) -> Optional[LabelPath]:
        path = tuple(path)
        if path == ROOT:
            return None
        if path not in self.children:
            raise LabelNotInTreeError(f"label path {format_label_path(path)!r} is not in the tree")
        return path[:-1]

    def leaves(self) -> List[LabelPath]:
        return [node for node in self.nodes if len(node) == self.height]

    def internal_nodes(self) -> List[LabelPath]:
        return [node for node in self.nodes if 0 < len(node) < self.height]


def build_tree(paths: Sequence[LabelPath], height: Optional[int] = None) -> LabelTree:
    """
    Build the minimal tree containing every label path.

    Args:
        paths: Label paths; the longest ones define the tree height
        height: Optional explicit height; every path must fit within it

    Returns:
        LabelTree of height L where truncated paths only create internal nodes
    """
    if not paths:
        raise TreeConstructionError("cannot build a label tree from an empty path list")
    validated = [validate_label_path(p) for p in paths]
    max_length = max(len(p) for p in validated)

    if height is None:
        height = max_length
    if height < 1:
        raise TreeConstructionError(f"tree height must be at least 1, got {height}")
    if max_length > height:
        too_deep = next(p for p in validated if len(p) > height)
        raise TreeConstructionError(
            f"inconsistent depths: {format_label_path(too_deep)!r} has {len(too_deep)} levels "
            f"but the taxonomy has {height}"
        )
    if max_length < height:
        raise TreeConstructionError(
            f"inconsistent depths: no label reaches the declared height {height} (deepest is {max_length})"
        )

    children: Dict[LabelPath, Set[str]] = {ROOT: set()}
    for path in validated:
        for level in range(1, len(path) + 1):
            prefix = path[:level]
            children.setdefault(prefix, set())
            children[prefix[:-1]].add(prefix[-1])

    frozen_children = {node: tuple(sorted(labels)) for node, labels in children.items()}
    logger.debug(f"Built label tree of height {height} with {len(frozen_children) - 1} nodes")
    return LabelTree(height=height, children=frozen_children)


def pair_rank(tree: LabelTree, a: LabelPath, b: LabelPath) -> Optional[int]:
    """
    Rank of a pair of label paths: tree height minus the depth of their lowest
    common ancestor. Returns None when a truncated path stops before the two
    paths are known to diverge.
    """
    a = tuple(a)
    b = tuple(b)
    for path in (a, b):
        if not tree.contains(path) or path == ROOT:
            raise LabelNotInTreeError(f"label path {LABEL_SEPARATOR.join(path)!r} is not in the tree")

    common = 0
    for x, y in zip(a, b):
        if x != y:
            break
        common += 1

    diverged = common < len(a) and common < len(b)
    if diverged:
        return tree.height - common
    if len(a) == len(b) == tree.height:
        return 0
    # One path ends inside the other's prefix before the leaf level
    return None


@attrs.frozen
class RankMap:
    """Precomputed pair ranks for a set of label paths."""
    tree: LabelTree
    num_ranks: int
    lookup: Dict[Tuple[LabelPath, LabelPath], Optional[int]]

    def rank(self, a: LabelPath, b: LabelPath) -> Optional[int]:
        a = tuple(a)
        b = tuple(b)
        key = (a, b) if a <= b else (b, a)
        if key in self.lookup:
            return self.lookup[key]
        return pair_rank(self.tree, a, b)

    def pair_ranks(self, labels: Sequence[LabelPath]) -> np.ndarray:
        """
        Ranks for all i<j pairs of a batch, in np.triu_indices order.
        Undetermined pairs are marked with UNDETERMINED_RANK.
        """
        n = len(labels)
        rows, cols = np.triu_indices(n, k=1)
        ranks = np.empty(len(rows), dtype=np.int64)
        for p, (i, j) in enumerate(zip(rows, cols)):
            r = self.rank(labels[i], labels[j])
            ranks[p] = UNDETERMINED_RANK if r is None else r
        return ranks

    @property
    def present_ranks(self) -> Tuple[int, ...]:
        return tuple(sorted({r for r in self.lookup.values() if r is not None}))


def build_rank_map(tree: LabelTree, paths: Sequence[LabelPath]) -> RankMap:
    """
    Compute ranks for every pair of distinct label paths (including a path
    with itself). The number of ranks is one more than the largest rank seen.
    """
    if not paths:
        raise TreeConstructionError("cannot build a rank map from an empty path list")
    unique = sorted({tuple(p) for p in paths})
    lookup: Dict[Tuple[LabelPath, LabelPath], Optional[int]] = {}
    for i, a in enumerate(unique):
        for b in unique[i:]:
            lookup[(a, b)] = pair_rank(tree, a, b)

    determined = [r for r in lookup.values() if r is not None]
    if not determined:
        raise TreeConstructionError("no pair of labels has a decidable rank")
    num_ranks = 1 + max(determined)
    logger.debug(f"Rank map over {len(unique)} labels has {num_ranks} ranks")
    return RankMap(tree=tree, num_ranks=num_ranks, lookup=lookup)
