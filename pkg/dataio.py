"""
Dataset ingestion and preparation.

The ingestion format is a CSV file with header `id,labels,f0,...,f{d-1}`,
where `labels` is a '/'-joined label path (truncate it for incomplete labels).
Also provides the seeded 70/20/10 split, unseen-class test sets and a
hierarchical Gaussian generator for desk-scale experiments.
"""

import csv
import io
import logging
import math
import os
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import attrs
import numpy as np

from hierarchy import LabelPath, format_label_path, parse_label_path
from rank_embedding_common import (
    ALL_SPLITS,
    SPLIT_ALT_TEST,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
    DatasetParseError,
    DuplicateIdError,
    LabelPathError,
    NonNumericFeatureError,
    RaggedRowError,
    SplitError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = {SPLIT_TRAIN: 0.7, SPLIT_VAL: 0.2, SPLIT_TEST: 0.1}
MIN_SPLIT_SIZE = 10
MIN_STRATIFY_COUNT = 3


@attrs.frozen
class Dataset:
    """Feature rows with label paths, unique ids and an optional split tag per row."""
    features: np.ndarray
    labels: Tuple[LabelPath, ...]
    ids: Tuple[str, ...]
    splits: Optional[Tuple[str, ...]] = None

    def __attrs_post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValidationError(f"features must be a 2-d matrix, got shape {self.features.shape}")
        if len(self.labels) != n or len(self.ids) != n:
            raise ValidationError("features, labels and ids must have the same number of rows")
        if self.splits is not None:
            if len(self.splits) != n:
                raise ValidationError("split tags must cover every row")
            unknown = set(self.splits) - set(ALL_SPLITS)
            if unknown:
                raise ValidationError(f"unknown split tags: {sorted(unknown)}")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])

    @property
    def fine_classes(self) -> List[LabelPath]:
        return sorted(set(self.labels))

    def split_indices(self, tag: str) -> np.ndarray:
        if self.splits is None:
            raise SplitError("dataset has not been split")
        return np.array([i for i, s in enumerate(self.splits) if s == tag], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=tuple(self.labels[i] for i in idx),
            ids=tuple(self.ids[i] for i in idx),
            splits=None if self.splits is None else tuple(self.splits[i] for i in idx),
        )

    def select_split(self, tag: str) -> "Dataset":
        return self.subset(self.split_indices(tag))

    def with_splits(self, splits: Sequence[str]) -> "Dataset":
        return attrs.evolve(self, splits=tuple(splits))


@attrs.frozen
class SynthSpec:
    """Hierarchical Gaussian generator settings."""
    coarse: int = 3
    fine_per_coarse: int = 4
    per_class: int = 60
    d_in: int = 128
    coarse_spread: float = 1.0
    fine_spread: float = 0.6
    noise: float = 1.3
    seed: int = 0

    def __attrs_post_init__(self):
        for name in ("coarse", "fine_per_coarse", "per_class", "d_in"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("coarse_spread", "fine_spread", "noise"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")


def _checked_rows(reader) -> Iterator[List[str]]:
    """Yield csv rows, reporting reader errors (e.g. an oversized field) as parse errors."""
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except csv.Error as e:
            raise DatasetParseError(f"malformed CSV ({e})", row=reader.line_num) from e
        yield row


def load_csv(path: str) -> Dataset:
    """
    Load a dataset CSV.

    Args:
        path: CSV file with header `id,labels,f0,...`

    Returns:
        Dataset without split tags
    """
    if not os.path.isfile(path):
        raise DatasetParseError(f"dataset file not found: {path}")

    with open(path, 'rb') as f:
        raw = f.read()
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise DatasetParseError(
            f"invalid UTF-8 byte at offset {e.start}", row=raw.count(b"\n", 0, e.start) + 1
        ) from e

    with io.StringIO(text, newline='') as f:
        reader = _checked_rows(csv.reader(f))
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("dataset file is empty", row=1)

        if len(header) < 3 or header[0].strip() != "id" or header[1].strip() != "labels":
            raise DatasetParseError("header must start with 'id,labels' followed by feature columns", row=1)
        d_in = len(header) - 2

        ids: List[str] = []
        labels: List[LabelPath] = []
        rows: List[List[float]] = []
        seen: Dict[str, int] = {}

        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d_in + 2:
                raise RaggedRowError(
                    f"expected {d_in} features, found {len(row) - 2}", row=row_number
                )
            row_id = row[0].strip()
            if row_id in seen:
                raise DuplicateIdError(
                    f"id {row_id!r} already used on row {seen[row_id]}", row=row_number
                )
            seen[row_id] = row_number
            try:
                label = parse_label_path(row[1])
            except LabelPathError as e:
                raise DatasetParseError(str(e), row=row_number) from e
            try:
                values = [float(cell) for cell in row[2:]]
            except ValueError as e:
                raise NonNumericFeatureError(f"non-numeric feature value ({e})", row=row_number) from e
            if not all(math.isfinite(v) for v in values):
                raise NonNumericFeatureError("feature values must be finite", row=row_number)

            ids.append(row_id)
            labels.append(label)
            rows.append(values)

    features = np.array(rows, dtype=np.float64).reshape(len(rows), d_in)
    logger.info(f"Loaded {len(ids)} examples with {d_in} features from {path}")
    return Dataset(features=features, labels=tuple(labels), ids=tuple(ids))


def save_csv(dataset: Dataset, path: str) -> None:
    """Write a dataset in the ingestion format (floats use their shortest round-trip repr)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(["id", "labels"] + [f"f{k}" for k in range(dataset.d_in)])
        for row_id, label, values in zip(dataset.ids, dataset.labels, dataset.features):
            writer.writerow([row_id, format_label_path(label)] + [repr(float(v)) for v in values])
    logger.info(f"Wrote {len(dataset)} examples to {path}")


def _split_counts(n: int) -> Dict[str, int]:
    n_val = int(round(n * SPLIT_FRACTIONS[SPLIT_VAL]))
    n_test = int(round(n * SPLIT_FRACTIONS[SPLIT_TEST]))
    return {SPLIT_TRAIN: n - n_val - n_test, SPLIT_VAL: n_val, SPLIT_TEST: n_test}


def split(dataset: Dataset, seed: int) -> Dataset:
    """
    Assign train/val/test tags at 70/20/10. Stratified by fine class when
    every fine class has at least three examples, so every class keeps at
    least one training example.
    """
    n = len(dataset)
    if n < MIN_SPLIT_SIZE:
        raise SplitError(f"need at least {MIN_SPLIT_SIZE} examples to split, got {n}")
    rng = np.random.default_rng(seed)
    targets = _split_counts(n)

    by_class: Dict[LabelPath, List[int]] = {}
    for idx, label in enumerate(dataset.labels):
        by_class.setdefault(label, []).append(idx)
    stratify = all(len(members) >= MIN_STRATIFY_COUNT for members in by_class.values())

    tags = [SPLIT_TRAIN] * n
    if not stratify:
        logger.info("Some fine classes have fewer than 3 examples; splitting without stratification")
        order = rng.permutation(n)
        for idx in order[:targets[SPLIT_VAL]]:
            tags[idx] = SPLIT_VAL
        for idx in order[targets[SPLIT_VAL]:targets[SPLIT_VAL] + targets[SPLIT_TEST]]:
            tags[idx] = SPLIT_TEST
        return dataset.with_splits(tags)

    classes = sorted(by_class)
    pools: Dict[LabelPath, List[int]] = {}
    assigned = {SPLIT_VAL: 0, SPLIT_TEST: 0}
    for label in classes:
        members = [by_class[label][k] for k in rng.permutation(len(by_class[label]))]
        k_val = int(math.floor(len(members) * SPLIT_FRACTIONS[SPLIT_VAL]))
        k_test = int(math.floor(len(members) * SPLIT_FRACTIONS[SPLIT_TEST]))
        for idx in members[:k_val]:
            tags[idx] = SPLIT_VAL
        for idx in members[k_val:k_val + k_test]:
            tags[idx] = SPLIT_TEST
        assigned[SPLIT_VAL] += k_val
        assigned[SPLIT_TEST] += k_test
        pools[label] = members[k_val + k_test:]

    # Top up val/test from the classes' remaining training members, round robin
    for tag in (SPLIT_VAL, SPLIT_TEST):
        deficit = targets[tag] - assigned[tag]
        while deficit > 0:
            donors = [label for label in classes if len(pools[label]) > 1]
            if not donors:
                break
            for k in rng.permutation(len(donors)):
                if deficit == 0:
                    break
                idx = pools[donors[k]].pop()
                tags[idx] = tag
                deficit -= 1

    return dataset.with_splits(tags)


def choose_holdout_fine_classes(dataset: Dataset, per_coarse: int, seed: int) -> Set[LabelPath]:
    """
    Pick `per_coarse` fine classes under each coarse class to withhold.

    Returns:
        The development fine-class set (everything not withheld)
    """
    rng = np.random.default_rng(seed)
    fine_by_coarse: Dict[str, List[LabelPath]] = {}
    for label in dataset.fine_classes:
        if len(label) < 2:
            continue
        fine_by_coarse.setdefault(label[0], []).append(label)

    dev = set(dataset.fine_classes)
    for coarse in sorted(fine_by_coarse):
        members = fine_by_coarse[coarse]
        if len(members) <= per_coarse:
            logger.warning(f"Coarse class {coarse!r} has only {len(members)} fine classes; none withheld")
            continue
        for k in rng.choice(len(members), size=per_coarse, replace=False):
            dev.discard(members[int(k)])
    return dev


def make_unseen_class_testset(pool: Dataset, dev_fine_classes: Iterable[LabelPath]) -> Dataset:
    """
    Rows whose fine class is outside the development set, tagged alt_test.
    """
    dev = {tuple(label) for label in dev_fine_classes}
    indices = [i for i, label in enumerate(pool.labels) if label not in dev]
    if not indices:
        raise SplitError("no rows outside the development fine classes; unseen-class test set is empty")
    dev_coarse = {label[0] for label in dev}
    novel_coarse = {pool.labels[i][0] for i in indices} - dev_coarse
    if novel_coarse:
        logger.warning(f"Unseen-class test set contains coarse classes absent from development: {sorted(novel_coarse)}")
    held_out = pool.subset(indices)
    return held_out.with_splits([SPLIT_ALT_TEST] * len(held_out))


def synth_generate(spec: SynthSpec) -> Dataset:
    """
    Generate nested Gaussian clusters: coarse centers, fine centers offset from
    their coarse center, samples around their fine center.
    """
    rng = np.random.default_rng(spec.seed)
    features: List[np.ndarray] = []
    labels: List[LabelPath] = []
    ids: List[str] = []
    for i in range(spec.coarse):
        coarse_center = rng.normal(0.0, spec.coarse_spread, size=spec.d_in)
        for j in range(spec.fine_per_coarse):
            fine_center = coarse_center + rng.normal(0.0, spec.fine_spread, size=spec.d_in)
            samples = fine_center + rng.normal(0.0, spec.noise, size=(spec.per_class, spec.d_in))
            features.append(samples)
            for k in range(spec.per_class):
                labels.append((f"c{i}", f"f{i}_{j}"))
                ids.append(f"c{i}_f{j}_{k:04d}")
    return Dataset(features=np.vstack(features), labels=tuple(labels), ids=tuple(ids))
