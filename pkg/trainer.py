"""
Training loop for the projection model.

Prepares the dataset (load or generate, withhold unseen fine classes, split
the development pool), then runs epochs of
plan batches -> forward -> loss -> backward -> step -> validation report,
with early stopping on the validation avSil. Writes per-epoch metrics as
JSON lines, the best checkpoint and the final test/alt_test reports.
"""

import asyncio
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import attrs
import numpy as np

from batching import BatchPlan, plan_balanced, plan_unconstrained
from dataio import Dataset, choose_holdout_fine_classes, load_csv, make_unseen_class_testset, split, synth_generate
from evaluation import EarlyStopper, SilhouetteReport, multilevel_report, stopper_update
from experiment_config import TrainConfig, save_config
from hierarchy import LabelTree, RankMap, build_rank_map, build_tree
from projection_model import (
    FeatureStats,
    OptimizerState,
    ProjectionModel,
    backward,
    embed,
    forward,
    init,
    save_checkpoint,
    standardize,
    step,
)
from quadruplet_loss import Margins, mine_quadruplets, quad_backward, quad_forward
from rank_embedding_common import (
    BATCH_BALANCED,
    LOSS_QUADRUPLET,
    LOSS_RBL,
    SPLIT_ALT_TEST,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
    ConfigError,
    NoIncludedPairsError,
    NonFiniteGradientError,
    NumpyJSONEncoder,
    SplitError,
    UnusableBatchError,
)
from rank_loss import rbl_backward, rbl_forward
from utils import epoch_seed

logger = logging.getLogger("rank_embedding")

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "best_checkpoint.json"
FINAL_REPORT_FILE = "final_report.json"
CONFIG_FILE = "config.json"


def prepare_dataset(config: TrainConfig) -> Dataset:
    """
    Load (or generate) the dataset and tag every row train/val/test/alt_test.

    With holdout_fine_per_coarse > 0, that many fine classes per coarse class
    are withheld as the unseen-class test set; the remaining development pool
    is split 70/20/10.

    Args:
        config: Resolved training configuration

    Returns:
        Dataset with a split tag on every row
    """
    if config.dataset:
        dataset = load_csv(config.dataset)
    else:
        dataset = synth_generate(config.synth.to_spec(config.seed))
    logger.info(f"Dataset has {len(dataset)} examples, {len(dataset.fine_classes)} fine classes, d_in={dataset.d_in}")

    tags: List[Optional[str]] = [None] * len(dataset)
    dev_indices = list(range(len(dataset)))
    if config.holdout_fine_per_coarse > 0:
        dev_classes = choose_holdout_fine_classes(dataset, config.holdout_fine_per_coarse, config.effective_split_seed)
        if len(dev_classes) == len(dataset.fine_classes):
            logger.warning("No fine class could be withheld; running without an unseen-class test set")
        else:
            held_out = make_unseen_class_testset(dataset, dev_classes)
            held_ids = set(held_out.ids)
            dev_indices = [i for i, row_id in enumerate(dataset.ids) if row_id not in held_ids]
            for i, row_id in enumerate(dataset.ids):
                if row_id in held_ids:
                    tags[i] = SPLIT_ALT_TEST

    dev = split(dataset.subset(dev_indices), config.effective_split_seed)
    for i, tag in zip(dev_indices, dev.splits):
        tags[i] = tag

    prepared = dataset.with_splits(tags)
    counts = {tag: int(np.sum(np.array(prepared.splits) == tag))
              for tag in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_ALT_TEST)}
    logger.info(f"Split sizes: {counts}")
    return prepared


def train_tree(dataset: Dataset, config: TrainConfig) -> LabelTree:
    """Label tree of the training split, at the configured height if one is set."""
    return build_tree(dataset.select_split(SPLIT_TRAIN).labels, height=config.label_height)


def evaluate_split(model: Optional[ProjectionModel], dataset: Dataset, split_tag: Optional[str],
                   height: int, metric: str = "cosine",
                   stats: Optional[FeatureStats] = None) -> SilhouetteReport:
    """
    Multilevel silhouette of one split.

    Args:
        model: Projection to embed with; None evaluates standardized raw features
        dataset: Dataset with split tags
        split_tag: Split to evaluate (None for every row)
        height: Number of hierarchy levels to report
        metric: Silhouette distance
        stats: Standardization stats for raw features (defaults to the model's)
    """
    rows = np.arange(len(dataset)) if split_tag is None else dataset.split_indices(split_tag)
    if len(rows) == 0:
        raise SplitError(f"split {split_tag!r} is empty")
    features = dataset.features[rows]
    labels = [dataset.labels[i] for i in rows]
    if model is None:
        if stats is None:
            stats = FeatureStats.from_features(features)
        points = standardize(features, stats)
    else:
        points = embed(model, features)
    return multilevel_report(points, labels, height=height, metric=metric)


@attrs.frozen
class TrainResult:
    output_dir: str
    best_epoch: int
    best_val_avsil: float
    epochs_run: int
    stopped_early: bool
    reports: Dict[str, SilhouetteReport]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "output_dir": self.output_dir,
            "best_epoch": self.best_epoch,
            "best_val_avSil": self.best_val_avsil,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "reports": {tag: report.to_dict() for tag, report in self.reports.items()},
        }


class EmbeddingTrainer:
    """Trains a ProjectionModel with the rank based loss or the quadruplet loss."""

    def __init__(self, config: TrainConfig, dataset: Optional[Dataset] = None):
        self.config = config
        self.dataset = dataset if dataset is not None else prepare_dataset(config)
        self.output_dir = config.output_dir
        self.train_rows = self.dataset.split_indices(SPLIT_TRAIN)

        self.tree = train_tree(self.dataset, config)
        if config.loss == LOSS_QUADRUPLET and self.tree.height != 2:
            raise ConfigError(f"quadruplet loss needs a two-level hierarchy, got height {self.tree.height}")
        train_labels = [self.dataset.labels[i] for i in self.train_rows]
        self.rank_map: RankMap = build_rank_map(self.tree, train_labels)
        self.margins = Margins(config.margin_fine, config.margin_coarse)

        stats = FeatureStats.from_features(self.dataset.features[self.train_rows])
        self.model = init(config.seed, self.dataset.d_in, config.d_out, stats=stats)
        self.optimizer = OptimizerState(
            learning_rate=config.learning_rate,
            algorithm=config.optimizer,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )
        self.stopper = EarlyStopper(patience=config.patience)
        self.best_model = self.model.copy()
        # Standardized once; the stats are fixed for the whole run
        self.x = standardize(self.dataset.features, stats)

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.output_dir, METRICS_FILE)

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.output_dir, CHECKPOINT_FILE)

    def plan_epoch(self, epoch: int) -> BatchPlan:
        seed = epoch_seed(self.config.seed, epoch)
        if self.config.batch_mode == BATCH_BALANCED:
            return plan_balanced(self.dataset, self.rank_map, self.config.batch_size, seed=seed, split=SPLIT_TRAIN)
        return plan_unconstrained(self.dataset, self.config.batch_size, seed=seed, split=SPLIT_TRAIN)

    def _batch_gradient(self, batch: Sequence[int], embeddings: np.ndarray, rng: np.random.Generator):
        labels = [self.dataset.labels[i] for i in batch]
        if self.config.loss == LOSS_RBL:
            loss, table = rbl_forward(embeddings, self.rank_map.pair_ranks(labels))
            return loss, rbl_backward(table, embeddings)
        quads = mine_quadruplets(labels, rng=rng)
        loss = quad_forward(embeddings, quads, self.margins)
        return loss, quad_backward(embeddings, quads, self.margins)

    def run_epoch(self, epoch: int) -> Optional[float]:
        """
        One pass over the training batches.

        Returns:
            Mean loss over the batches that produced an update, None if none did
        """
        plan = self.plan_epoch(epoch)
        rng = np.random.default_rng([self.config.seed, epoch])
        losses: List[float] = []
        skipped = 0
        for batch in plan:
            idx = np.asarray(batch, dtype=np.int64)
            embeddings, cache = forward(self.model, self.x[idx])
            try:
                loss, grad_e = self._batch_gradient(batch, embeddings, rng)
            except (UnusableBatchError, NoIncludedPairsError) as e:
                logger.debug(f"Epoch {epoch}: skipping batch: {e}")
                skipped += 1
                continue
            grad_W, grad_b = backward(cache, grad_e)
            try:
                step(self.model, self.optimizer, grad_W, grad_b)
            except NonFiniteGradientError as e:
                logger.error(f"Epoch {epoch}: {e}; abandoning the rest of the epoch")
                break
            losses.append(loss)
        if skipped:
            logger.debug(f"Epoch {epoch}: skipped {skipped} of {len(plan)} batches")
        return float(np.mean(losses)) if losses else None

    def evaluate(self, model: ProjectionModel, split_tag: str) -> SilhouetteReport:
        return evaluate_split(model, self.dataset, split_tag, self.tree.height, self.config.metric)

    async def _final_reports_async(self, model: ProjectionModel, splits: Sequence[str]) -> Dict[str, SilhouetteReport]:
        tasks = [asyncio.to_thread(self.evaluate, model, tag) for tag in splits]
        reports = await asyncio.gather(*tasks)
        return dict(zip(splits, reports))

    def final_reports(self, model: ProjectionModel) -> Dict[str, SilhouetteReport]:
        """Test and unseen-class test reports of a model, evaluated concurrently."""
        splits = [SPLIT_TEST]
        if SPLIT_ALT_TEST in self.dataset.splits:
            splits.append(SPLIT_ALT_TEST)
        return asyncio.run(self._final_reports_async(model, splits))

    @staticmethod
    def _metrics_line(epoch: int, split_tag: str, report: SilhouetteReport, loss: Optional[float]) -> str:
        record = {
            "epoch": epoch,
            "split": split_tag,
            "sil_per_level": list(report.level_scores),
            "avSil": report.average,
            "loss": loss,
        }
        return json.dumps(record, cls=NumpyJSONEncoder)

    def train(self) -> TrainResult:
        config = self.config
        os.makedirs(self.output_dir, exist_ok=True)
        save_config(config, os.path.join(self.output_dir, CONFIG_FILE))
        logger.info(f"Training {config.loss} with {config.batch_mode} batches of {config.batch_size}; "
                    f"tree height {self.tree.height}, {self.rank_map.num_ranks} ranks; output in {self.output_dir}")

        epochs_run = 0
        stopped_early = False
        with open(self.metrics_path, 'w') as metrics:
            for epoch in range(config.max_epochs + 1):
                loss = None if epoch == 0 else self.run_epoch(epoch)
                epochs_run = epoch
                report = self.evaluate(self.model, SPLIT_VAL)
                metrics.write(self._metrics_line(epoch, SPLIT_VAL, report, loss) + "\n")
                metrics.flush()

                loss_text = "n/a" if loss is None else f"{loss:.6f}"
                logger.info(f"Epoch {epoch}: loss {loss_text}, val avSil {report.average:.4f}")

                decision = stopper_update(self.stopper, report.average, epoch)
                if decision.save_checkpoint:
                    self.best_model = self.model.copy()
                    save_checkpoint(self.best_model, self.checkpoint_path)
                    logger.info(f"Epoch {epoch}: new best val avSil {report.average:.4f}, checkpoint saved")
                if decision.stop:
                    stopped_early = True
                    logger.info(f"Early stopping after epoch {epoch}: no improvement for {config.patience} epochs "
                                f"(best epoch {self.stopper.best_epoch})")
                    break

            reports = self.final_reports(self.best_model)
            for tag, report in reports.items():
                metrics.write(self._metrics_line(self.stopper.best_epoch, tag, report, None) + "\n")

        result = TrainResult(
            output_dir=self.output_dir,
            best_epoch=self.stopper.best_epoch,
            best_val_avsil=self.stopper.best_score,
            epochs_run=epochs_run,
            stopped_early=stopped_early,
            reports=reports,
        )
        with open(os.path.join(self.output_dir, FINAL_REPORT_FILE), 'w') as f:
            json.dump(result.to_dict(), f, indent=2, cls=NumpyJSONEncoder)
        for tag, report in reports.items():
            logger.info(f"Final {tag} report (epoch {result.best_epoch}): {report.to_dict()}")
        return result


def train(config: TrainConfig) -> TrainResult:
    return EmbeddingTrainer(config).train()
