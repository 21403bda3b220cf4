"""
Common constants, exceptions and logging setup shared by the training,
evaluation and command-line modules.
"""

import json
import logging
import os
from typing import Optional

import numpy as np

from dotenv_config import get_logging_config

logger = logging.getLogger("rank_embedding")

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

# Label paths are stored as '/'-joined strings
LABEL_SEPARATOR = "/"

# Split tags
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLIT_ALT_TEST = "alt_test"
ALL_SPLITS = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_ALT_TEST)

# Loss and batch-mode names
LOSS_RBL = "rbl"
LOSS_QUADRUPLET = "quadruplet"
BATCH_BALANCED = "balanced"
BATCH_UNCONSTRAINED = "unconstrained"

# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# Rank sentinel used in per-pair rank vectors
UNDETERMINED_RANK = -1


class RankEmbeddingError(Exception):
    """Base class for all errors raised by this project."""


class ValidationError(RankEmbeddingError, ValueError):
    """Invalid input data, labels or configuration."""


class ConfigError(ValidationError):
    pass


class LabelPathError(ValidationError):
    pass


class TreeConstructionError(ValidationError):
    pass


class LabelNotInTreeError(ValidationError):
    pass


class DatasetParseError(ValidationError):
    """A dataset file could not be parsed; `row` is the 1-based line number in the file."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class RaggedRowError(DatasetParseError):
    pass


class NonNumericFeatureError(DatasetParseError):
    pass


class DuplicateIdError(DatasetParseError):
    pass


class SplitError(ValidationError):
    pass


class CoverageError(ValidationError):
    """A balanced batch cannot realize every rank; `missing_rank` names the first one that fails."""

    def __init__(self, message: str, missing_rank: Optional[int] = None):
        self.missing_rank = missing_rank
        super().__init__(message)


class ShapeMismatchError(ValidationError):
    pass


class NonUnitEmbeddingError(ValidationError):
    pass


class NoIncludedPairsError(ValidationError):
    pass


class UnusableBatchError(ValidationError):
    pass


class UndefinedScoreError(ValidationError):
    pass


class NumericError(RankEmbeddingError, ArithmeticError):
    """Numerical failure during training or evaluation."""


class DegenerateOutputError(NumericError):
    pass


class NonFiniteGradientError(NumericError):
    pass


class NumpyJSONEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays"""
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)


def setup_logging(level: Optional[int] = None, log_file: Optional[str] = None) -> None:
    """
    Configure the root logger with a console handler and a file handler.

    Args:
        level: Logging level; defaults to RBL_LOG_LEVEL from the environment
        log_file: Log file path; defaults to RBL_LOG_FILE from the environment
    """
    log_config = get_logging_config()
    if level is None:
        level = logging.getLevelName(log_config["log_level"])
        if not isinstance(level, int):
            level = logging.INFO
    if log_file is None:
        log_file = log_config["log_file"]

    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    root.addHandler(console_handler)

    if not log_config["log_to_file"]:
        return

    try:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(log_file, mode='a')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    except OSError as e:
        print(f"Warning: Could not set up log file at {log_file}: {e}")
        print("Using fallback log file: rank_embedding.log")
        fallback_handler = logging.FileHandler('rank_embedding.log', mode='a')
        fallback_handler.setFormatter(formatter)
        root.addHandler(fallback_handler)
