"""
Finite-difference checks of the analytic gradients.

Three suites, each over seeded random trials:
  rank_loss        rbl_backward against the frozen-target loss
  quadruplet_loss  quad_backward away from hinge kinks
  projection_chain standardize -> linear -> normalize -> rank loss, over W and b
"""

import logging
from typing import Callable, List, Optional, Sequence

import attrs
import numpy as np

from hierarchy import LabelPath, build_rank_map, build_tree
from projection_model import FeatureStats, backward, forward, init, standardize
from quadruplet_loss import Margins, mine_quadruplets, quad_backward, quad_forward
from rank_loss import frozen_rbl_loss, rbl_backward, rbl_forward
from utils import central_difference, relative_error

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 20
TOLERANCE = 1e-4
FD_STEP = 1e-5
KINK_DISTANCE = 1e-3
MAX_RESAMPLES = 50


@attrs.frozen
class SuiteResult:
    name: str
    trials: int
    max_relative_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.max_relative_error < self.tolerance


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _random_labels(rng: np.random.Generator, n: int, depth: int, branching: int = 2) -> List[LabelPath]:
    return [
        tuple(f"l{level}_{int(rng.integers(branching))}" for level in range(depth))
        for _ in range(n)
    ]


def _batch_ranks(labels: Sequence[LabelPath]) -> np.ndarray:
    tree = build_tree(labels)
    return build_rank_map(tree, labels).pair_ranks(labels)


def check_rank_loss(seed: int = 0, trials: int = DEFAULT_TRIALS,
                    backward_fn: Callable = rbl_backward) -> SuiteResult:
    worst = 0.0
    done = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 1])
        n = int(rng.integers(4, 9))
        d = int(rng.integers(3, 6))
        labels = _random_labels(rng, n, depth=int(rng.integers(2, 4)))
        ranks = _batch_ranks(labels)
        for _ in range(MAX_RESAMPLES):
            embeddings = _unit_rows(rng, n, d)
            loss, table = rbl_forward(embeddings, ranks)
            if table.wrong.any():
                break
        else:
            continue

        analytic = backward_fn(table, embeddings)
        work = embeddings.copy()
        numeric = central_difference(lambda: frozen_rbl_loss(table, work), work, FD_STEP)
        worst = max(worst, relative_error(analytic, numeric))
        done += 1
    return SuiteResult(name="rank_loss", trials=done, max_relative_error=worst)


def check_quadruplet_loss(seed: int = 0, trials: int = DEFAULT_TRIALS,
                          backward_fn: Callable = quad_backward,
                          margins: Optional[Margins] = None) -> SuiteResult:
    margins = margins or Margins(0.25, 0.5)
    worst = 0.0
    done = 0
    labels = [(f"c{c}", f"f{c}_{f}") for c in range(2) for f in range(2) for _ in range(2)]
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 2])
        d = int(rng.integers(3, 6))
        quads = mine_quadruplets(labels, rng=rng)
        for _ in range(MAX_RESAMPLES):
            embeddings = _unit_rows(rng, len(labels), d)
            if _min_kink_distance(embeddings, quads, margins) >= KINK_DISTANCE:
                break
        else:
            continue

        analytic = backward_fn(embeddings, quads, margins)
        work = embeddings.copy()
        numeric = central_difference(lambda: quad_forward(work, quads, margins), work, FD_STEP)
        worst = max(worst, relative_error(analytic, numeric))
        done += 1
    return SuiteResult(name="quadruplet_loss", trials=done, max_relative_error=worst)


def _min_kink_distance(embeddings: np.ndarray, quads, margins: Margins) -> float:
    def dist(x, y):
        return 1.0 - float(embeddings[x] @ embeddings[y])
    closest = np.inf
    for q in quads:
        d_ap = dist(q.anchor, q.positive)
        closest = min(closest,
                      abs(d_ap - dist(q.anchor, q.neg_fine) + margins.m_fine),
                      abs(d_ap - dist(q.anchor, q.neg_coarse) + margins.m_coarse))
    return closest


def check_projection_chain(seed: int = 0, trials: int = DEFAULT_TRIALS,
                           backward_fn: Callable = backward,
                           n: int = 8, d_in: int = 16, d_out: int = 3) -> SuiteResult:
    worst = 0.0
    done = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 3])
        features = rng.normal(size=(n, d_in)) * rng.uniform(0.5, 3.0, size=d_in) + rng.normal(size=d_in)
        stats = FeatureStats.from_features(features)
        x = standardize(features, stats)
        labels = _random_labels(rng, n, depth=2)
        ranks = _batch_ranks(labels)

        for attempt in range(MAX_RESAMPLES):
            model = init(int(rng.integers(2 ** 31)), d_in, d_out, stats=stats)
            model.b = rng.normal(scale=0.1, size=d_out)
            embeddings, cache = forward(model, x)
            loss, table = rbl_forward(embeddings, ranks)
            if table.wrong.any():
                break
        else:
            continue

        grad_W, grad_b = backward_fn(cache, rbl_backward(table, embeddings))

        def chain_loss():
            e, _ = forward(model, x)
            return frozen_rbl_loss(table, e)

        numeric_W = central_difference(chain_loss, model.W, FD_STEP)
        numeric_b = central_difference(chain_loss, model.b, FD_STEP)
        analytic = np.concatenate([grad_W.ravel(), grad_b.ravel()])
        numeric = np.concatenate([numeric_W.ravel(), numeric_b.ravel()])
        worst = max(worst, relative_error(analytic, numeric))
        done += 1
    return SuiteResult(name="projection_chain", trials=done, max_relative_error=worst)


def run_gradcheck(seed: int = 0, trials: int = DEFAULT_TRIALS) -> List[SuiteResult]:
    results = [
        check_rank_loss(seed, trials),
        check_quadruplet_loss(seed, trials),
        check_projection_chain(seed, trials),
    ]
    for result in results:
        status = "ok" if result.passed else "FAILED"
        logger.info(f"gradcheck {result.name}: max relative error {result.max_relative_error:.3e} "
                    f"over {result.trials} trials ({status})")
    return results
