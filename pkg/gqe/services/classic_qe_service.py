"""Hand-crafted query expansions: AQE, AQEwD and alpha-QE.

Every method is a weighted sum ``w_0 * q + sum(w_i * d_i)`` over the query and
its ranked neighbors, followed by L2 normalization; only the weights differ.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from gqe.core.errors import EmptyNeighborhoodError, UsageError
from gqe.models.graph import QueryNeighbors
from gqe.models.hierarchy import WeightAttribution
from gqe.models.qe import ClassicQEConfig, QEMethod
from gqe.models.store import EmbeddingStore

logger = logging.getLogger(__name__)

ZERO_SUM = 1e-12


def classic_weights(
    method: QEMethod, q: np.ndarray, neighbor_vectors: np.ndarray, alpha: Optional[float] = None
) -> Tuple[float, np.ndarray]:
    """Self weight and per-neighbor weights of a hand-crafted expansion."""
    k = neighbor_vectors.shape[0]
    if k == 0:
        raise EmptyNeighborhoodError("expansion needs at least one neighbor")
    if method == QEMethod.AQE:
        return 1.0, np.ones(k)
    if method == QEMethod.AQEWD:
        ranks = np.arange(1, k + 1)
        return 1.0, (k - ranks) / k
    if method == QEMethod.ALPHAQE:
        if alpha is None or alpha < 0:
            raise UsageError("alphaqe needs alpha >= 0")
        sims = np.clip(neighbor_vectors @ q, 0.0, None)
        return 1.0, np.power(sims, alpha)
    raise UsageError(f"{method.value} is not a hand-crafted expansion")


def combine(
    q: np.ndarray, neighbor_vectors: np.ndarray, self_weight: float, weights: np.ndarray
) -> Tuple[np.ndarray, float, bool]:
    """Normalized weighted sum; a zero sum falls back to ``q`` (returned flag set)."""
    total = self_weight * q + weights @ neighbor_vectors
    norm = float(np.linalg.norm(total))
    if norm < ZERO_SUM:
        logger.warning("expansion sums to the zero vector; returning the unexpanded query")
        return q.copy(), 1.0, True
    return total / norm, norm, False


def _expand(
    method: QEMethod,
    q: np.ndarray,
    neighbors: QueryNeighbors,
    store: EmbeddingStore,
    alpha: Optional[float] = None,
) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    vectors = store.vectors[neighbors.ids].astype(np.float64)
    self_weight, weights = classic_weights(method, q, vectors, alpha)
    return combine(q, vectors, self_weight, weights)[0]


def aqe(q: np.ndarray, neighbors: QueryNeighbors, store: EmbeddingStore) -> np.ndarray:
    """Average of the query and its neighbors."""
    return _expand(QEMethod.AQE, q, neighbors, store)


def aqewd(q: np.ndarray, neighbors: QueryNeighbors, store: EmbeddingStore) -> np.ndarray:
    """Rank-decayed average: the i-th neighbor (1-based) gets weight (K - i) / K."""
    return _expand(QEMethod.AQEWD, q, neighbors, store)


def alpha_qe(q: np.ndarray, neighbors: QueryNeighbors, store: EmbeddingStore, alpha: float) -> np.ndarray:
    """Neighbors weighted by their clamped cosine similarity to the query raised to alpha."""
    return _expand(QEMethod.ALPHAQE, q, neighbors, store, alpha)


def expand_classic(
    config: ClassicQEConfig, q: np.ndarray, neighbors: QueryNeighbors, store: EmbeddingStore
) -> np.ndarray:
    if neighbors.k < config.k:
        raise UsageError(f"{config.k} neighbors requested, {neighbors.k} supplied")
    head = QueryNeighbors(ids=neighbors.ids[: config.k], sims=neighbors.sims[: config.k])
    return _expand(config.method, q, head, store, config.alpha)


def attribute_classic(
    config: ClassicQEConfig, q: np.ndarray, neighbors: QueryNeighbors, store: EmbeddingStore
) -> WeightAttribution:
    """Exact decomposition of a hand-crafted expansion over the query and its neighbors."""
    q = np.asarray(q, dtype=np.float64)
    ids = neighbors.ids[: config.k]
    vectors = store.vectors[ids].astype(np.float64)
    self_weight, weights = classic_weights(config.method, q, vectors, config.alpha)
    _, norm, degenerate = combine(q, vectors, self_weight, weights)
    if degenerate:
        return WeightAttribution(query_weight=1.0, weights={int(i): 0.0 for i in ids})
    return WeightAttribution(
        query_weight=self_weight / norm,
        weights={int(i): float(w / norm) for i, w in zip(ids, weights)},
        final_norm=norm,
    )
