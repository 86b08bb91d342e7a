"""Hierarchical query expansion over the nearest-neighbor graph.

Level ``i`` recomputes every node within ``L - i`` hops of the query from its
own level ``i - 1`` embedding and the level ``i - 1`` embeddings of its K
neighbors. Database-node embeddings never depend on the query, which is what
lets :func:`precompute_levels` cache them and :func:`expand_fast` expand a
query with exactly L aggregations.
"""
import hashlib
import logging
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from gqe.core.errors import DimensionError, FormatError, MissingTraceError, StaleCacheError, UsageError
from gqe.models.aggregator import AggregationTrace
from gqe.models.graph import KnnGraph
from gqe.models.hierarchy import (
    QUERY,
    ExpansionTrace,
    GQEModel,
    LevelStore,
    NeighborhoodSets,
    NodeTrace,
    WeightAttribution,
)
from gqe.models.qe import QEMethod
from gqe.models.store import EmbeddingStore
from gqe.services.aggregator_service import (
    AggregationCounter,
    aggregate_backward,
    aggregate_batch,
    passthrough_params,
)
from gqe.services.classic_qe_service import classic_weights, combine
from gqe.services.embed_store_service import build_store, store_digest
from gqe.services.knn_graph_service import check_graph, query_neighbors

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NODE_CHUNK = 512
LEVELS_MAGIC = b"LVL1"
LEVELS_HEADER = struct.Struct("<4sIII32s")

# (level, nodes (B, F), neighbors (B, k, F), keep_cache) -> (outputs, weights, norms, cache)
LevelFn = Callable[[int, np.ndarray, np.ndarray, bool], tuple]


def _query_ids(q: np.ndarray, store: EmbeddingStore, k: int, query_ids: Optional[Sequence[int]]) -> np.ndarray:
    if query_ids is not None:
        ids = np.asarray(query_ids, dtype=np.int64)
        if ids.shape[0] < k:
            raise UsageError(f"{k} query neighbors needed, {ids.shape[0]} supplied")
        return ids[:k]
    return query_neighbors(store, k, q).ids


def build_sets(
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    levels: int,
    k: int,
    query_ids: Optional[Sequence[int]] = None,
) -> NeighborhoodSets:
    """S^L = {q}; S^(L-i) = S^(L-i+1) plus the K neighbors of each of its nodes.

    ``query_ids`` supplies the query's own neighbor list (training queries are
    database items); otherwise the query's top-K are searched in ``store``.
    """
    if graph.k < k:
        raise UsageError(f"graph holds {graph.k} neighbors per node, the expansion needs {k}")
    if levels < 1:
        raise UsageError("levels must be >= 1")
    first = _query_ids(q, store, k, query_ids)
    sets: List[List[int]] = [[] for _ in range(levels + 1)]
    sets[levels] = [QUERY]
    current = {QUERY}
    for i in range(1, levels + 1):
        grown = set(current)
        for u in current:
            nbrs = first if u == QUERY else graph.ids[u, :k]
            grown.update(int(v) for v in nbrs)
        sets[levels - i] = sorted(grown)
        current = grown
    return NeighborhoodSets(sets=sets)


class _Forward:
    """Level-by-level record of one hierarchical expansion."""

    def __init__(self, sets: NeighborhoodSets):
        self.sets = sets
        self.embeddings: List[np.ndarray] = []
        self.node_idx: List[np.ndarray] = []
        self.neighbor_idx: List[np.ndarray] = []
        self.neighbor_refs: List[np.ndarray] = []
        self.weights: List[np.ndarray] = []
        self.norms: List[np.ndarray] = []
        self.caches: list = []

    @property
    def output(self) -> np.ndarray:
        return self.embeddings[-1][0]

    def trace(self) -> ExpansionTrace:
        levels = []
        for i in range(1, self.sets.levels + 1):
            records = {}
            for row, ref in enumerate(self.sets.at(i)):
                refs = np.concatenate([[ref], self.neighbor_refs[i - 1][row]])
                trace = AggregationTrace(sims=self.weights[i - 1][row], norm=float(self.norms[i - 1][row]))
                records[ref] = NodeTrace(refs=refs, trace=trace)
            levels.append(records)
        return ExpansionTrace(levels=levels)


def _run_levels(
    level_fn: LevelFn,
    levels: int,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    k: int,
    query_ids: Optional[Sequence[int]],
    keep_cache: bool = False,
) -> _Forward:
    q = np.asarray(q, dtype=np.float64)
    first = _query_ids(q, store, k, query_ids)
    sets = build_sets(q, graph, store, levels, k, first)
    record = _Forward(sets)

    base = sets.at(0)
    rows = np.array([r for r in base if r != QUERY], dtype=np.int64)
    e0 = np.empty((len(base), store.dim))
    e0[0] = q
    e0[1:] = store.vectors[rows]
    record.embeddings.append(e0)

    for i in range(1, levels + 1):
        position = {ref: idx for idx, ref in enumerate(sets.at(i - 1))}
        nodes = sets.at(i)
        refs = np.stack([first if u == QUERY else graph.ids[u, :k] for u in nodes])
        node_idx = np.array([position[u] for u in nodes])
        neighbor_idx = np.vectorize(position.__getitem__, otypes=[np.int64])(refs)
        prev = record.embeddings[i - 1]
        out, weights, norms, cache = level_fn(i, prev[node_idx], prev[neighbor_idx], keep_cache)
        record.embeddings.append(out)
        record.node_idx.append(node_idx)
        record.neighbor_idx.append(neighbor_idx)
        record.neighbor_refs.append(refs)
        record.weights.append(weights)
        record.norms.append(norms)
        record.caches.append(cache)
    return record


def _gqe_level_fn(model: GQEModel, counter: Optional[AggregationCounter] = None) -> LevelFn:
    def level_fn(i, nodes, neighbors, keep_cache):
        return aggregate_batch(model.level(i), nodes, neighbors, counter=counter, keep_cache=keep_cache)

    return level_fn


def _classic_level_fn(method: QEMethod, alpha: Optional[float]) -> LevelFn:
    def level_fn(i, nodes, neighbors, keep_cache):
        outs, all_weights, norms = [], [], []
        for node, nbrs in zip(nodes, neighbors):
            self_weight, weights = classic_weights(method, node, nbrs, alpha)
            out, norm, degenerate = combine(node, nbrs, self_weight, weights)
            if degenerate:
                self_weight, weights = 1.0, np.zeros_like(weights)
            outs.append(out)
            all_weights.append(np.concatenate([[self_weight], weights]))
            norms.append(norm)
        return np.stack(outs), np.stack(all_weights), np.array(norms), None

    return level_fn


def forward_expansion(
    model: GQEModel,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    query_ids: Optional[Sequence[int]] = None,
    counter: Optional[AggregationCounter] = None,
    keep_cache: bool = False,
) -> _Forward:
    """Naive hierarchical forward pass, optionally keeping caches for :func:`backward_expansion`."""
    check_graph(graph, store, model.k)
    return _run_levels(_gqe_level_fn(model, counter), model.levels, q, graph, store, model.k, query_ids, keep_cache)


def backward_expansion(model: GQEModel, record: _Forward, dqe: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """Per-level parameter gradients given dLoss/d(expanded query).

    Gradients of every node aggregated at a level are summed into that
    level's shared parameters.
    """
    levels = model.levels
    grads: List[Dict[str, np.ndarray]] = [{} for _ in range(levels)]
    upstream = np.zeros_like(record.embeddings[levels])
    upstream[0] = dqe
    for i in range(levels, 0, -1):
        dx, level_grads = aggregate_backward(model.level(i), record.caches[i - 1], upstream)
        for name, grad in level_grads.items():
            grads[i - 1][name] = grads[i - 1].get(name, 0.0) + grad
        if i > 1:
            below = np.zeros_like(record.embeddings[i - 1])
            np.add.at(below, record.node_idx[i - 1], dx[:, 0])
            np.add.at(below, record.neighbor_idx[i - 1], dx[:, 1:])
            upstream = below
    return grads


def attribute_weights(trace: ExpansionTrace) -> WeightAttribution:
    """Unfold the recorded aggregations into weights over the query and database items.

    A leaf's weight is the product of ``sim / norm`` along a path from the
    query, summed over every path reaching it.
    """
    levels = len(trace.levels)
    if levels == 0 or QUERY not in trace.levels[-1]:
        raise MissingTraceError("no aggregation recorded for the query")
    coefficients: Dict[int, float] = {QUERY: 1.0}
    for i in range(levels, 0, -1):
        unfolded: Dict[int, float] = defaultdict(float)
        for ref, coefficient in coefficients.items():
            record = trace.levels[i - 1].get(ref)
            if record is None:
                raise MissingTraceError(f"no level-{i} aggregation recorded for node {ref}")
            for child, weight in zip(record.refs, record.trace.sims):
                unfolded[int(child)] += coefficient * float(weight) / record.trace.norm
        coefficients = unfolded
    query_weight = coefficients.pop(QUERY, 0.0)
    negative = sum(1 for w in coefficients.values() if w < 0)
    if negative:
        logger.debug("%d composed weights are negative", negative)
    return WeightAttribution(
        query_weight=query_weight,
        weights=dict(sorted(coefficients.items())),
        final_norm=trace.levels[-1][QUERY].trace.norm,
    )


def expand_naive(
    model: GQEModel,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    query_ids: Optional[Sequence[int]] = None,
    counter: Optional[AggregationCounter] = None,
) -> Tuple[np.ndarray, WeightAttribution]:
    """Full recursion over the L-hop neighborhood of the query."""
    record = forward_expansion(model, q, graph, store, query_ids, counter)
    return record.output, attribute_weights(record.trace())


def expand_naive_traced(
    model: GQEModel,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    query_ids: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, ExpansionTrace]:
    record = forward_expansion(model, q, graph, store, query_ids)
    return record.output, record.trace()


def expand_classic_hierarchical(
    method: QEMethod,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    levels: int,
    k: int,
    alpha: Optional[float] = None,
    query_ids: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, WeightAttribution]:
    """The same recursion with AQE or alpha-QE as the aggregation at every level."""
    base = {QEMethod.AQE_G: QEMethod.AQE, QEMethod.ALPHAQE_G: QEMethod.ALPHAQE}.get(method, method)
    check_graph(graph, store, k)
    record = _run_levels(_classic_level_fn(base, alpha), levels, q, graph, store, k, query_ids)
    return record.output, attribute_weights(record.trace())


def model_digest(model: GQEModel) -> bytes:
    digest = hashlib.sha256()
    digest.update(f"k={model.k};levels={model.levels}".encode())
    for params in model.per_level_params:
        digest.update(params.config.model_dump_json().encode())
        digest.update(f"T={params.temperature};pass={params.passthrough}".encode())
        for name, tensor in params.named_tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return digest.digest()


def level_store_digest(model: GQEModel, graph: KnnGraph, store: EmbeddingStore) -> bytes:
    return hashlib.sha256(store_digest(store) + graph.digest + model_digest(model)).digest()


def _propagate_all(
    model: GQEModel,
    graph: KnnGraph,
    store: EmbeddingStore,
    upto: int,
    k: int,
    threads: int = 1,
    counter: Optional[AggregationCounter] = None,
) -> List[np.ndarray]:
    """v^1 .. v^upto for every database id; level i reads only level i - 1."""
    current = store.as_float64()
    neighbor_ids = graph.ids[:, :k]
    bounds = [(s, min(s + NODE_CHUNK, store.count)) for s in range(0, store.count, NODE_CHUNK)]
    results = []
    for i in range(1, upto + 1):
        params = model.level(i)
        prev = current

        def chunk(bound, params=params, prev=prev):
            start, stop = bound
            return aggregate_batch(params, prev[start:stop], prev[neighbor_ids[start:stop]], counter=counter)[0]

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            current = np.concatenate(list(pool.map(chunk, bounds)))
        results.append(current)
        logger.info("computed level %d embeddings for %d database items", i, store.count)
    return results


def precompute_levels(
    model: GQEModel, graph: KnnGraph, store: EmbeddingStore, threads: int = 1
) -> LevelStore:
    """Cache v^1 .. v^(L-1) of every database item for :func:`expand_fast`."""
    check_graph(graph, store, model.k)
    matrices = _propagate_all(model, graph, store, model.levels - 1, model.k, threads)
    return LevelStore(
        levels=model.levels,
        matrices=[m.astype(np.float32) for m in matrices],
        digest=level_store_digest(model, graph, store),
    )


def expand_fast(
    model: GQEModel,
    q: np.ndarray,
    graph: KnnGraph,
    store: EmbeddingStore,
    level_store: LevelStore,
    query_ids: Optional[Sequence[int]] = None,
    counter: Optional[AggregationCounter] = None,
) -> np.ndarray:
    """Expansion with exactly L aggregations, reading neighbor levels from ``level_store``."""
    if level_store.levels != model.levels or level_store.digest != level_store_digest(model, graph, store):
        raise StaleCacheError("stale level store: built for a different model, graph or store")
    if model.levels == 1:
        return expand_naive(model, q, graph, store, query_ids, counter)[0]
    q = np.asarray(q, dtype=np.float64)
    ids = _query_ids(q, store, model.k, query_ids)
    current = q
    for i in range(1, model.levels + 1):
        table = store.vectors if i == 1 else level_store.at(i - 1)
        out, weights, norms, _ = aggregate_batch(
            model.level(i), current[None], table[ids][None].astype(np.float64), counter=counter
        )
        current = out[0]
    return current


def with_temperatures(model: GQEModel, temperatures: Sequence[Optional[float]]) -> GQEModel:
    """Copy of ``model`` with per-level softmax temperatures (None disables)."""
    if len(temperatures) != model.levels:
        raise UsageError(f"{model.levels} temperatures needed, got {len(temperatures)}")
    return GQEModel(
        k=model.k,
        per_level_params=[
            p.model_copy(update={"temperature": t}) for p, t in zip(model.per_level_params, temperatures)
        ],
    )


def collapse_first_level(model: GQEModel) -> GQEModel:
    """Replace agg_1 by the aggregator that returns its node unchanged."""
    first = passthrough_params(model.dim, model.k)
    return GQEModel(k=model.k, per_level_params=[first] + list(model.per_level_params[1:]))


def run_dba(
    model: GQEModel,
    graph: KnnGraph,
    store: EmbeddingStore,
    t1: float,
    t2: float,
    k_dba: int,
    threads: int = 1,
) -> EmbeddingStore:
    """Replace every database embedding by its tempered expansion over ``k_dba`` neighbors.

    Level 1 uses ``t1``; every later level uses ``t2``.
    """
    if t1 <= 0 or t2 <= 0:
        raise UsageError("DBA temperatures must be positive")
    if k_dba < 1 or k_dba > min(graph.k, model.k):
        raise UsageError(f"k_dba must be in [1, {min(graph.k, model.k)}], got {k_dba}")
    check_graph(graph, store, k_dba)
    tempered = with_temperatures(model, [t1] + [t2] * (model.levels - 1))
    expanded = _propagate_all(tempered, graph, store, model.levels, k_dba, threads)[-1]
    logger.info("database-side augmentation done (T1=%g, T2=%g, k=%d)", t1, t2, k_dba)
    return build_store(expanded, None if store.labels is None else store.labels.copy(), normalize=True)


def save_level_store(level_store: LevelStore, path: PathLike) -> None:
    count, dim = level_store.matrices[0].shape if level_store.matrices else (0, 0)
    with open(path, "wb") as handle:
        handle.write(LEVELS_HEADER.pack(LEVELS_MAGIC, level_store.levels, count, dim, level_store.digest))
        for matrix in level_store.matrices:
            handle.write(np.asarray(matrix, dtype="<f4").tobytes())
    logger.info("saved level store (L=%d, %d items) to %s", level_store.levels, count, path)


def load_level_store(path: PathLike) -> LevelStore:
    raw = Path(path).read_bytes()
    if len(raw) < LEVELS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, levels, count, dim, digest = LEVELS_HEADER.unpack_from(raw)
    if magic != LEVELS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if levels < 1:
        raise FormatError(f"{path}: level count must be >= 1")
    payload = raw[LEVELS_HEADER.size:]
    expected = (levels - 1) * count * dim * 4
    if len(payload) != expected:
        raise DimensionError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    block = count * dim
    data = np.frombuffer(payload, dtype="<f4")
    matrices = [data[i * block:(i + 1) * block].reshape(count, dim).astype(np.float32) for i in range(levels - 1)]
    return LevelStore(levels=levels, matrices=matrices, digest=digest)
