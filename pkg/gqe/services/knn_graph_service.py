import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

import numpy as np

from gqe.core.errors import DimensionError, FormatError, StaleCacheError, UsageError
from gqe.models.graph import KnnGraph, QueryNeighbors
from gqe.models.store import NORM_TOLERANCE, EmbeddingStore
from gqe.services.embed_store_service import store_digest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRAPH_MAGIC = b"KNN1"
GRAPH_HEADER = struct.Struct("<4sII32s")
GRAPH_RECORD = np.dtype([("id", "<u4"), ("sim", "<f4")])
ROW_CHUNK = 256


def top_k(sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties broken by ascending index."""
    order = np.argsort(-sims, axis=-1, kind="stable")
    return order[..., :k]


def _neighbor_chunk(vectors: np.ndarray, start: int, stop: int, k: int):
    sims = vectors[start:stop] @ vectors.T
    rows = np.arange(stop - start)
    sims[rows, start + rows] = -np.inf
    ids = top_k(sims, k)
    return ids, np.take_along_axis(sims, ids, axis=1)


def build_graph(store: EmbeddingStore, k: int, threads: int = 1) -> KnnGraph:
    """Exact kNN graph by brute-force cosine similarity, self excluded."""
    if k < 1 or k >= store.count:
        raise UsageError(f"k must satisfy 1 <= k < N={store.count}, got {k}")
    vectors = store.as_float64()
    bounds = [(s, min(s + ROW_CHUNK, store.count)) for s in range(0, store.count, ROW_CHUNK)]
    # chunks are independent; map keeps the output order fixed
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(lambda b: _neighbor_chunk(vectors, b[0], b[1], k), bounds))
    ids = np.concatenate([p[0] for p in parts]).astype(np.int64)
    sims = np.concatenate([p[1] for p in parts]).astype(np.float32)
    logger.info("built %d-NN graph over %d items", k, store.count)
    return KnnGraph(k=k, ids=ids, sims=sims, digest=store_digest(store))


def query_neighbors(store: EmbeddingStore, graph_k: int, q: np.ndarray) -> QueryNeighbors:
    """Top-k database items for an external unit query; no self exclusion."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (store.dim,):
        raise DimensionError(f"query has shape {q.shape}, store dimension is {store.dim}")
    if abs(np.linalg.norm(q) - 1.0) > NORM_TOLERANCE:
        raise UsageError("query must be unit-norm")
    if graph_k < 1 or graph_k > store.count:
        raise UsageError(f"k must satisfy 1 <= k <= N={store.count}, got {graph_k}")
    sims = store.as_float64() @ q
    ids = top_k(sims, graph_k)
    return QueryNeighbors(ids=ids.astype(np.int64), sims=sims[ids])


def save_graph(graph: KnnGraph, path: PathLike) -> None:
    records = np.empty(graph.ids.shape, dtype=GRAPH_RECORD)
    records["id"] = graph.ids
    records["sim"] = graph.sims
    with open(path, "wb") as handle:
        handle.write(GRAPH_HEADER.pack(GRAPH_MAGIC, graph.k, graph.count, graph.digest))
        handle.write(records.tobytes())
    logger.info("cached %d-NN graph to %s", graph.k, path)


def load_graph(path: PathLike, store: Optional[EmbeddingStore] = None, k: Optional[int] = None) -> KnnGraph:
    """Read a graph cache, rejecting it when it was built for another store or k."""
    raw = Path(path).read_bytes()
    if len(raw) < GRAPH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, graph_k, count, digest = GRAPH_HEADER.unpack_from(raw)
    if magic != GRAPH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[GRAPH_HEADER.size:]
    if graph_k == 0 or len(payload) != count * graph_k * GRAPH_RECORD.itemsize:
        raise FormatError(f"{path}: payload does not match {count} x {graph_k} records")
    if store is not None and (digest != store_digest(store) or count != store.count):
        raise StaleCacheError(f"{path}: stale cache, built for a different store")
    if k is not None and k != graph_k:
        raise StaleCacheError(f"{path}: stale cache, built with k={graph_k}, requested k={k}")
    records = np.frombuffer(payload, dtype=GRAPH_RECORD).reshape(count, graph_k)
    return KnnGraph(
        k=graph_k,
        ids=records["id"].astype(np.int64),
        sims=records["sim"].astype(np.float32),
        digest=digest,
    )


def check_graph(graph: KnnGraph, store: EmbeddingStore, k: int = 0) -> None:
    """Raise unless ``graph`` was built on ``store`` with at least ``k`` neighbors."""
    if graph.digest != store_digest(store) or graph.count != store.count:
        raise StaleCacheError("stale graph: built for a different store")
    if k > graph.k:
        raise UsageError(f"graph holds {graph.k} neighbors per node, {k} requested")
