"""Retrieval scoring and the attribution metrics.

Relevance is an exact label match unless a relevance file supplies the
relevant database ids of every query.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from gqe.core.errors import DimensionError, LabelError, UsageError, ZeroWeightError
from gqe.models.evaluation import (
    CLASSIC_HIERARCHICAL,
    DBASelection,
    DBATrial,
    EvalReport,
    MethodSpec,
    QueryAP,
    RankedResult,
)
from gqe.models.graph import KnnGraph
from gqe.models.hierarchy import GQEModel, LevelStore, WeightAttribution
from gqe.models.qe import CLASSIC_METHODS, ClassicQEConfig, QEMethod
from gqe.models.store import EmbeddingStore
from gqe.services.classic_qe_service import attribute_classic, expand_classic
from gqe.services.embed_store_service import store_digest
from gqe.services.hierarchy_service import (
    collapse_first_level,
    expand_classic_hierarchical,
    expand_fast,
    expand_naive,
    precompute_levels,
    run_dba,
)
from gqe.services.knn_graph_service import build_graph, query_neighbors

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def average_precision(ranking: Sequence[int], relevant: Set[int]) -> float:
    """Mean of precision@r over the ranks r holding a relevant item."""
    if not relevant:
        raise LabelError("average precision needs at least one relevant item")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(ranking, start=1):
        if int(idx) in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def rank(store: EmbeddingStore, qe: np.ndarray, query: Union[int, str] = 0) -> RankedResult:
    """Full database ranking by descending cosine similarity, ties by ascending id."""
    qe = np.asarray(qe, dtype=np.float64)
    if qe.shape != (store.dim,):
        raise DimensionError(f"query has dimension {qe.shape[-1]}, database has {store.dim}")
    sims = store.as_float64() @ qe
    order = np.argsort(-sims, kind="stable")
    return RankedResult(query=query, ids=order, depth=store.count)


def _classic_config(spec: MethodSpec) -> ClassicQEConfig:
    return ClassicQEConfig(method=spec.method, k=spec.k, alpha=spec.alpha)


def _require_model(spec: MethodSpec, model: Optional[GQEModel]) -> GQEModel:
    if model is None:
        raise UsageError(f"method {spec.method.value} needs a model")
    return collapse_first_level(model) if spec.collapsed else model


def expand_query(
    spec: MethodSpec,
    q: np.ndarray,
    store: EmbeddingStore,
    graph: Optional[KnnGraph] = None,
    model: Optional[GQEModel] = None,
    level_store: Optional[LevelStore] = None,
) -> np.ndarray:
    """Expanded query vector for any method."""
    q = np.asarray(q, dtype=np.float64)
    if spec.method == QEMethod.NONE:
        return q
    if spec.method in CLASSIC_METHODS:
        return expand_classic(_classic_config(spec), q, query_neighbors(store, spec.k, q), store)
    if graph is None:
        raise UsageError(f"method {spec.method.value} needs a neighbor graph")
    if spec.method in CLASSIC_HIERARCHICAL:
        return expand_classic_hierarchical(spec.method, q, graph, store, spec.levels, spec.k, spec.alpha)[0]
    model = _require_model(spec, model)
    if spec.fast:
        if level_store is None:
            level_store = precompute_levels(model, graph, store)
        return expand_fast(model, q, graph, store, level_store)
    return expand_naive(model, q, graph, store)[0]


def attribute_query(
    spec: MethodSpec,
    q: np.ndarray,
    store: EmbeddingStore,
    graph: Optional[KnnGraph] = None,
    model: Optional[GQEModel] = None,
) -> WeightAttribution:
    """Weights over the query and database items that make up its expansion."""
    q = np.asarray(q, dtype=np.float64)
    if spec.method == QEMethod.NONE:
        raise UsageError("method none has no neighbor weights")
    if spec.method in CLASSIC_METHODS:
        return attribute_classic(_classic_config(spec), q, query_neighbors(store, spec.k, q), store)
    if graph is None:
        raise UsageError(f"method {spec.method.value} needs a neighbor graph")
    if spec.method in CLASSIC_HIERARCHICAL:
        return expand_classic_hierarchical(spec.method, q, graph, store, spec.levels, spec.k, spec.alpha)[1]
    return expand_naive(_require_model(spec, model), q, graph, store)[1]


def load_relevance(path: PathLike, queries: int) -> List[Set[int]]:
    """One line per query, space-separated relevant database ids."""
    relevance = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                ids = {int(token) for token in line.split()}
            except ValueError:
                raise LabelError(f"{path}:{lineno}: expected space-separated ids")
            relevance.append(ids)
    if len(relevance) != queries:
        raise LabelError(f"{path}: {len(relevance)} relevance lines for {queries} queries")
    return relevance


def _label_relevance(queries: EmbeddingStore, database: EmbeddingStore) -> List[Set[int]]:
    if not queries.has_labels or not database.has_labels:
        raise LabelError("evaluation needs labelled queries and database, or a relevance file")
    members: Dict[int, Set[int]] = {}
    for idx, label in enumerate(database.labels):
        members.setdefault(int(label), set()).add(idx)
    return [members.get(int(label), set()) for label in queries.labels]


def _database_for(
    database: EmbeddingStore, graph: Optional[KnnGraph], dba_store: Optional[EmbeddingStore], threads: int
) -> Tuple[EmbeddingStore, Optional[KnnGraph]]:
    """Swap in the augmented database, rebuilding the graph when it was built on another store."""
    if dba_store is None:
        return database, graph
    if dba_store.dim != database.dim or dba_store.count != database.count:
        raise DimensionError("augmented store does not match the database shape")
    if graph is not None and graph.digest != store_digest(dba_store):
        logger.warning("graph was built on the original database; rebuilding it on the augmented store")
        graph = build_graph(dba_store, graph.k, threads)
    return dba_store, graph


def evaluate(
    spec: MethodSpec,
    queries: EmbeddingStore,
    database: EmbeddingStore,
    graph: Optional[KnnGraph] = None,
    model: Optional[GQEModel] = None,
    dba_store: Optional[EmbeddingStore] = None,
    relevance: Optional[List[Set[int]]] = None,
    threads: int = 1,
    level_store: Optional[LevelStore] = None,
) -> EvalReport:
    """Expand every query, rank the full database and score mAP."""
    if queries.dim != database.dim:
        raise DimensionError(f"queries have dimension {queries.dim}, database has {database.dim}")
    if relevance is None:
        relevance = _label_relevance(queries, database)
    elif len(relevance) != queries.count:
        raise LabelError(f"{len(relevance)} relevance sets for {queries.count} queries")
    db, graph = _database_for(database, graph, dba_store, threads)

    if spec.method == QEMethod.GQE and spec.fast and level_store is None:
        level_store = precompute_levels(_require_model(spec, model), graph, db, threads)

    def score(idx: int) -> QueryAP:
        qe = expand_query(spec, queries.vectors[idx], db, graph, model, level_store)
        ranking = rank(db, qe, idx)
        return QueryAP(id=idx, ap=average_precision(ranking.ids, relevance[idx]))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_query = list(pool.map(score, range(queries.count)))
    mean_ap = sum(q.ap for q in per_query) / len(per_query)
    params = spec.params()
    if spec.method == QEMethod.GQE and model is not None:
        params.update(k=model.k, levels=model.levels)
    if dba_store is not None:
        params["dba"] = True
    logger.info("%s %s: mAP %.4f over %d queries", spec.method.value, params, mean_ap, len(per_query))
    return EvalReport(method=spec.method.value, params=params, map=mean_ap, per_query=per_query)


def sweep(spec: MethodSpec, ks: Sequence[int], *args, **kwargs) -> List[EvalReport]:
    """One report per neighbor count."""
    if spec.method in (QEMethod.NONE, QEMethod.GQE):
        raise UsageError(f"method {spec.method.value} has no k to sweep")
    return [evaluate(spec.model_copy(update={"k": k}), *args, **kwargs) for k in ks]


def select_dba(
    model: GQEModel,
    graph: KnnGraph,
    database: EmbeddingStore,
    queries: EmbeddingStore,
    t1s: Sequence[float],
    t2s: Sequence[float],
    k_dbas: Sequence[int],
    spec: Optional[MethodSpec] = None,
    relevance: Optional[List[Set[int]]] = None,
    threads: int = 1,
) -> Tuple[EmbeddingStore, DBASelection]:
    """Grid-search the augmentation temperatures and neighbor count on validation mAP.

    The model stays frozen. Every (t1, t2, k_dba) triple augments the
    database, and ``spec`` (gqe with ``model`` by default) ranks the
    validation queries against it. The first triple in grid order wins ties.
    Returns the best augmented store together with every trial.
    """
    if not t1s or not t2s or not k_dbas:
        raise UsageError("the augmentation grid needs at least one t1, t2 and k_dba")
    spec = spec or MethodSpec(method=QEMethod.GQE)
    needs_graph = spec.method == QEMethod.GQE or spec.method in CLASSIC_HIERARCHICAL
    trials: List[DBATrial] = []
    best: Optional[DBATrial] = None
    best_store: Optional[EmbeddingStore] = None
    for k_dba in k_dbas:
        for t1 in t1s:
            for t2 in t2s:
                augmented = run_dba(model, graph, database, t1, t2, k_dba, threads)
                aug_graph = build_graph(augmented, graph.k, threads) if needs_graph else None
                report = evaluate(spec, queries, augmented, aug_graph, model, relevance=relevance, threads=threads)
                trial = DBATrial(t1=t1, t2=t2, k_dba=k_dba, map=report.map)
                trials.append(trial)
                if best is None or trial.map > best.map:
                    best, best_store = trial, augmented
    logger.info(
        "best augmentation T1=%g T2=%g k=%d: mAP %.4f over %d trials",
        best.t1, best.t2, best.k_dba, best.map, len(trials),
    )
    return best_store, DBASelection(method=spec.method.value, trials=trials, best=best)


def _same_label_weights(attr: WeightAttribution, labels: np.ndarray, query_label: int) -> Tuple[np.ndarray, float]:
    clamped = attr.clamped()
    ids = np.fromiter(clamped.weights.keys(), dtype=np.int64, count=len(clamped.weights))
    weights = np.fromiter(clamped.weights.values(), dtype=np.float64, count=len(clamped.weights))
    same = np.asarray(labels)[ids] == query_label if ids.size else np.zeros(0, dtype=bool)
    return weights[same], float(weights.sum())


def agreement(attr: WeightAttribution, labels: np.ndarray, query_label: int) -> float:
    """Share of the database weight on items labelled like the query; the self-weight is left out."""
    same, total = _same_label_weights(attr, labels, query_label)
    if total <= 0:
        raise ZeroWeightError("agreement is undefined when all database weights are zero")
    return float(same.sum()) / total


def diversity(attr: WeightAttribution, labels: np.ndarray, query_label: int) -> float:
    """Natural-log entropy of the normalized same-label weights."""
    same, _ = _same_label_weights(attr, labels, query_label)
    mass = float(same.sum())
    if mass <= 0:
        raise ZeroWeightError("diversity needs a positive same-label weight")
    p = same[same > 0] / mass
    return float(-np.sum(p * np.log(p)))
