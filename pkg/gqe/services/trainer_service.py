"""Supervised training of the per-level aggregators.

Each tuple pairs a database item used as query with one same-label positive
and hard negatives mined against the current expanded query. Gradients are
pushed back through the whole unfolded hierarchy by
:func:`gqe.services.hierarchy_service.backward_expansion`.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from gqe.core.errors import LabelError, NonFiniteError, PoolExhaustedError, UsageError
from gqe.models.evaluation import MethodSpec
from gqe.models.graph import KnnGraph
from gqe.models.hierarchy import GQEModel
from gqe.models.qe import QEMethod
from gqe.models.store import EmbeddingStore
from gqe.models.training import EpochRecord, TrainConfig, TrainingTuple, TrainResult
from gqe.services.aggregator_service import to_float32_grid
from gqe.services.eval_service import evaluate
from gqe.services.hierarchy_service import backward_expansion, forward_expansion
from gqe.services.knn_graph_service import check_graph

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
ZERO_DISTANCE = 1e-12

Grads = List[Dict[str, np.ndarray]]


def contrastive_loss(qe: np.ndarray, other: np.ndarray, is_positive: bool, margin: float) -> float:
    """``d**2`` for a positive pair, ``max(0, margin - d)**2`` for a negative one."""
    return _contrastive(qe, other, is_positive, margin)[0]


def _contrastive(qe, other, is_positive, margin) -> Tuple[float, np.ndarray]:
    diff = np.asarray(qe, dtype=np.float64) - np.asarray(other, dtype=np.float64)
    d = float(np.linalg.norm(diff))
    if is_positive:
        return d * d, 2.0 * diff
    gap = margin - d
    if gap <= 0 or d < ZERO_DISTANCE:
        return max(gap, 0.0) ** 2, np.zeros_like(diff)
    return gap * gap, -2.0 * gap * diff / d


def _query_ids(graph: KnnGraph, q: int, k: int) -> np.ndarray:
    return graph.ids[q, :k]


def _expand_training_query(model, q, store, graph, keep_cache=False):
    return forward_expansion(
        model, store.vectors[q], graph, store, query_ids=_query_ids(graph, q, model.k), keep_cache=keep_cache
    )


def _rank_negatives(
    qe: np.ndarray, query_label: int, pool: Sequence[int], count: int, store: EmbeddingStore
) -> List[int]:
    candidates = np.array([i for i in pool if store.label_of(i) != query_label], dtype=np.int64)
    if candidates.size < count:
        raise PoolExhaustedError(
            f"negative pool holds {candidates.size} items with a different label, {count} needed"
        )
    sims = store.vectors[candidates].astype(np.float64) @ qe
    order = np.lexsort((candidates, -sims))
    return [int(i) for i in candidates[order[:count]]]


def mine_negatives(
    model: GQEModel,
    q: int,
    pool: Iterable[int],
    count: int,
    store: EmbeddingStore,
    graph: KnnGraph,
) -> List[int]:
    """The ``count`` pool items closest to the expanded query whose label differs from ``q``'s."""
    record = _expand_training_query(model, q, store, graph)
    return _rank_negatives(record.output, store.label_of(q), sorted(set(pool)), count, store)


def _check_tuple(store: EmbeddingStore, tup: TrainingTuple) -> None:
    label = store.label_of(tup.q)
    if store.label_of(tup.p) != label:
        raise LabelError(f"positive {tup.p} does not share the label of query {tup.q}")
    if any(store.label_of(n) == label for n in tup.negatives):
        raise LabelError(f"a negative of query {tup.q} shares its label")


def _tuple_gradients(model, record, tup, store, margin) -> Tuple[float, Grads]:
    qe = record.output
    loss, dqe = _contrastive(qe, store.vectors[tup.p], True, margin)
    for n in tup.negatives:
        term, grad = _contrastive(qe, store.vectors[n], False, margin)
        loss += term
        dqe = dqe + grad
    grads = backward_expansion(model, record, dqe)
    for i, level in enumerate(grads, start=1):
        for name, grad in level.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for level {i} {name}", name=f"level{i}.{name}")
    return loss, grads


def loss_gradients(
    model: GQEModel, tup: TrainingTuple, store: EmbeddingStore, graph: KnnGraph, margin: float
) -> Tuple[float, Grads]:
    """Summed contrastive loss of one tuple and its gradient for every level's parameters."""
    _check_tuple(store, tup)
    record = _expand_training_query(model, tup.q, store, graph, keep_cache=True)
    return _tuple_gradients(model, record, tup, store, margin)


def _zero_like(model: GQEModel) -> Grads:
    grads = []
    for params in model.per_level_params:
        grads.append({name: np.zeros_like(t) for name, t in params.named_tensors()} if not params.passthrough else {})
    return grads


def _accumulate(total: Grads, grads: Grads, scale: float) -> None:
    for level_total, level in zip(total, grads):
        for name, grad in level.items():
            level_total[name] = level_total[name] + scale * grad


class AdamW:
    """Adaptive moments with decoupled weight decay over every level's tensors."""

    def __init__(self, model: GQEModel, learning_rate: float, weight_decay: float):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = _zero_like(model)
        self.v = _zero_like(model)

    def step(self, model: GQEModel, grads: Grads) -> None:
        self.step_count += 1
        bias1 = 1.0 - BETA1 ** self.step_count
        bias2 = 1.0 - BETA2 ** self.step_count
        for params, m, v, level in zip(model.per_level_params, self.m, self.v, grads):
            for name, grad in level.items():
                m[name] = BETA1 * m[name] + (1.0 - BETA1) * grad
                v[name] = BETA2 * v[name] + (1.0 - BETA2) * grad * grad
                update = (m[name] / bias1) / (np.sqrt(v[name] / bias2) + ADAM_EPS)
                current = params.positional if name == "positional" else params.encoder_weights[name]
                fresh = current - self.learning_rate * (update + self.weight_decay * current)
                # saved models must reload bit-for-bit
                fresh = to_float32_grid(fresh)
                if name == "positional":
                    params.positional = fresh
                else:
                    params.encoder_weights[name] = fresh


def _labelled_groups(store: EmbeddingStore) -> Dict[int, np.ndarray]:
    if not store.has_labels:
        raise LabelError("training needs a labelled store")
    groups = {int(label): np.flatnonzero(store.labels == label) for label in np.unique(store.labels)}
    if len(groups) < 2:
        raise LabelError(f"training needs at least 2 labels, found {len(groups)}")
    return groups


def _validation_map(model, validation, store, graph, threads) -> float:
    spec = MethodSpec(method=QEMethod.GQE, fast=model.levels > 1)
    return evaluate(spec, validation, store, graph, model, threads=threads).map


def _write_history(path: Optional[PathLike], record: EpochRecord) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(record.model_dump(exclude_none=True)) + "\n")


def train(
    model: GQEModel,
    store: EmbeddingStore,
    graph: KnnGraph,
    config: TrainConfig,
    validation: Optional[EmbeddingStore] = None,
    history_path: Optional[PathLike] = None,
    threads: int = 1,
) -> Tuple[GQEModel, TrainResult]:
    """Mini-batch AdamW over (query, positive, negatives) tuples drawn from ``store``.

    With a labelled ``validation`` query store the returned model is the one
    with the best validation mAP; otherwise it is the final one.
    """
    check_graph(graph, store, model.k)
    groups = _labelled_groups(store)
    eligible = np.array(sorted(i for members in groups.values() if members.size > 1 for i in members), dtype=np.int64)
    if eligible.size == 0:
        raise LabelError("no label has two members to form a positive pair")
    if store.count - 1 < config.negatives_per_positive:
        raise UsageError("store too small for the requested negatives per positive")
    if history_path is not None:
        Path(history_path).write_text("", encoding="utf-8")

    rng = np.random.default_rng(config.seed)
    model = model.copy_deep()
    optimizer = AdamW(model, config.learning_rate, config.weight_decay)
    pool_size = min(config.pool_size, store.count)
    pool: List[int] = []
    iteration = 0
    history: List[EpochRecord] = []
    best: Optional[Tuple[float, int, GQEModel]] = None

    def step_tuple(item):
        q, p, current_pool = item
        record = _expand_training_query(model, q, store, graph, keep_cache=True)
        negatives = _rank_negatives(
            record.output, store.label_of(q), current_pool, config.negatives_per_positive, store
        )
        tup = TrainingTuple(q=q, p=p, negatives=negatives)
        return _tuple_gradients(model, record, tup, store, config.margin)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(eligible)
            if config.queries_per_epoch is not None:
                order = order[: config.queries_per_epoch]
            losses: List[float] = []
            for start in range(0, order.size, config.batch_size):
                if iteration % config.pool_refresh_interval == 0:
                    pool = sorted(int(i) for i in rng.choice(store.count, size=pool_size, replace=False))
                    logger.debug("refreshed negative pool at iteration %d", iteration)
                batch = []
                for q in order[start:start + config.batch_size]:
                    q = int(q)
                    peers = groups[store.label_of(q)]
                    batch.append((q, int(rng.choice(peers[peers != q])), pool))
                # map keeps tuple order so the reduction is schedule-independent
                results = list(executor.map(step_tuple, batch))
                total = _zero_like(model)
                for loss, grads in results:
                    _accumulate(total, grads, 1.0 / len(results))
                optimizer.step(model, total)
                batch_loss = sum(loss for loss, _ in results) / len(results)
                losses.extend(loss for loss, _ in results)
                logger.debug("epoch %d iteration %d loss %.6f", epoch, iteration, batch_loss)
                iteration += 1

            record = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)))
            if validation is not None:
                record.validation_map = _validation_map(model, validation, store, graph, threads)
                if best is None or record.validation_map > best[0]:
                    best = (record.validation_map, epoch, model.copy_deep())
            history.append(record)
            _write_history(history_path, record)
            logger.info(
                "epoch %d/%d mean loss %.6f%s", epoch, config.epochs, record.mean_loss,
                "" if record.validation_map is None else f" validation mAP {record.validation_map:.4f}",
            )

    if best is not None:
        logger.info("selected epoch %d (validation mAP %.4f)", best[1], best[0])
        return best[2], TrainResult(history=history, best_epoch=best[1])
    return model, TrainResult(history=history)
