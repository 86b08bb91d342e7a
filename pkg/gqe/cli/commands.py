"""Subcommand handlers.

Each handler takes the parsed namespace and returns the files it wrote.
"""
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from gqe.core.config import settings
from gqe.core.errors import UsageError, ZeroWeightError
from gqe.models.aggregator import EncoderConfig
from gqe.models.evaluation import MethodSpec
from gqe.models.graph import KnnGraph
from gqe.models.hierarchy import GQEModel
from gqe.models.qe import QEMethod
from gqe.models.store import EmbeddingStore, SynthSpec
from gqe.models.training import TrainConfig
from gqe.services import run_service
from gqe.services.aggregator_service import init_model, load_model, save_model
from gqe.services.embed_store_service import (
    generate_queries,
    generate_synthetic,
    ingest_text,
    load_store,
    save_store,
)
from gqe.services.eval_service import (
    agreement,
    attribute_query,
    diversity,
    evaluate,
    expand_query,
    load_relevance,
    select_dba,
    sweep,
)
from gqe.services.hierarchy_service import (
    load_level_store,
    precompute_levels,
    run_dba,
    save_level_store,
)
from gqe.services.knn_graph_service import build_graph, load_graph, save_graph
from gqe.services.trainer_service import train

logger = logging.getLogger(__name__)


def _emit(payload, out: Optional[str]) -> List[str]:
    text = json.dumps(payload, indent=2)
    if out is None:
        sys.stdout.write(text + "\n")
        return []
    Path(out).write_text(text + "\n", encoding="utf-8")
    return [out]


def _default_k(store: EmbeddingStore) -> int:
    return min(settings.default_k, store.count - 1)


def _graph(args, store: EmbeddingStore, k: int) -> KnnGraph:
    """The cached graph named by ``--graph``, or one built on the fly with ``k`` neighbors."""
    if getattr(args, "graph", None):
        return load_graph(args.graph, store)
    return build_graph(store, k, args.threads)


def _model(args) -> GQEModel:
    if not args.model:
        raise UsageError(f"--model is required for method {args.method}")
    return load_model(args.model)


def _method_spec(args, store: EmbeddingStore, k: Optional[int]) -> MethodSpec:
    method = QEMethod(args.method)
    if method in (QEMethod.NONE, QEMethod.GQE):
        k = 0
    elif k is None:
        k = _default_k(store)
    return MethodSpec(
        method=method,
        k=k,
        alpha=args.alpha,
        levels=args.levels or 1,
        fast=getattr(args, "fast", False),
        collapsed=args.collapsed,
    )


def _needs_graph(method: QEMethod) -> bool:
    return method in (QEMethod.GQE, QEMethod.AQE_G, QEMethod.ALPHAQE_G)


def _method_inputs(args, store: EmbeddingStore, spec: MethodSpec, graph_k: Optional[int] = None):
    """Model and graph a method needs; either may be None."""
    model = _model(args) if spec.method == QEMethod.GQE else None
    if model is not None:
        if args.k is not None and args.k not in (model.k, [model.k]):
            raise UsageError(f"--k {args.k} does not match the model's k={model.k}")
        if args.levels is not None and args.levels != model.levels:
            raise UsageError(f"--levels {args.levels} does not match the model's {model.levels} levels")
    graph = None
    if _needs_graph(spec.method):
        graph = _graph(args, store, model.k if model is not None else (graph_k or spec.k))
    return model, graph


def ingest(args) -> List[str]:
    store = ingest_text(args.input, normalize=not args.raw, labels_path=args.labels)
    save_store(store, args.out)
    return [args.out]


def synth(args) -> List[str]:
    spec = SynthSpec(
        clusters=args.clusters,
        points_per_cluster=args.points_per_cluster,
        dim=args.dim,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    save_store(generate_synthetic(spec), args.out)
    outputs = [args.out]
    if args.queries_per_cluster > 0:
        out = Path(args.out)
        queries_out = args.queries_out or str(out.with_name(f"{out.stem}.queries{out.suffix}"))
        save_store(generate_queries(spec, args.queries_per_cluster), queries_out)
        outputs.append(queries_out)
    return outputs


def build_graph_cmd(args) -> List[str]:
    store = load_store(args.store)
    graph = build_graph(store, args.k if args.k is not None else _default_k(store), args.threads)
    save_graph(graph, args.out)
    return [args.out]


def _query_vector(args, store: EmbeddingStore) -> np.ndarray:
    if args.query_vector:
        try:
            q = np.array([float(v) for v in args.query_vector.split(",")])
        except ValueError:
            raise UsageError("--query-vector must be comma-separated decimals")
        norm = np.linalg.norm(q)
        if norm == 0:
            raise UsageError("--query-vector is the zero vector")
        return q / norm
    queries = load_store(args.queries) if args.queries else store
    if not 0 <= args.query_id < queries.count:
        raise UsageError(f"--query-id must be in [0, {queries.count}), got {args.query_id}")
    return queries.vectors[args.query_id].astype(np.float64)


def expand(args) -> List[str]:
    store = load_store(args.store)
    spec = _method_spec(args, store, args.k)
    model, graph = _method_inputs(args, store, spec)
    level_store = load_level_store(args.level_store) if args.level_store else None
    if level_store is not None and not spec.fast:
        raise UsageError("--level-store only applies with --fast")
    qe = expand_query(spec, _query_vector(args, store), store, graph, model, level_store)
    payload = {"method": spec.method.value, "params": spec.params(), "vector": [float(v) for v in qe]}
    if not args.query_vector:
        payload["query_id"] = args.query_id
    return _emit(payload, args.out)


def precompute(args) -> List[str]:
    store = load_store(args.store)
    model = load_model(args.model)
    graph = _graph(args, store, model.k)
    save_level_store(precompute_levels(model, graph, store, args.threads), args.out)
    return [args.out]


def dba(args) -> List[str]:
    store = load_store(args.store)
    model = load_model(args.model)
    grid = len(args.t1) * len(args.t2) * len(args.k_dba)
    if not args.val:
        if grid > 1:
            raise UsageError("several --t1, --t2 or --k-dba values need --val to choose between them")
        graph = _graph(args, store, args.k_dba[0])
        save_store(run_dba(model, graph, store, args.t1[0], args.t2[0], args.k_dba[0], args.threads), args.out)
        return [args.out]

    queries = load_store(args.val)
    relevance = load_relevance(args.relevance, queries.count) if args.relevance else None
    graph = _graph(args, store, max(args.k_dba + [model.k]))
    augmented, selection = select_dba(
        model, graph, store, queries, args.t1, args.t2, args.k_dba, relevance=relevance, threads=args.threads
    )
    save_store(augmented, args.out)
    report = args.report or f"{args.out}.dba.json"
    return [args.out] + _emit(selection.model_dump(mode="json"), report)


def train_cmd(args) -> List[str]:
    store = load_store(args.store)
    k = args.k if args.k is not None else _default_k(store)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        margin=args.margin,
        negatives_per_positive=args.negatives,
        pool_size=args.pool_size,
        pool_refresh_interval=args.pool_refresh,
        queries_per_epoch=args.queries_per_epoch,
        seed=args.seed,
    )
    encoder = EncoderConfig(dim=store.dim, heads=args.heads, layers=args.layers, ff_dim=args.ff_dim)
    model = init_model(encoder, k, args.levels, seed=args.seed)
    graph = _graph(args, store, k)
    validation = load_store(args.val) if args.val else None
    history = args.history or f"{args.out}.history.jsonl"
    trained, _ = train(model, store, graph, config, validation, history, args.threads)
    save_model(trained, args.out)
    return [args.out, history]


def eval_cmd(args) -> List[str]:
    store = load_store(args.store)
    queries = load_store(args.queries)
    ks = args.k or [None]
    spec = _method_spec(args, store, ks[0])
    model, graph = _method_inputs(args, store, spec, None if ks[0] is None else max(ks))
    dba_store = load_store(args.dba_store) if args.dba_store else None
    relevance = load_relevance(args.relevance, queries.count) if args.relevance else None
    options = dict(model=model, dba_store=dba_store, relevance=relevance, threads=args.threads)
    if len(ks) > 1:
        reports = sweep(spec, ks, queries, store, graph, **options)
        return _emit([r.model_dump(mode="json") for r in reports], args.out)
    report = evaluate(spec, queries, store, graph, **options)
    return _emit(report.model_dump(mode="json"), args.out)


def metrics(args) -> List[str]:
    store = load_store(args.store)
    queries = load_store(args.queries) if args.queries else store
    if not store.has_labels or not queries.has_labels:
        raise UsageError("metrics need labelled --store and --queries")
    spec = _method_spec(args, store, args.k)
    if spec.method == QEMethod.NONE:
        raise UsageError("--method none has no neighbor weights")
    model, graph = _method_inputs(args, store, spec)
    ids = args.query_id if args.query_id is not None else list(range(queries.count))
    rows = []
    for qid in ids:
        if not 0 <= qid < queries.count:
            raise UsageError(f"--query-id must be in [0, {queries.count}), got {qid}")
        attr = attribute_query(spec, queries.vectors[qid], store, graph, model)
        if args.queries is None:
            # a database row is its own nearest neighbor
            attr = attr.without(qid)
        label = queries.label_of(qid)
        row = {"id": qid, "agreement": None, "diversity": None}
        try:
            row["agreement"] = agreement(attr, store.labels, label)
            row["diversity"] = diversity(attr, store.labels, label)
        except ZeroWeightError as exc:
            logger.warning("query %d: %s", qid, exc)
        rows.append(row)

    def mean(key):
        values = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(values)) if values else None

    payload = {
        "method": spec.method.value,
        "params": spec.params(),
        "mean_agreement": mean("agreement"),
        "mean_diversity": mean("diversity"),
        "per_query": rows,
    }
    return _emit(payload, args.out)


def history(args) -> int:
    if not settings.registry_url:
        raise UsageError("no run registry configured; set GQE_REGISTRY_URL")
    for manifest in run_service.list_runs(settings.registry_url, args.command_name, args.limit):
        sys.stdout.write(manifest.model_dump_json() + "\n")
    return 0
