import hashlib
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from gqe.core.errors import DimensionError, FormatError, LabelError, NonFiniteError, ZeroVectorError
from gqe.models.store import NORM_TOLERANCE, EmbeddingStore, SynthSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STORE_MAGIC = b"EMB1"
STORE_HEADER = struct.Struct("<4sIII")
FLAG_NORMALIZED = 0x1
ZERO_NORM = 1e-12


def labels_path_for(path: PathLike) -> Path:
    """Sidecar label file of a store: ``<store>.labels``."""
    path = Path(path)
    return path.with_name(path.name + ".labels")


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize every row in float64, rejecting zero rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms < ZERO_NORM)
    if zero.size:
        raise ZeroVectorError(f"zero vector at row {int(zero[0])} cannot be normalized")
    return matrix / norms[:, None]


def build_store(
    matrix: np.ndarray, labels: Optional[np.ndarray] = None, normalize: bool = True
) -> EmbeddingStore:
    """Validate a raw matrix and wrap it into a store."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got {matrix.ndim} dimensions")
    bad = np.argwhere(~np.isfinite(matrix))
    if bad.size:
        raise NonFiniteError(f"non-finite value at row {int(bad[0][0])}")
    if normalize:
        matrix = normalize_rows(matrix)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (matrix.shape[0],):
            raise LabelError(f"expected {matrix.shape[0]} labels, got {labels.shape[0]}")
    return EmbeddingStore(
        vectors=np.ascontiguousarray(matrix, dtype=np.float32),
        labels=labels,
        normalized=normalize,
    )


def load_labels(path: PathLike, count: int) -> np.ndarray:
    """Read an ``id,label`` file with ascending dense ids."""
    labels = np.empty(count, dtype=np.int64)
    seen = 0
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                id_text, label_text = line.split(",")
                idx, label = int(id_text), int(label_text)
            except ValueError:
                raise LabelError(f"{path}:{lineno}: expected 'id,label', got {line!r}")
            if idx != seen:
                raise LabelError(f"{path}:{lineno}: expected id {seen}, got {idx}")
            if label < 0:
                raise LabelError(f"{path}:{lineno}: negative label {label}")
            if seen >= count:
                raise LabelError(f"{path}: more labels than the {count} stored vectors")
            labels[seen] = label
            seen += 1
    if seen != count:
        raise LabelError(f"{path}: {seen} labels for {count} vectors")
    return labels


def save_labels(labels: np.ndarray, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for idx, label in enumerate(labels):
            handle.write(f"{idx},{int(label)}\n")


def load_store(
    path: PathLike, normalize: bool = True, labels_path: Optional[PathLike] = None
) -> EmbeddingStore:
    """Load a binary store; labels come from ``labels_path`` or the sidecar file if present."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < STORE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dim, count, flags = STORE_HEADER.unpack_from(raw)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dim == 0 or count == 0:
        raise FormatError(f"{path}: empty store (dim={dim}, count={count})")
    payload = raw[STORE_HEADER.size:]
    if len(payload) != dim * count * 4:
        raise DimensionError(
            f"{path}: header declares {count} x {dim} values, payload holds {len(payload) // 4}"
        )
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)

    labels = None
    if labels_path is None and labels_path_for(path).exists():
        labels_path = labels_path_for(path)
    if labels_path is not None:
        labels = load_labels(labels_path, count)

    store = build_store(matrix, labels, normalize=False)
    if flags & FLAG_NORMALIZED:
        # the header flag is only a hint; the rows must back it up
        deviation = np.abs(np.linalg.norm(store.as_float64(), axis=1) - 1.0)
        if deviation.max() <= NORM_TOLERANCE:
            return store.model_copy(update={"normalized": True})
        logger.warning(
            "%s: flagged normalized but row %d has norm off by %g",
            path, int(deviation.argmax()), float(deviation.max()),
        )
    if normalize:
        return build_store(matrix, labels, normalize=True)
    return store


def save_store(store: EmbeddingStore, path: PathLike) -> None:
    """Write the binary store and, when labelled, its sidecar label file."""
    path = Path(path)
    flags = FLAG_NORMALIZED if store.normalized else 0
    with open(path, "wb") as handle:
        handle.write(STORE_HEADER.pack(STORE_MAGIC, store.dim, store.count, flags))
        handle.write(store.vectors.astype("<f4").tobytes())
    if store.labels is not None:
        save_labels(store.labels, labels_path_for(path))
    logger.info("saved %d x %d store to %s", store.count, store.dim, path)


def ingest_text(
    path: PathLike, normalize: bool = True, labels_path: Optional[PathLike] = None
) -> EmbeddingStore:
    """Read one comma-separated embedding per line."""
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(value) for value in line.split(",")]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a list of decimals")
            if rows and len(row) != len(rows[0]):
                raise DimensionError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(row)}")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no embeddings")
    labels = load_labels(labels_path, len(rows)) if labels_path is not None else None
    return build_store(np.array(rows, dtype=np.float64), labels, normalize=normalize)


def store_digest(store: EmbeddingStore) -> bytes:
    """sha256 over the store's shape and float32 payload."""
    digest = hashlib.sha256()
    digest.update(struct.pack("<II", store.dim, store.count))
    digest.update(store.vectors.astype("<f4").tobytes())
    return digest.digest()


def _cluster_centers(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return normalize_rows(rng.standard_normal((spec.clusters, spec.dim)))


def _clustered_points(spec: SynthSpec, per_cluster: int, stream: int) -> EmbeddingStore:
    centers = _cluster_centers(spec)
    rng = np.random.default_rng([spec.seed, stream])
    noise = rng.standard_normal((spec.clusters * per_cluster, spec.dim))
    points = np.repeat(centers, per_cluster, axis=0) + spec.noise_sigma * noise
    labels = np.repeat(np.arange(spec.clusters, dtype=np.int64), per_cluster)
    return build_store(points, labels, normalize=True)


def generate_synthetic(spec: SynthSpec) -> EmbeddingStore:
    """Clustered dataset: cluster ``c`` holds normalized ``center_c + sigma * noise`` points."""
    store = _clustered_points(spec, spec.points_per_cluster, stream=1)
    logger.info(
        "generated %d clusters x %d points in %d dims (sigma=%g, seed=%d)",
        spec.clusters, spec.points_per_cluster, spec.dim, spec.noise_sigma, spec.seed,
    )
    return store


def generate_queries(spec: SynthSpec, per_cluster: int) -> EmbeddingStore:
    """External queries around the same centers, drawn from an independent stream."""
    return _clustered_points(spec, per_cluster, stream=2)
