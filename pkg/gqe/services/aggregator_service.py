"""Per-level aggregation function.

For a node ``v`` and its ranked neighbors ``d_1 .. d_K``:

1. add positional row ``p`` to a working copy of item ``p``;
2. run the encoder over the K+1 working vectors;
3. ``sim_0 = 1`` and ``sim_i`` = cosine of the encoded node and encoded neighbor ``i``;
4. optionally replace the sims by ``softmax(sims / T)``;
5. return ``normalize(sum(sim_p * item_p))`` over the ORIGINAL (unshifted) items.

Positional shifts feed only the encoder, so the output stays an exact linear
combination of the input embeddings.
"""
import logging
import struct
import threading
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from gqe.core.errors import DimensionError, FormatError, NonFiniteError
from gqe.models.aggregator import AggregationTrace, AggregatorParams, EncoderConfig, EncoderVariant
from gqe.models.hierarchy import GQEModel
from gqe.services.encoder_service import (
    INIT_SCALE,
    encoder_backward,
    encoder_forward_cached,
    encoder_tensor_shapes,
    init_encoder_weights,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PARAMS_MAGIC = b"AGG1"
MODEL_MAGIC = b"GQE1"
PARAMS_VERSION = 1
PARAMS_HEADER = struct.Struct("<4sIIIIIIIId")
MODEL_HEADER = struct.Struct("<4sIII")
FLAG_TEMPERATURE = 0x1
FLAG_PASSTHROUGH = 0x2
VARIANT_CODES = {EncoderVariant.IDENTITY: 0, EncoderVariant.ATTENTION: 1}
ZERO_NORM = 1e-12

Grads = Dict[str, np.ndarray]


class AggregationCounter:
    """Counts aggregated nodes (one per output row)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.calls += n


def to_float32_grid(array: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept as float64."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def init_params(
    config: EncoderConfig,
    k: int,
    seed: Union[int, np.random.SeedSequence] = 0,
    temperature: Optional[float] = None,
) -> AggregatorParams:
    """Gaussian(0, 0.02) positional rows and encoder matrices, on the float32 grid."""
    rng = np.random.default_rng(seed)
    positional = rng.normal(0.0, INIT_SCALE, size=(k + 1, config.dim))
    weights = init_encoder_weights(config, rng)
    return AggregatorParams(
        config=config,
        k=k,
        positional=to_float32_grid(positional),
        encoder_weights={n: to_float32_grid(t) for n, t in weights.items()},
        temperature=temperature,
    )


def init_model(
    config: EncoderConfig, k: int, levels: int, seed: int = 0, temperature: Optional[float] = None
) -> GQEModel:
    """Fresh L-level model; every level draws from its own child stream of ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(levels)
    return GQEModel(k=k, per_level_params=[init_params(config, k, s, temperature) for s in streams])


def identity_params(dim: int, k: int, temperature: Optional[float] = None) -> AggregatorParams:
    """Identity encoder with zero positional rows: sims are plain cosines."""
    config = EncoderConfig(dim=dim, heads=1, layers=1, ff_dim=1, variant=EncoderVariant.IDENTITY)
    return AggregatorParams(config=config, k=k, positional=np.zeros((k + 1, dim)), temperature=temperature)


def passthrough_params(dim: int, k: int) -> AggregatorParams:
    """Aggregator that returns its node unchanged and ignores the neighbors."""
    config = EncoderConfig(dim=dim, heads=1, layers=1, ff_dim=1, variant=EncoderVariant.IDENTITY)
    return AggregatorParams(config=config, k=k, positional=np.zeros((k + 1, dim)), passthrough=True)


def aggregate_batch(
    params: AggregatorParams,
    nodes: np.ndarray,
    neighbors: np.ndarray,
    counter: Optional[AggregationCounter] = None,
    keep_cache: bool = False,
):
    """Aggregate B nodes at once.

    ``nodes`` is ``(B, F)`` and ``neighbors`` ``(B, k, F)`` with k <= params.k.
    Returns ``(outputs, weights, norms, cache)``; ``cache`` is only filled when
    ``keep_cache`` is set and feeds :func:`aggregate_backward`.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if nodes.ndim != 2 or neighbors.ndim != 3 or neighbors.shape[0] != nodes.shape[0]:
        raise DimensionError(f"bad aggregation shapes {nodes.shape} and {neighbors.shape}")
    b, f = nodes.shape
    if f != params.dim or neighbors.shape[2] != params.dim:
        raise DimensionError(f"aggregator dimension is {params.dim}, inputs have {f}")
    s = neighbors.shape[1] + 1
    if s > params.k + 1:
        raise DimensionError(f"aggregator supports at most {params.k} neighbors, got {s - 1}")
    if counter is not None:
        counter.add(b)

    x = np.concatenate([nodes[:, None, :], neighbors], axis=1)
    enc = None
    if params.passthrough:
        weights = np.zeros((b, s))
        weights[:, 0] = 1.0
    else:
        h0 = x + params.positional[:s]
        encoded, enc_cache = encoder_forward_cached(params.config, params.encoder_weights, h0)
        if not np.all(np.isfinite(encoded)):
            raise NonFiniteError("non-finite encoder output")
        e0, en = encoded[:, 0], encoded[:, 1:]
        n0 = np.maximum(np.linalg.norm(e0, axis=1), ZERO_NORM)
        nn = np.maximum(np.linalg.norm(en, axis=2), ZERO_NORM)
        cos = np.einsum("bkf,bf->bk", en, e0) / (n0[:, None] * nn)
        sims = np.concatenate([np.ones((b, 1)), cos], axis=1)
        if params.temperature is not None:
            z = sims / params.temperature
            z = np.exp(z - z.max(axis=1, keepdims=True))
            weights = z / z.sum(axis=1, keepdims=True)
        else:
            weights = sims
        enc = (enc_cache, e0, en, n0, nn, cos)

    total = np.einsum("bs,bsf->bf", weights, x)
    norms = np.linalg.norm(total, axis=1)
    degenerate = norms < ZERO_NORM
    if degenerate.any():
        logger.warning("%d aggregations sum to the zero vector; returning their nodes", int(degenerate.sum()))
        weights = weights.copy()
        weights[degenerate] = 0.0
        weights[degenerate, 0] = 1.0
        total[degenerate] = x[degenerate, 0]
        norms = np.where(degenerate, np.linalg.norm(total, axis=1), norms)
    out = total / norms[:, None]
    cache = (x, weights, norms, out, degenerate, enc) if keep_cache else None
    return out, weights, norms, cache


def aggregate_backward(params: AggregatorParams, cache, dout: np.ndarray) -> Tuple[np.ndarray, Grads]:
    """Gradients w.r.t. every input item ``(B, k+1, F)`` and every parameter tensor."""
    x, weights, norms, out, degenerate, enc = cache
    b, s, f = x.shape
    dtotal = (dout - out * np.sum(out * dout, axis=1, keepdims=True)) / norms[:, None]
    dx = weights[:, :, None] * dtotal[:, None, :]
    grads: Grads = {}
    if enc is None:
        return dx, grads

    dweights = np.einsum("bsf,bf->bs", x, dtotal)
    dweights[degenerate] = 0.0
    if params.temperature is not None:
        dsims = weights * (dweights - np.sum(dweights * weights, axis=1, keepdims=True)) / params.temperature
    else:
        dsims = dweights
    enc_cache, e0, en, n0, nn, cos = enc
    dcos = dsims[:, 1:]
    scale = dcos / (n0[:, None] * nn)
    de0 = np.einsum("bk,bkf->bf", scale, en) - np.sum(dcos * cos, axis=1)[:, None] * e0 / (n0 ** 2)[:, None]
    den = scale[:, :, None] * e0[:, None, :] - (dcos * cos / nn ** 2)[:, :, None] * en
    dencoded = np.concatenate([de0[:, None, :], den], axis=1)
    dh0, grads = encoder_backward(params.config, enc_cache, dencoded)
    dx = dx + dh0
    positional = np.zeros_like(params.positional)
    positional[:s] = dh0.sum(axis=0)
    grads["positional"] = positional
    return dx, grads


def aggregate(
    params: AggregatorParams, node: np.ndarray, neighbor_embs: np.ndarray
) -> Tuple[np.ndarray, AggregationTrace]:
    """Aggregate a single node with its ranked neighbors."""
    neighbor_embs = np.asarray(neighbor_embs, dtype=np.float64)
    if neighbor_embs.ndim != 2:
        raise DimensionError("neighbor embeddings must be a K x F matrix")
    out, weights, norms, _ = aggregate_batch(params, np.asarray(node)[None], neighbor_embs[None])
    return out[0], AggregationTrace(sims=weights[0], norm=float(norms[0]))


def _write_params(handle, params: AggregatorParams) -> None:
    config = params.config
    flags = (FLAG_TEMPERATURE if params.temperature is not None else 0) | (
        FLAG_PASSTHROUGH if params.passthrough else 0
    )
    handle.write(PARAMS_HEADER.pack(
        PARAMS_MAGIC, PARAMS_VERSION, config.dim, config.heads, config.layers, config.ff_dim,
        VARIANT_CODES[config.variant], params.k, flags, params.temperature or 0.0,
    ))
    tensors = list(params.named_tensors())
    handle.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        handle.write(struct.pack("<H", len(encoded)))
        handle.write(encoded)
        handle.write(struct.pack("<I", tensor.ndim))
        handle.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        handle.write(np.asarray(tensor, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, fmt: Union[str, struct.Struct]):
        unpacker = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if self.pos + unpacker.size > len(self.raw):
            raise FormatError(f"{self.source}: truncated parameter file")
        values = unpacker.unpack_from(self.raw, self.pos)
        self.pos += unpacker.size
        return values

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated parameter file")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _read_params(reader: _Reader) -> AggregatorParams:
    magic, version, dim, heads, layers, ff_dim, variant, k, flags, temperature = reader.take(PARAMS_HEADER)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{reader.source}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"{reader.source}: unsupported parameter version {version}")
    codes = {v: key for key, v in VARIANT_CODES.items()}
    if variant not in codes:
        raise FormatError(f"{reader.source}: unknown encoder variant {variant}")
    try:
        config = EncoderConfig(dim=dim, heads=heads, layers=layers, ff_dim=ff_dim, variant=codes[variant])
    except ValueError as exc:
        raise FormatError(f"{reader.source}: invalid encoder config: {exc}")

    (count,) = reader.take("<I")
    tensors = {}
    for _ in range(count):
        (length,) = reader.take("<H")
        name = reader.take_bytes(length).decode("utf-8")
        (ndim,) = reader.take("<I")
        shape = reader.take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take_bytes(size * 4), dtype="<f4")
        tensors[name] = data.astype(np.float64).reshape(shape)

    expected = [("positional", (k + 1, dim))] + encoder_tensor_shapes(config)
    for name, shape in expected:
        if name not in tensors or tensors[name].shape != shape:
            raise DimensionError(f"{reader.source}: tensor {name} missing or not of shape {shape}")
    if len(tensors) != len(expected):
        raise FormatError(f"{reader.source}: unexpected tensors in parameter file")

    try:
        return AggregatorParams(
            config=config,
            k=k,
            positional=tensors.pop("positional"),
            encoder_weights={name: tensors[name] for name, _ in expected[1:]},
            temperature=temperature if flags & FLAG_TEMPERATURE else None,
            passthrough=bool(flags & FLAG_PASSTHROUGH),
        )
    except ValueError as exc:
        raise FormatError(f"{reader.source}: invalid parameters: {exc}")


def save_params(params: AggregatorParams, path: PathLike) -> None:
    with open(path, "wb") as handle:
        _write_params(handle, params)


def load_params(path: PathLike) -> AggregatorParams:
    reader = _Reader(Path(path).read_bytes(), str(path))
    params = _read_params(reader)
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return params


def save_model(model: GQEModel, path: PathLike) -> None:
    """Write all levels: a small header followed by one parameter block per level."""
    with open(path, "wb") as handle:
        handle.write(MODEL_HEADER.pack(MODEL_MAGIC, PARAMS_VERSION, model.levels, model.k))
        for params in model.per_level_params:
            _write_params(handle, params)
    logger.info("saved %d-level model to %s", model.levels, path)


def load_model(path: PathLike) -> GQEModel:
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic, version, levels, k = reader.take(MODEL_HEADER)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    per_level = [_read_params(reader) for _ in range(levels)]
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: trailing bytes after model")
    try:
        return GQEModel(k=k, per_level_params=per_level)
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent model: {exc}")
