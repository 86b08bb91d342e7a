from typing import Dict, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gqe.models.aggregator import AggregationTrace, AggregatorParams

# node reference of the query inside neighborhood sets and traces;
# database nodes are referenced by their non-negative id
QUERY = -1


class GQEModel(BaseModel):
    """L aggregation levels; level ``i`` parameters are shared by every node aggregated at that level."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    k: int = Field(ge=1)
    per_level_params: List[AggregatorParams]

    @model_validator(mode="after")
    def _check_levels(self) -> "GQEModel":
        if not self.per_level_params:
            raise ValueError("a model needs at least one level")
        dims = {p.dim for p in self.per_level_params}
        ks = {p.k for p in self.per_level_params}
        if len(dims) != 1 or ks != {self.k}:
            raise ValueError(f"all levels must share dim and k={self.k}, got dims {dims} and ks {ks}")
        return self

    @property
    def levels(self) -> int:
        return len(self.per_level_params)

    @property
    def dim(self) -> int:
        return self.per_level_params[0].dim

    def level(self, i: int) -> AggregatorParams:
        """Parameters of ``agg_i`` (1-based)."""
        return self.per_level_params[i - 1]

    def copy_deep(self) -> "GQEModel":
        return GQEModel(k=self.k, per_level_params=[p.copy_deep() for p in self.per_level_params])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GQEModel):
            return NotImplemented
        return self.k == other.k and self.per_level_params == other.per_level_params


class NeighborhoodSets(BaseModel):
    """``sets[i]`` is S^i: the nodes within L - i hops of the query, query first."""

    sets: List[List[int]]

    @property
    def levels(self) -> int:
        return len(self.sets) - 1

    def at(self, i: int) -> List[int]:
        return self.sets[i]


class LevelStore(BaseModel):
    """Query-independent per-level database embeddings v^1 .. v^(L-1).

    ``matrices[i - 1]`` holds v^i for every database id.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    levels: int = Field(ge=1)
    matrices: List[np.ndarray]
    digest: bytes

    @model_validator(mode="after")
    def _check_matrices(self) -> "LevelStore":
        if len(self.matrices) != self.levels - 1:
            raise ValueError(f"expected {self.levels - 1} level matrices, got {len(self.matrices)}")
        for matrix in self.matrices:
            matrix.setflags(write=False)
        return self

    def at(self, i: int) -> np.ndarray:
        return self.matrices[i - 1]


class NodeTrace(BaseModel):
    """One recorded aggregation: the input node references and their weights."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    refs: np.ndarray
    trace: AggregationTrace


class ExpansionTrace(BaseModel):
    """``levels[i - 1]`` maps every node aggregated at level ``i`` to its record."""

    levels: List[Dict[int, NodeTrace]]


class WeightAttribution(BaseModel):
    """Exact linear decomposition of an expanded query.

    ``query_weight * q + sum(weights[i] * d_i)`` equals the unit expanded
    query; ``final_norm`` is the last normalizer (multiplying the weights by
    it gives the decomposition of the pre-normalization vector).
    """

    query_weight: float
    weights: Dict[int, float]
    final_norm: float = 1.0

    def clamped(self) -> "WeightAttribution":
        """Non-negative view used by Agreement and Diversity."""
        return WeightAttribution(
            query_weight=max(self.query_weight, 0.0),
            weights={i: max(w, 0.0) for i, w in self.weights.items()},
            final_norm=self.final_norm,
        )

    def without(self, idx: int) -> "WeightAttribution":
        """The same attribution with database item ``idx`` left out."""
        weights = {i: w for i, w in self.weights.items() if i != idx}
        return WeightAttribution(query_weight=self.query_weight, weights=weights, final_norm=self.final_norm)

    def reconstruct(self, q: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        out = self.query_weight * np.asarray(q, dtype=np.float64)
        for idx, weight in self.weights.items():
            out = out + weight * vectors[idx].astype(np.float64)
        return out
