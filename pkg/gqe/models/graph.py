from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class KnnGraph(BaseModel):
    """K nearest database neighbors of every database id.

    ``ids[u]`` lists the neighbors of ``u`` by descending cosine similarity
    (ties by ascending id) and ``sims[u]`` the matching similarities.
    ``digest`` binds the graph to the content of the store it was built on.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    k: int = Field(ge=1)
    ids: np.ndarray
    sims: np.ndarray
    digest: bytes

    @model_validator(mode="after")
    def _check_shape(self) -> "KnnGraph":
        if self.ids.ndim != 2 or self.ids.shape[1] != self.k:
            raise ValueError(f"ids must be N x {self.k}, got shape {self.ids.shape}")
        if self.sims.shape != self.ids.shape:
            raise ValueError("ids and sims shapes differ")
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")
        self.ids.setflags(write=False)
        self.sims.setflags(write=False)
        return self

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    def neighbors(self, node: int, k: int = 0) -> List[Tuple[int, float]]:
        k = k or self.k
        return [(int(i), float(s)) for i, s in zip(self.ids[node, :k], self.sims[node, :k])]

    def neighbor_ids(self, node: int, k: int = 0) -> np.ndarray:
        return self.ids[node, : (k or self.k)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnnGraph):
            return NotImplemented
        return (
            self.k == other.k
            and self.digest == other.digest
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.sims, other.sims)
        )


class QueryNeighbors(BaseModel):
    """Top-K database neighbors of an external query vector."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: np.ndarray
    sims: np.ndarray

    @property
    def k(self) -> int:
        return int(self.ids.shape[0])

    def pairs(self) -> List[Tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.sims)]
