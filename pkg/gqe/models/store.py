from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

NORM_TOLERANCE = 1e-5


class EmbeddingStore(BaseModel):
    """Id-indexed matrix of embeddings with optional integer class labels.

    Row ``i`` is the embedding of id ``i``. Vectors are float32; labels, when
    present, hold one non-negative class per id.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vectors: np.ndarray
    labels: Optional[np.ndarray] = None
    normalized: bool = True

    @model_validator(mode="after")
    def _check_invariants(self) -> "EmbeddingStore":
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0 or self.vectors.shape[1] == 0:
            raise ValueError(f"vectors must be a non-empty N x F matrix, got shape {self.vectors.shape}")
        if self.vectors.dtype != np.float32:
            raise ValueError("vectors must be float32")
        if self.labels is not None:
            if self.labels.shape != (self.vectors.shape[0],):
                raise ValueError(
                    f"expected {self.vectors.shape[0]} labels, got shape {self.labels.shape}"
                )
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")
        # shared read-only views; stores are immutable after load
        self.vectors.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)
        return self

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.normalized == other.normalized
            and np.array_equal(self.vectors, other.vectors)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    def label_of(self, idx: int) -> int:
        if self.labels is None:
            raise ValueError("store has no labels")
        return int(self.labels[idx])


class SynthSpec(BaseModel):
    """Parameters of a seeded clustered dataset."""

    clusters: int = Field(ge=2)
    points_per_cluster: int = Field(ge=1)
    dim: int = Field(ge=2)
    noise_sigma: float = Field(ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
