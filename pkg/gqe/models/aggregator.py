from enum import Enum
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class EncoderVariant(str, Enum):
    IDENTITY = "identity"
    ATTENTION = "attention"


class EncoderConfig(BaseModel):
    """Shape of the transformer encoder inside one aggregator.

    Desk-scale defaults; the full-size model used 64 heads, 3 layers and a
    feed-forward width of 2048.
    """

    model_config = ConfigDict(frozen=True)

    dim: int = Field(ge=1)
    heads: int = Field(default=4, ge=1)
    layers: int = Field(default=1, ge=1)
    ff_dim: int = Field(default=64, ge=1)
    variant: EncoderVariant = EncoderVariant.ATTENTION

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.variant == EncoderVariant.ATTENTION and self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        return self


class AggregatorParams(BaseModel):
    """Learnable state of one aggregation level.

    ``positional`` row ``p`` is added to the item at rank position ``p``
    (row 0 belongs to the node itself). ``encoder_weights`` holds the encoder
    tensors in declaration order. ``temperature`` enables the tempered
    softmax over similarity weights.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: EncoderConfig
    k: int = Field(ge=1)
    positional: np.ndarray
    encoder_weights: Dict[str, np.ndarray] = Field(default_factory=dict)
    temperature: Optional[float] = Field(default=None, gt=0)
    # return the node unchanged, ignoring neighbors
    passthrough: bool = False

    @model_validator(mode="after")
    def _check_tensors(self) -> "AggregatorParams":
        if self.positional.shape != (self.k + 1, self.config.dim):
            raise ValueError(
                f"positional must be {(self.k + 1, self.config.dim)}, got {self.positional.shape}"
            )
        for name, tensor in self.named_tensors():
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"non-finite values in {name}")
        return self

    @property
    def dim(self) -> int:
        return self.config.dim

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "positional", self.positional
        yield from self.encoder_weights.items()

    def copy_deep(self) -> "AggregatorParams":
        return AggregatorParams(
            config=self.config,
            k=self.k,
            positional=self.positional.copy(),
            encoder_weights={n: t.copy() for n, t in self.encoder_weights.items()},
            temperature=self.temperature,
            passthrough=self.passthrough,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AggregatorParams):
            return NotImplemented
        mine, theirs = dict(self.named_tensors()), dict(other.named_tensors())
        return (
            self.config == other.config
            and self.k == other.k
            and self.temperature == other.temperature
            and self.passthrough == other.passthrough
            and mine.keys() == theirs.keys()
            and all(np.array_equal(mine[n], theirs[n]) for n in mine)
        )


class AggregationTrace(BaseModel):
    """Weights and normalizer of one aggregation.

    ``sims[p]`` multiplies input ``p`` (0 = the node) in the weighted sum and
    ``norm`` is the length of that sum before normalization.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sims: np.ndarray
    norm: float
