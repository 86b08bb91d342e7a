from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class TrainConfig(BaseModel):
    """Optimization settings.

    Desk-scale defaults. The full-size run used 40 epochs, batch 64, learning
    rate 5e-5, weight decay 1.5e-6, margin 0.71, 5 negatives per positive from
    a pool of 20000 refreshed every 2000 iterations.
    """

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0)
    weight_decay: float = Field(default=1.5e-6, ge=0)
    margin: float = Field(default=0.71, gt=0, lt=2)
    negatives_per_positive: int = Field(default=5, ge=1)
    pool_size: int = Field(default=500, ge=1)
    pool_refresh_interval: int = Field(default=50, ge=1)
    queries_per_epoch: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)


class TrainingTuple(BaseModel):
    q: int = Field(ge=0)
    p: int = Field(ge=0)
    negatives: List[int]


class EpochRecord(BaseModel):
    epoch: int
    mean_loss: float
    validation_map: Optional[float] = None


class TrainResult(BaseModel):
    history: List[EpochRecord]
    best_epoch: Optional[int] = None

    @model_validator(mode="after")
    def _check_best(self) -> "TrainResult":
        if self.best_epoch is not None and not any(r.epoch == self.best_epoch for r in self.history):
            raise ValueError("best_epoch must refer to a recorded epoch")
        return self
