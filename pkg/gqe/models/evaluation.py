from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gqe.models.qe import QEMethod

CLASSIC_HIERARCHICAL = (QEMethod.AQE_G, QEMethod.ALPHAQE_G)


class MethodSpec(BaseModel):
    """How queries are expanded before ranking.

    ``k`` and ``levels`` are taken from the model for ``gqe``; ``levels`` only
    matters for the hierarchical hand-crafted methods.
    """

    method: QEMethod = QEMethod.NONE
    k: int = Field(default=0, ge=0)
    alpha: Optional[float] = Field(default=None, ge=0)
    levels: int = Field(default=1, ge=1)
    fast: bool = False
    collapsed: bool = False

    @model_validator(mode="after")
    def _check_method(self) -> "MethodSpec":
        needs_k = self.method not in (QEMethod.NONE, QEMethod.GQE)
        if needs_k and self.k < 1:
            raise ValueError(f"{self.method.value} needs k >= 1")
        uses_alpha = self.method in (QEMethod.ALPHAQE, QEMethod.ALPHAQE_G)
        if uses_alpha and self.alpha is None:
            raise ValueError(f"{self.method.value} needs alpha")
        if not uses_alpha and self.alpha is not None:
            raise ValueError(f"{self.method.value} takes no alpha")
        if (self.fast or self.collapsed) and self.method != QEMethod.GQE:
            raise ValueError("fast and collapsed only apply to gqe")
        return self

    def params(self) -> Dict[str, Any]:
        """Hyper-parameters recorded in reports."""
        out: Dict[str, Any] = {}
        if self.method == QEMethod.NONE:
            return out
        if self.method != QEMethod.GQE:
            out["k"] = self.k
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.method in CLASSIC_HIERARCHICAL:
            out["levels"] = self.levels
        if self.method == QEMethod.GQE:
            out["fast"] = self.fast
            out["collapsed"] = self.collapsed
        return out


class RankedResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    query: Union[int, str]
    ids: np.ndarray
    depth: int

    @model_validator(mode="after")
    def _check_depth(self) -> "RankedResult":
        if self.ids.shape != (self.depth,):
            raise ValueError(f"ranking holds {self.ids.shape[0]} ids, depth is {self.depth}")
        return self


class QueryAP(BaseModel):
    id: int
    ap: float = Field(ge=0, le=1)


class EvalReport(BaseModel):
    method: str
    params: Dict[str, Any] = Field(default_factory=dict)
    map: float = Field(ge=0, le=1)
    per_query: List[QueryAP]

    @model_validator(mode="after")
    def _check_mean(self) -> "EvalReport":
        if self.per_query:
            mean = sum(q.ap for q in self.per_query) / len(self.per_query)
            if abs(mean - self.map) > 1e-9:
                raise ValueError(f"map {self.map} is not the mean of the per-query APs ({mean})")
        return self


class DBATrial(BaseModel):
    """One point of the augmentation grid and the validation mAP it reached."""

    t1: float = Field(gt=0)
    t2: float = Field(gt=0)
    k_dba: int = Field(ge=1)
    map: float = Field(ge=0, le=1)


class DBASelection(BaseModel):
    method: str
    trials: List[DBATrial]
    best: DBATrial
