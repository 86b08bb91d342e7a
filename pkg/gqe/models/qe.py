from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, model_validator


class QEMethod(str, Enum):
    NONE = "none"
    AQE = "aqe"
    AQEWD = "aqewd"
    ALPHAQE = "alphaqe"
    GQE = "gqe"
    # hierarchical recursion driven by a hand-crafted aggregation
    AQE_G = "aqe-g"
    ALPHAQE_G = "alphaqe-g"


CLASSIC_METHODS = (QEMethod.AQE, QEMethod.AQEWD, QEMethod.ALPHAQE)


class ClassicQEConfig(BaseModel):
    method: QEMethod
    k: int = Field(ge=1)
    alpha: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_alpha(self) -> "ClassicQEConfig":
        if self.method not in CLASSIC_METHODS:
            raise ValueError(f"{self.method.value} is not a hand-crafted expansion")
        if (self.alpha is not None) != (self.method == QEMethod.ALPHAQE):
            raise ValueError("alpha is required for alphaqe and only for alphaqe")
        return self
