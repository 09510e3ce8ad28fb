"""
Shared Pydantic models for the analysis pipeline
"""

from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class ContrastKind(str, Enum):
    WILLIAMS = "Williams"
    GRAND_MEAN = "GrandMean"
    HIGHEST_DOSE = "HighestDose"
    DUNNETT = "Dunnett"
    USER_DEFINED = "UserDefined"
    INTERACTION = "Interaction"


class CovarianceKind(str, Enum):
    CLASSICAL = "classical"
    HC0 = "hc0"
    HC1 = "hc1"
    HC3 = "hc3"


class Alternative(str, Enum):
    TWO_SIDED = "two-sided"
    GREATER = "greater"
    LESS = "less"


class TransformKind(str, Enum):
    NONE = "none"
    LOG = "log"
    SQRT = "sqrt"
    FREEMAN_TUKEY = "freeman-tukey"
    CUSTOM = "custom"


class CellOrder(str, Enum):
    LAB_MAJOR = "lab-major"
    DOSE_MAJOR = "dose-major"


class FactorLevels(BaseModel):
    """Ordered levels of one design factor with their replicate counts.

    Dose factors are ordered ascending with the control first and carry
    ``control`` (the first label) and the numeric ``values``.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    levels: List[str]
    sizes: List[int]
    control: Optional[str] = None
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_levels(self) -> "FactorLevels":
        # a dose factor needs the control plus one dose; a lab factor may hold a single lab
        minimum = 2 if self.control is not None else 1
        if len(self.levels) < minimum:
            raise ValueError(f"factor '{self.name}' needs at least {minimum} level(s), got {len(self.levels)}")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"factor '{self.name}' has duplicate level labels")
        if len(self.sizes) != len(self.levels):
            raise ValueError(f"factor '{self.name}': {len(self.sizes)} sizes for {len(self.levels)} levels")
        bad = [lvl for lvl, n in zip(self.levels, self.sizes) if n < 1]
        if bad:
            raise ValueError(f"factor '{self.name}': nonpositive size for level(s) {', '.join(bad)}")
        if self.control is not None and self.control != self.levels[0]:
            raise ValueError(f"factor '{self.name}': control '{self.control}' must be the first level")
        if self.values is not None:
            if len(self.values) != len(self.levels):
                raise ValueError(f"factor '{self.name}': {len(self.values)} values for {len(self.levels)} levels")
            if any(b <= a for a, b in zip(self.values, self.values[1:])):
                raise ValueError(f"factor '{self.name}': dose values must be strictly ascending")
        return self

    @property
    def is_dose(self) -> bool:
        return self.control is not None

    @property
    def n_levels(self) -> int:
        return len(self.levels)


class ContrastMatrix(BaseModel):
    """Labeled q x m weight matrix over factor levels or design cells.

    Construction only checks shapes; the zero-sum and non-zero row rules are
    reported by ``contrasts.validate`` so that broken matrices can still be
    inspected.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ContrastKind
    rows: np.ndarray
    row_labels: List[str]
    column_labels: List[str]
    cell_order: Optional[CellOrder] = None
    parent_shapes: Optional[Tuple[Tuple[int, int], Tuple[int, int]]] = None
    # lab singled out by each interaction row (total-mean parent)
    row_groups: Optional[List[str]] = None

    @field_validator("rows", mode="before")
    @classmethod
    def _as_matrix(cls, value) -> np.ndarray:
        matrix = np.array(value, dtype=float, ndmin=2, copy=True)
        if matrix.ndim != 2:
            raise ValueError(f"contrast rows must form a 2-D matrix, got shape {matrix.shape}")
        matrix.setflags(write=False)
        return matrix

    @model_validator(mode="after")
    def _check_shape(self) -> "ContrastMatrix":
        q, m = self.rows.shape
        if len(self.row_labels) != q:
            raise ValueError(f"{len(self.row_labels)} row labels for {q} rows")
        if len(self.column_labels) != m:
            raise ValueError(f"{len(self.column_labels)} column labels for {m} columns")
        if self.row_groups is not None and len(self.row_groups) != q:
            raise ValueError(f"{len(self.row_groups)} row groups for {q} rows")
        return self

    @property
    def q(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]
