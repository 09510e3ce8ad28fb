from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Dict, Any, Literal, Optional

from app.cell_means import FTestResult
from app.data_service import ColumnMapping
from app.inference import EquivalencePolicy, LabVerdict
from app.models import Alternative, CovarianceKind, TransformKind
from app.mvt import QmcConfig

OutputFormat = Literal["text", "json", "svg"]
DoseContrastName = Literal["williams", "highest", "dunnett"]
IntervalKind = Literal["compatible", "equivalence"]


class AnalysisConfig(BaseModel):
    input: Optional[str] = None
    synthetic: bool = False
    columns: ColumnMapping = Field(default_factory=ColumnMapping)
    transform: TransformKind = TransformKind.NONE
    transform_name: Optional[str] = None
    dose_contrast: DoseContrastName = "williams"
    vcov: CovarianceKind = CovarianceKind.HC3
    alternative: Alternative = Alternative.TWO_SIDED
    alpha: float = Field(0.05, gt=0.0, le=0.25)
    policy: EquivalencePolicy = Field(default_factory=EquivalencePolicy)
    qmc: QmcConfig = Field(default_factory=QmcConfig)
    formats: List[OutputFormat] = Field(default_factory=lambda: ["text"])
    out_json: Optional[str] = None
    out_svg: Optional[str] = None
    interval: IntervalKind = "compatible"

    @model_validator(mode="after")
    def _check_outputs(self) -> "AnalysisConfig":
        if not self.formats:
            raise ValueError("at least one output format is required")
        if "json" in self.formats and not self.out_json:
            raise ValueError("json output requested without --out-json")
        if "svg" in self.formats and not self.out_svg:
            raise ValueError("svg output requested without --out-svg")
        if not self.synthetic and not self.input:
            raise ValueError("an --input file or --synthetic is required")
        return self


class SimulationScenario(BaseModel):
    """Replicated lab-by-dose experiment: additive lab shifts on a saturating
    dose trend, optionally with one laboratory whose trend is steeper"""

    labs: int = Field(7, ge=2)
    doses: int = Field(6, ge=1)
    n_per_cell: int = Field(6, ge=1)
    dose_values: Optional[List[float]] = None
    baseline: float = 5.0
    lab_shifts: Optional[List[float]] = None
    emax: float = 2.0
    ec50: float = Field(0.0625, gt=0.0)
    sigma: float = Field(1.0, gt=0.0)
    interaction_lab: Optional[int] = None
    interaction_magnitude: float = Field(0.0, ge=0.0)
    variance_pattern: Literal["homoscedastic", "dose-increasing", "custom"] = "homoscedastic"
    variance_multipliers: Optional[List[List[float]]] = None
    replicates: int = Field(100, ge=1)
    seed: int = Field(20210, ge=0)

    @field_validator("dose_values")
    @classmethod
    def _ascending(cls, values: Optional[List[float]]) -> Optional[List[float]]:
        if values is not None and any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("dose values must be strictly ascending")
        return values

    @model_validator(mode="after")
    def _check_shapes(self) -> "SimulationScenario":
        if self.dose_values is not None and len(self.dose_values) != self.doses + 1:
            raise ValueError(f"{len(self.dose_values)} dose values for {self.doses} doses plus control")
        if self.lab_shifts is not None and len(self.lab_shifts) != self.labs:
            raise ValueError(f"{len(self.lab_shifts)} lab shifts for {self.labs} labs")
        if self.interaction_lab is not None and not 1 <= self.interaction_lab <= self.labs:
            raise ValueError(f"interaction_lab must be between 1 and {self.labs}")
        if self.variance_pattern == "custom":
            grid = self.variance_multipliers
            if grid is None or len(grid) != self.labs or any(len(row) != self.doses + 1 for row in grid):
                raise ValueError(f"custom variance needs a {self.labs} x {self.doses + 1} multiplier grid")
            if any(v <= 0 for row in grid for v in row):
                raise ValueError("variance multipliers must be positive")
        return self


class DesignSummary(BaseModel):
    labs: List[str]
    doses: List[str]
    n_obs: int
    n_cells: int
    transform: str
    source: Optional[str] = None


class ContrastOut(BaseModel):
    label: str
    lab: Optional[str] = None
    estimate: float
    se: float
    t: float
    p_raw: float
    p_adj: float
    # None marks an open (infinite) side
    ci: List[Optional[float]]
    equivalence_ci: Optional[List[float]] = None
    equivalent: bool
    borderline: bool = False


class CellOut(BaseModel):
    lab: str
    dose: str
    n: int
    mean: float
    sd: Optional[float] = None


class AnalysisReport(BaseModel):
    design: DesignSummary
    contrast_kind: str
    dose_contrast: str
    estimator: str
    alternative: str
    alpha: float
    df: int
    critical_value: float
    equivalence_critical_value: Optional[float] = None
    mvt_error: float
    seed: int
    policy: Dict[str, Any]
    contrasts: List[ContrastOut]
    per_lab: List[LabVerdict]
    global_verdict: str
    equivalent_labs: List[str] = []
    f_test: Optional[FTestResult] = None
    cells: List[CellOut] = []
    quality: Dict[str, Any] = {}


class SimulationRow(BaseModel):
    magnitude: float
    replicates: int
    rejection_rate: float
    rejection_se: float
    global_equivalence_rate: float
    global_equivalence_se: float


class SimulationSettings(BaseModel):
    dose_contrast: DoseContrastName = "williams"
    vcov: CovarianceKind = CovarianceKind.HC3
    alternative: Alternative = Alternative.TWO_SIDED
    alpha: float = Field(0.05, gt=0.0, le=0.25)
    policy: EquivalencePolicy = Field(default_factory=EquivalencePolicy)
    qmc: QmcConfig = Field(default_factory=QmcConfig)
    magnitudes: List[float] = Field(default_factory=lambda: [0.0])
    workers: int = Field(1, ge=1)

    @field_validator("magnitudes")
    @classmethod
    def _nonnegative(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("at least one interaction magnitude is required")
        if any(v < 0 for v in values):
            raise ValueError("interaction magnitudes must be nonnegative")
        return values
