"""
Data Service - long-format assay ingestion, response transforms and cell layout
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.errors import DataError, LayoutError, ParseError, SchemaError, TransformDomainError
from app.models import FactorLevels, TransformKind
from app.text_utils import format_level

logger = logging.getLogger(__name__)

# header is line 1, first data row is line 2
_FIRST_DATA_LINE = 2


class ColumnMapping(BaseModel):
    lab: str = "lab"
    dose: str = "conc"
    response: str = "response"
    group: Optional[str] = None
    group_values: List[str] = Field(default_factory=list)


class Dataset(BaseModel):
    """Long-format observations with the crossed lab-by-dose layout.

    ``frame`` has the columns lab, dose, dose_label, response and
    source_row (CSV line or generator row number). Cells are indexed
    lab-major: lab index * n_doses + dose index.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frame: pd.DataFrame
    lab_factor: FactorLevels
    dose_factor: FactorLevels
    transform_applied: TransformKind = TransformKind.NONE
    transform_name: Optional[str] = None
    source: Optional[str] = None

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def n_labs(self) -> int:
        return self.lab_factor.n_levels

    @property
    def n_doses(self) -> int:
        return self.dose_factor.n_levels

    @property
    def n_cells(self) -> int:
        return self.n_labs * self.n_doses

    @property
    def responses(self) -> np.ndarray:
        return self.frame["response"].to_numpy(dtype=float)

    @property
    def lab_index(self) -> np.ndarray:
        lookup = {lab: i for i, lab in enumerate(self.lab_factor.levels)}
        return self.frame["lab"].map(lookup).to_numpy(dtype=int)

    @property
    def dose_index(self) -> np.ndarray:
        lookup = {label: i for i, label in enumerate(self.dose_factor.levels)}
        return self.frame["dose_label"].map(lookup).to_numpy(dtype=int)

    @property
    def cell_index(self) -> np.ndarray:
        return self.lab_index * self.n_doses + self.dose_index

    @property
    def cell_labels(self) -> List[Tuple[str, str]]:
        return [(lab, dose) for lab in self.lab_factor.levels for dose in self.dose_factor.levels]

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.cell_index, minlength=self.n_cells)

    def with_responses(self, responses: np.ndarray, **updates) -> "Dataset":
        frame = self.frame.copy()
        frame["response"] = np.asarray(responses, dtype=float)
        return self.model_copy(update={"frame": frame, **updates})


def dataset_from_frame(frame: pd.DataFrame, source: Optional[str] = None) -> Dataset:
    """Build factors from a frame with lab, dose, response and source_row columns"""
    frame = frame.reset_index(drop=True).copy()
    frame["lab"] = frame["lab"].astype(str)
    frame["dose"] = frame["dose"].astype(float)
    frame["response"] = frame["response"].astype(float)
    frame["dose_label"] = [format_level(v) for v in frame["dose"]]

    labs = list(pd.unique(frame["lab"]))
    dose_values = sorted(set(frame["dose"].tolist()))
    dose_labels = [format_level(v) for v in dose_values]
    if len(set(dose_labels)) != len(dose_labels):
        raise DataError("distinct dose values render to the same label; check the dose column precision")

    counts = frame.groupby(["lab", "dose_label"]).size()
    missing = [
        f"(lab {lab}, dose {dose})"
        for lab in labs
        for dose in dose_labels
        if counts.get((lab, dose), 0) == 0
    ]
    if missing:
        shown = ", ".join(missing[:5]) + (f" and {len(missing) - 5} more" if len(missing) > 5 else "")
        raise LayoutError(f"empty cell(s) in the crossed lab-by-dose layout: {shown}")

    try:
        lab_factor = FactorLevels(
            name="lab",
            levels=labs,
            sizes=[int(frame["lab"].eq(lab).sum()) for lab in labs],
        )
        dose_factor = FactorLevels(
            name="dose",
            levels=dose_labels,
            sizes=[int(frame["dose_label"].eq(d).sum()) for d in dose_labels],
            control=dose_labels[0],
            values=dose_values,
        )
    except ValueError as e:
        raise LayoutError(f"invalid design: {e}") from e

    return Dataset(frame=frame, lab_factor=lab_factor, dose_factor=dose_factor, source=source)


def _parse_numeric(raw: pd.Series, column: str, lines: np.ndarray) -> np.ndarray:
    values = pd.to_numeric(raw.str.strip(), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        text = raw.iloc[i]
        reason = "non-finite value" if text.strip().lower().lstrip("+-") in ("nan", "inf", "infinity") else "cannot parse"
        raise ParseError(f"column '{column}': {reason} {text!r}", line=int(lines[i]))
    return values


def load_csv(path: str, schema: Optional[ColumnMapping] = None) -> Dataset:
    """Read a long-format CSV (one observation per row) into a Dataset.

    Dose levels are sorted ascending and the smallest one becomes the
    control. Laboratory levels keep their order of first appearance.
    """
    schema = schema or ColumnMapping()
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")

    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"could not read CSV {path}: {e}") from e

    required = [schema.lab, schema.dose, schema.response] + ([schema.group] if schema.group else [])
    missing = [col for col in required if col not in raw.columns]
    if missing:
        raise SchemaError(
            f"missing column(s) {', '.join(missing)} in {path}; available: {', '.join(map(str, raw.columns))}"
        )

    raw = raw.assign(source_row=np.arange(len(raw)) + _FIRST_DATA_LINE)
    if schema.group and schema.group_values:
        keep = raw[schema.group].str.strip().isin(schema.group_values)
        logger.info(f"Group filter {schema.group} in {schema.group_values}: kept {int(keep.sum())} of {len(raw)} rows")
        raw = raw[keep]
    if raw.empty:
        raise DataError(f"no observations in {path}")

    labs = raw[schema.lab].str.strip()
    empty_lab = np.flatnonzero(labs.eq("").to_numpy())
    if empty_lab.size:
        raise ParseError(f"column '{schema.lab}': empty laboratory label", line=int(raw["source_row"].iloc[empty_lab[0]]))

    lines = raw["source_row"].to_numpy()
    dose = _parse_numeric(raw[schema.dose], schema.dose, lines)
    response = _parse_numeric(raw[schema.response], schema.response, lines)

    frame = pd.DataFrame({
        "lab": labs.to_numpy(),
        "dose": dose,
        "response": response,
        "source_row": raw["source_row"].to_numpy(),
    })
    dataset = dataset_from_frame(frame, source=path)
    logger.info(
        f"Loaded {dataset.n_obs} observations from {path}: "
        f"{dataset.n_labs} labs x {dataset.n_doses} doses = {dataset.n_cells} cells"
    )
    return dataset


def write_csv(dataset: Dataset, path: str, schema: Optional[ColumnMapping] = None) -> None:
    schema = schema or ColumnMapping()
    out = pd.DataFrame({
        schema.lab: dataset.frame["lab"],
        schema.dose: dataset.frame["dose_label"],
        schema.response: dataset.frame["response"],
    })
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    out.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    logger.info(f"Wrote {len(out)} observations to {path}")


# Response transforms

TransformFunc = Callable[[np.ndarray], np.ndarray]
DomainCheck = Callable[[np.ndarray], np.ndarray]

_BUILTIN_TRANSFORMS: Dict[TransformKind, Tuple[TransformFunc, DomainCheck, str]] = {
    TransformKind.LOG: (np.log, lambda y: y > 0, "log requires positive responses"),
    TransformKind.SQRT: (np.sqrt, lambda y: y >= 0, "sqrt requires nonnegative responses"),
    TransformKind.FREEMAN_TUKEY: (
        lambda y: np.sqrt(y) + np.sqrt(y + 1.0),
        lambda y: y >= 0,
        "Freeman-Tukey requires nonnegative counts",
    ),
}

_CUSTOM_TRANSFORMS: Dict[str, Tuple[TransformFunc, Optional[DomainCheck]]] = {}


def register_transform(name: str, func: TransformFunc, domain: Optional[DomainCheck] = None) -> None:
    """Register a custom response transform (e.g. a count normalizing transform)"""
    _CUSTOM_TRANSFORMS[name] = (func, domain)
    logger.debug(f"Registered custom transform '{name}'")


def apply_transform(d: Dataset, t: TransformKind, name: Optional[str] = None) -> Dataset:
    if t == TransformKind.NONE:
        return d

    y = d.responses
    if t == TransformKind.CUSTOM:
        if name not in _CUSTOM_TRANSFORMS:
            raise DataError(f"unknown custom transform '{name}'; registered: {sorted(_CUSTOM_TRANSFORMS)}")
        func, domain = _CUSTOM_TRANSFORMS[name]
        message = f"transform '{name}' undefined for this response"
    else:
        func, domain, message = _BUILTIN_TRANSFORMS[t]

    if domain is not None:
        ok = np.asarray(domain(y), dtype=bool)
        if not ok.all():
            i = int(np.flatnonzero(~ok)[0])
            raise TransformDomainError(
                f"{message} (got {y[i]:g})", row=int(d.frame["source_row"].iloc[i])
            )

    with np.errstate(all="ignore"):
        transformed = np.asarray(func(y), dtype=float)
    if not np.all(np.isfinite(transformed)):
        i = int(np.flatnonzero(~np.isfinite(transformed))[0])
        raise TransformDomainError(
            f"transform produced a non-finite value from {y[i]:g}", row=int(d.frame["source_row"].iloc[i])
        )

    if d.transform_applied != TransformKind.NONE:
        logger.warning(f"Applying {t.value} on top of an earlier {d.transform_applied.value} transform")
    logger.info(f"Applied {name or t.value} transform to {d.n_obs} responses")
    return d.with_responses(transformed, transform_applied=t, transform_name=name or t.value)


def generate_dose_response(
    cell_means: np.ndarray,
    cell_sd: np.ndarray,
    n_per_cell: int,
    lab_labels: Sequence[str],
    dose_values: Sequence[float],
    rng: np.random.Generator,
    source: Optional[str] = None,
) -> Dataset:
    """Draw normal observations for every lab-by-dose cell (arrays shaped labs x doses)"""
    cell_means = np.asarray(cell_means, dtype=float)
    cell_sd = np.broadcast_to(np.asarray(cell_sd, dtype=float), cell_means.shape)
    n_labs, n_doses = cell_means.shape

    lab_idx = np.repeat(np.arange(n_labs), n_doses * n_per_cell)
    dose_idx = np.tile(np.repeat(np.arange(n_doses), n_per_cell), n_labs)
    noise = rng.standard_normal(lab_idx.size)
    response = cell_means[lab_idx, dose_idx] + cell_sd[lab_idx, dose_idx] * noise

    frame = pd.DataFrame({
        "lab": np.asarray(lab_labels, dtype=object)[lab_idx],
        "dose": np.asarray(dose_values, dtype=float)[dose_idx],
        "response": response,
        "source_row": np.arange(lab_idx.size) + 1,
    })
    return dataset_from_frame(frame, source=source)
