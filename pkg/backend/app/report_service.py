"""
Report Service - runs the interaction analysis pipeline and renders its reports
"""

import logging
import math
import os
from typing import List, Optional

from app.cell_means import cell_summary, covariance, fit_cell_means, interaction_f_test
from app.contrasts import build_dose_contrast, grand_mean_matrix, kronecker_interaction
from app.data_service import Dataset, apply_transform, load_csv
from app.errors import ReportError
from app.inference import equivalence_report, max_t_test, simultaneous_ci
from app.quality_service import quality_service
from app.schemas import AnalysisConfig, AnalysisReport, CellOut, ContrastOut, DesignSummary
from app.simulation import synthetic_ames_dataset
from app.text_utils import aligned_table, format_number, format_p

logger = logging.getLogger(__name__)


def _bound(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


def load_dataset(cfg: AnalysisConfig) -> Dataset:
    if cfg.synthetic:
        return synthetic_ames_dataset()
    return load_csv(cfg.input, cfg.columns)


def run_analysis(cfg: AnalysisConfig, dataset: Optional[Dataset] = None) -> AnalysisReport:
    """load -> transform -> fit -> contrasts -> max-t -> equivalence -> F-test"""
    d = dataset if dataset is not None else load_dataset(cfg)
    d = apply_transform(d, cfg.transform, cfg.transform_name)
    quality = quality_service.screen(d)

    fit = fit_cell_means(d)
    cov = covariance(fit, cfg.vcov)
    logger.info(f"Covariance estimator: {cov.estimator.value}, df={cov.df}")

    c_lab = grand_mean_matrix(d.lab_factor)
    c_dose = build_dose_contrast(d.dose_factor, cfg.dose_contrast)
    c = kronecker_interaction(c_lab, c_dose)

    result = max_t_test(fit, c, cov, cfg.alternative, cfg.alpha, cfg.qmc)
    equivalence_intervals = simultaneous_ci(result, equivalence=True)
    first = result.records[0]
    equivalence_critical = (equivalence_intervals[0][2] - first.estimate) / first.se
    verdicts = equivalence_report(result, None, cfg.policy)
    f_test = interaction_f_test(d)

    contrasts = [
        ContrastOut(
            label=record.label,
            lab=verdict.lab,
            estimate=record.estimate,
            se=record.se,
            t=record.t,
            p_raw=record.p_raw,
            p_adj=record.p_adjusted,
            ci=[_bound(record.ci_lower), _bound(record.ci_upper)],
            equivalence_ci=[lower, upper],
            equivalent=verdict.equivalent,
            borderline=record.borderline,
        )
        for record, verdict, (_, lower, upper) in zip(result.records, verdicts.contrasts, equivalence_intervals)
    ]

    return AnalysisReport(
        design=DesignSummary(
            labs=list(d.lab_factor.levels),
            doses=list(d.dose_factor.levels),
            n_obs=d.n_obs,
            n_cells=d.n_cells,
            transform=d.transform_name or d.transform_applied.value,
            source=d.source,
        ),
        contrast_kind=f"{c_dose.kind.value} x {c_lab.kind.value}",
        dose_contrast=cfg.dose_contrast,
        estimator=cov.estimator.value,
        alternative=result.alternative.value,
        alpha=result.alpha,
        df=result.df,
        critical_value=result.critical_value,
        equivalence_critical_value=equivalence_critical,
        mvt_error=result.mvt_error,
        seed=cfg.qmc.seed,
        policy={"mode": cfg.policy.mode.value, "p_threshold": cfg.policy.p_threshold},
        contrasts=contrasts,
        per_lab=verdicts.per_lab,
        global_verdict=verdicts.global_label,
        equivalent_labs=verdicts.equivalent_labs,
        f_test=f_test,
        cells=[CellOut(**row) for row in cell_summary(fit)],
        quality=quality,
    )


def render_text(report: AnalysisReport) -> str:
    headers = ["#", "contrast", "estimate", "se", "t", "p_raw", "p_adj", "lower", "upper", "verdict"]
    body: List[List[str]] = []
    for i, c in enumerate(report.contrasts, start=1):
        lower = format_number(c.ci[0] if c.ci[0] is not None else float("-inf"))
        upper = format_number(c.ci[1] if c.ci[1] is not None else float("inf"))
        verdict = "equivalent" if c.equivalent else "not equivalent"
        body.append([
            str(i),
            c.label,
            format_number(c.estimate),
            format_number(c.se),
            format_number(c.t, 3),
            format_p(c.p_raw),
            format_p(c.p_adj),
            lower,
            upper,
            verdict + (" *" if c.borderline else ""),
        ])

    lines = [
        f"Design: {len(report.design.labs)} labs x {len(report.design.doses)} doses, "
        f"N={report.design.n_obs}, transform={report.design.transform}",
        f"Contrasts: {report.contrast_kind} interaction, {len(report.contrasts)} rows; "
        f"covariance {report.estimator}; df={report.df}",
        f"Alternative: {report.alternative}; alpha={report.alpha:g}; critical value {report.critical_value:.4f}",
        "",
        aligned_table(headers, body, right_align_from=2),
    ]
    if any(c.borderline for c in report.contrasts):
        lines.append("* adjusted p within the numerical tolerance of alpha")

    lab_rows = [
        [entry.lab, str(entry.n_contrasts), format_p(entry.min_p), "yes" if entry.all_equivalent else "no"]
        for entry in report.per_lab
    ]
    lines += [
        "",
        f"Equivalence ({report.policy['mode']}, p > {report.policy['p_threshold']:g}):",
        aligned_table(["lab", "contrasts", "min p", "all equivalent"], lab_rows),
        "",
        f"Global verdict: {report.global_verdict}",
    ]
    if report.f_test is not None:
        f = report.f_test
        lines.append(f"Interaction F-test: F({f.df1}, {f.df2}) = {f.F:.4f}, p = {f.p:.4f}")
    return "\n".join(lines) + "\n"


def write_json(report: AnalysisReport, path: str) -> None:
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(report.model_dump_json(indent=2))
            f.write("\n")
    except OSError as e:
        raise ReportError(f"cannot write report {path}: {e}") from e
    logger.info(f"Wrote JSON report with {len(report.contrasts)} contrasts to {path}")
