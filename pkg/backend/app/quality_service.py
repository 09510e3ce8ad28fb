"""
Quality Service - Data quality screening of lab-by-dose assay data
"""

import logging
from typing import Any, Dict

import numpy as np

from app.data_service import Dataset

logger = logging.getLogger(__name__)


class QualityService:
    def __init__(self):
        self.max_sd_ratio = 4.0
        self.max_z_score = 4.0
        self.max_reported_outliers = 10

    def screen(self, dataset: Dataset) -> Dict[str, Any]:
        """
        Screen a dataset before analysis.
        Never raises: problems are reported, the analysis decides what to do with them.
        """

        quality_report = {
            "passed": True,
            "issues": [],
            "warnings": [],
            "outliers": [],
            "metrics": {
                "n_obs": dataset.n_obs,
                "n_cells": dataset.n_cells,
                "min_cell_size": 0,
                "max_cell_size": 0,
                "singleton_cells": 0,
                "sd_ratio": None,
                "outlier_count": 0,
            },
        }

        sizes = dataset.cell_sizes
        idx = dataset.cell_index
        y = dataset.responses
        labels = dataset.cell_labels
        quality_report["metrics"]["min_cell_size"] = int(sizes.min())
        quality_report["metrics"]["max_cell_size"] = int(sizes.max())

        # 1. Cell sizes
        singletons = [labels[c] for c in np.flatnonzero(sizes < 2)]
        quality_report["metrics"]["singleton_cells"] = len(singletons)
        if singletons:
            quality_report["passed"] = False
            shown = ", ".join(f"(lab {lab}, dose {dose})" for lab, dose in singletons[:5])
            quality_report["issues"].append(f"{len(singletons)} singleton cell(s) block HC3: {shown}")
        if sizes.min() != sizes.max():
            quality_report["warnings"].append(f"Unbalanced design: cell sizes range {sizes.min()}-{sizes.max()}")

        # 2. Variance heterogeneity
        means = np.bincount(idx, weights=y, minlength=dataset.n_cells) / sizes
        residuals = y - means[idx]
        sq = np.bincount(idx, weights=residuals ** 2, minlength=dataset.n_cells)
        replicated = sizes > 1
        if replicated.any():
            sd = np.sqrt(sq[replicated] / (sizes[replicated] - 1))
            if sd.min() > 0:
                ratio = float(sd.max() / sd.min())
                quality_report["metrics"]["sd_ratio"] = round(ratio, 3)
                if ratio > self.max_sd_ratio:
                    quality_report["warnings"].append(
                        f"Cell SD ratio {ratio:.2f} exceeds {self.max_sd_ratio:g}; prefer a sandwich estimator"
                    )
            else:
                quality_report["warnings"].append("Some cells have zero within-cell variation")

        # 3. Outliers against the cell mean and pooled SD
        df = dataset.n_obs - dataset.n_cells
        if df > 0:
            pooled_sd = float(np.sqrt(sq.sum() / df))
            if pooled_sd > 0:
                z = residuals / pooled_sd
                flagged = np.flatnonzero(np.abs(z) > self.max_z_score)
                quality_report["metrics"]["outlier_count"] = int(flagged.size)
                for i in flagged[: self.max_reported_outliers]:
                    lab, dose = labels[idx[i]]
                    quality_report["outliers"].append({
                        "row": int(dataset.frame["source_row"].iloc[i]),
                        "lab": lab,
                        "dose": dose,
                        "response": float(y[i]),
                        "z_score": round(float(z[i]), 2),
                    })
                if flagged.size:
                    quality_report["warnings"].append(
                        f"{flagged.size} observation(s) beyond |z| > {self.max_z_score:g}"
                    )

        for warning in quality_report["warnings"]:
            logger.warning(f"Quality: {warning}")
        for issue in quality_report["issues"]:
            logger.warning(f"Quality issue: {issue}")
        return quality_report


# Global instance
quality_service = QualityService()
