import sys
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import pytest

# Add the parent directory to the path so we can import from app
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.data_service import Dataset, dataset_from_frame
from app.mvt import QmcConfig
from app.schemas import SimulationScenario
from app.simulation import simulate_dataset, synthetic_ames_dataset


def dataset_from_cells(cells: Dict[Tuple[str, float], Sequence[float]]) -> Dataset:
    """Dataset from {(lab, dose): responses}"""
    rows: List[dict] = []
    for (lab, dose), values in cells.items():
        for v in values:
            rows.append({"lab": lab, "dose": dose, "response": v, "source_row": len(rows) + 2})
    return dataset_from_frame(pd.DataFrame(rows))


@pytest.fixture
def cells_dataset():
    return dataset_from_cells


@pytest.fixture
def fast_qmc() -> QmcConfig:
    return QmcConfig(sample_budget=20_000, randomizations=8, seed=7, target_abs_error=5e-4)


@pytest.fixture
def small_scenario() -> SimulationScenario:
    return SimulationScenario(labs=3, doses=3, n_per_cell=4, seed=11, replicates=1)


@pytest.fixture
def small_dataset(small_scenario) -> Dataset:
    return simulate_dataset(small_scenario, np.random.default_rng(5))


@pytest.fixture(scope="session")
def synthetic() -> Dataset:
    return synthetic_ames_dataset()
