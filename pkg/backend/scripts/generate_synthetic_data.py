#!/usr/bin/env python3
"""
Generate synthetic lab-by-dose CSV files - the built-in 7 x 7 x 6 dataset
plus variants with one interacting laboratory
"""

import sys
import logging
import argparse
from pathlib import Path

import numpy as np

# Add the parent directory to the path so we can import from app
sys.path.append(str(Path(__file__).parent.parent))

from app.data_service import write_csv
from app.schemas import SimulationScenario
from app.simulation import SYNTHETIC_DOSES, SYNTHETIC_SEED, simulate_dataset, synthetic_ames_dataset

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description="Write synthetic assay CSV files")
    parser.add_argument("--out-dir", default=str(Path(__file__).parent.parent / "data" / "synthetic"))
    parser.add_argument("--seed", type=int, default=SYNTHETIC_SEED)
    parser.add_argument("--magnitudes", default="1,2,3", help="interaction sizes in sigma units for the variants")
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    logger.info("🚀 Generating synthetic datasets...")
    base = synthetic_ames_dataset(args.seed)
    write_csv(base, str(out_dir / "synthetic_ames.csv"))
    logger.info(f"✅ synthetic_ames.csv: {base.n_obs} observations, {base.n_labs} labs x {base.n_doses} doses")

    failures = 0
    for magnitude in [float(m) for m in args.magnitudes.split(",") if m.strip()]:
        try:
            scenario = SimulationScenario(dose_values=SYNTHETIC_DOSES, interaction_magnitude=magnitude, seed=args.seed)
            d = simulate_dataset(scenario, np.random.default_rng(args.seed))
            name = f"synthetic_interaction_{magnitude:g}.csv"
            write_csv(d, str(out_dir / name))
            logger.info(f"✅ {name}: lab {scenario.labs} carries {magnitude:g} sigma of extra trend")
        except Exception as e:
            logger.error(f"❌ Variant with magnitude {magnitude:g} failed: {e}")
            failures += 1

    if failures:
        logger.error(f"❌ {failures} variant(s) failed")
        return 1
    logger.info(f"🎉 Datasets written to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
