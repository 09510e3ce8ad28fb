#!/usr/bin/env python3
"""
Operating characteristics of the interaction max-t test - familywise error
under additivity, power and global equivalence rate as the interaction of
one laboratory grows, for each covariance estimator and variance pattern
"""

import os
import sys
import json
import logging
import argparse
from pathlib import Path

# Add the parent directory to the path so we can import from app
sys.path.append(str(Path(__file__).parent.parent))

from app.models import CovarianceKind
from app.mvt import QmcConfig
from app.schemas import SimulationScenario, SimulationSettings
from app.simulation import format_table, run_simulation

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

ESTIMATORS = [CovarianceKind.CLASSICAL, CovarianceKind.HC3]
VARIANCE_PATTERNS = ["homoscedastic", "dose-increasing"]


def main():
    parser = argparse.ArgumentParser(description="Simulation grid for the interaction max-t test")
    parser.add_argument("--replicates", type=int, default=200)
    parser.add_argument("--magnitudes", default="0,0.5,1,1.5,2,3")
    parser.add_argument("--n", type=int, default=6, help="observations per cell")
    parser.add_argument("--seed", type=int, default=20210)
    parser.add_argument("--workers", type=int, default=int(os.getenv("TRENDSIM_WORKERS", "1")))
    parser.add_argument("--out", default=str(Path(__file__).parent.parent / "data" / "operating_characteristics.json"))
    args = parser.parse_args()

    magnitudes = [float(m) for m in args.magnitudes.split(",") if m.strip()]
    qmc = QmcConfig(sample_budget=20_000, randomizations=8, seed=args.seed, target_abs_error=5e-4)

    results = []
    logger.info(f"🚀 Running {len(ESTIMATORS) * len(VARIANCE_PATTERNS)} scenarios x {len(magnitudes)} magnitudes")
    for pattern in VARIANCE_PATTERNS:
        scenario = SimulationScenario(
            n_per_cell=args.n,
            variance_pattern=pattern,
            replicates=args.replicates,
            seed=args.seed,
        )
        for estimator in ESTIMATORS:
            settings = SimulationSettings(vcov=estimator, qmc=qmc, magnitudes=magnitudes, workers=args.workers)
            rows = run_simulation(scenario, settings)
            logger.info(f"📊 {pattern}, {estimator.value}:\n{format_table(rows)}")
            results.append({
                "variance_pattern": pattern,
                "estimator": estimator.value,
                "rows": [r.model_dump() for r in rows],
            })

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"replicates": args.replicates, "n_per_cell": args.n, "results": results}, f, indent=2)
        f.write("\n")
    logger.info(f"✅ Results written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
