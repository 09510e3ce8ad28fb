# Load environment variables FIRST - before any app imports
from dotenv import load_dotenv
load_dotenv()

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.contrasts import (
    build_dose_contrast,
    grand_mean_matrix,
    kronecker_interaction,
    make_dose_factor,
    make_lab_factor,
    to_json_dict,
    to_text,
)
from app.data_service import ColumnMapping, write_csv
from app.errors import EXIT_DATA_ERROR, EXIT_OK, EXIT_UNEXPECTED, ContrastError, ReportError, TrendsimError
from app.inference import EquivalenceMode, EquivalencePolicy
from app.models import Alternative, CovarianceKind, TransformKind
from app.mvt import QmcConfig
from app.plotting import load_report, write_forest_plot
from app.report_service import render_text, run_analysis, write_json
from app.schemas import AnalysisConfig, SimulationScenario, SimulationSettings
from app.settings import env_int, load_defaults, resolve_mvt, resolve_seed
from app.simulation import SYNTHETIC_SEED, format_table, run_simulation, synthetic_ames_dataset

logger = logging.getLogger(__name__)

EPILOG = """exit codes:
  0  success
  1  unexpected internal error
  2  data error (missing file or column, unparsable value, empty cell, degenerate data, malformed report)
  3  numerical failure (non positive definite correlation, quantile search did not converge)

environment:
  TRENDSIM_SEED                seed used when --seed is absent
  TRENDSIM_MVT_SAMPLES         default for --mvt-samples
  TRENDSIM_MVT_RANDOMIZATIONS  default for --mvt-randomizations
  TRENDSIM_WORKERS             worker threads for the QMC shifts
  LOG_LEVEL                    logging level (default INFO)
"""


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level_name = os.getenv("LOG_LEVEL", "INFO").upper()
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, level_name, logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _add_mvt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mvt-samples", type=int, default=None, help="QMC points per randomization")
    p.add_argument("--mvt-randomizations", type=int, default=None, help="number of random lattice shifts")
    p.add_argument("--seed", type=int, default=None, help="QMC seed (falls back to TRENDSIM_SEED)")


def _add_test_flags(p: argparse.ArgumentParser, analysis: Dict[str, Any]) -> None:
    p.add_argument("--dose-contrast", choices=["williams", "highest", "dunnett"], default=analysis["dose_contrast"])
    p.add_argument("--vcov", choices=[k.value for k in CovarianceKind], default=analysis["vcov"])
    p.add_argument("--alternative", choices=[a.value for a in Alternative], default=analysis["alternative"])
    p.add_argument("--alpha", type=float, default=analysis["alpha"])
    p.add_argument("--policy", choices=[m.value for m in EquivalenceMode], default=analysis["policy"])
    p.add_argument("--p-threshold", type=float, default=analysis["p_threshold"])


def build_parser(defaults: Dict[str, Any]) -> argparse.ArgumentParser:
    analysis, columns = defaults["analysis"], defaults["columns"]

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="trendsim",
        description="Similarity of dose-response curves across laboratories by "
        "Williams-by-total-mean interaction contrasts and max-t simultaneous inference",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="run the interaction analysis on a CSV file",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="long-format CSV, one observation per row")
    source.add_argument("--synthetic", action="store_true", help="use the built-in synthetic 7 x 7 x 6 dataset")
    p.add_argument("--lab-col", default=columns["lab"])
    p.add_argument("--dose-col", default=columns["dose"])
    p.add_argument("--response-col", default=columns["response"])
    p.add_argument("--group-col", default=None, help="grouping column used to select rows")
    p.add_argument("--group-value", action="append", default=[], help="keep rows with this group value (repeatable)")
    p.add_argument("--transform", choices=[t.value for t in TransformKind if t != TransformKind.CUSTOM],
                   default=analysis["transform"])
    _add_test_flags(p, analysis)
    _add_mvt_flags(p)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-svg", default=None)
    p.add_argument("--interval", choices=["compatible", "equivalence"], default="compatible",
                   help="intervals drawn in --out-svg")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("contrasts", parents=[common], help="print contrast matrices for a design")
    p.add_argument("--labs", type=int, default=None, help="number of laboratories")
    p.add_argument("--doses", type=int, default=None, help="number of doses besides the control")
    p.add_argument("--lab-sizes", type=_int_list, default=None)
    p.add_argument("--dose-sizes", type=_int_list, default=None)
    p.add_argument("--dose-levels", type=_float_list, default=None, help="control first, ascending")
    p.add_argument("--dose-contrast", choices=["williams", "highest", "dunnett"], default=analysis["dose_contrast"])
    p.add_argument("--json", action="store_true", help="emit the JSON serialization")
    p.set_defaults(handler=cmd_contrasts)

    p = sub.add_parser("plot", parents=[common], help="draw an SVG forest plot from a JSON report")
    p.add_argument("--report", required=True, help="JSON report written by analyze --out-json")
    p.add_argument("--out-svg", required=True)
    p.add_argument("--interval", choices=["compatible", "equivalence"], default="compatible")
    p.add_argument("--title", default=None)
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser("simulate", parents=[common], help="operating characteristics by simulation",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--labs", type=int, default=7)
    p.add_argument("--doses", type=int, default=6)
    p.add_argument("--n", type=int, default=6, help="observations per cell")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--interaction-magnitudes", type=_float_list, default=[0.0],
                   help="comma-separated interaction sizes in sigma units")
    p.add_argument("--interaction-lab", type=int, default=None, help="lab carrying the interaction (default last)")
    p.add_argument("--variance-pattern", choices=["homoscedastic", "dose-increasing"], default="homoscedastic")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=None, help="worker processes (default TRENDSIM_WORKERS or 1)")
    p.add_argument("--out-json", default=None)
    _add_test_flags(p, analysis)
    _add_mvt_flags(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic dataset as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--data-seed", type=int, default=SYNTHETIC_SEED)
    p.set_defaults(handler=cmd_synth)

    return parser


def _qmc_config(args: argparse.Namespace, defaults: Dict[str, Any]) -> QmcConfig:
    mvt = resolve_mvt(defaults, args.mvt_samples, args.mvt_randomizations)
    return QmcConfig(
        sample_budget=mvt["samples"],
        randomizations=mvt["randomizations"],
        seed=resolve_seed(args.seed, defaults),
        target_abs_error=defaults["mvt"]["target_abs_error"],
        workers=mvt["workers"],
    )


def _policy(args: argparse.Namespace) -> EquivalencePolicy:
    return EquivalencePolicy(mode=EquivalenceMode(args.policy), p_threshold=args.p_threshold, alpha=args.alpha)


def analysis_config_from_args(args: argparse.Namespace, defaults: Dict[str, Any]) -> AnalysisConfig:
    formats = ["text"] + (["json"] if args.out_json else []) + (["svg"] if args.out_svg else [])
    return AnalysisConfig(
        input=args.input,
        synthetic=args.synthetic,
        columns=ColumnMapping(
            lab=args.lab_col,
            dose=args.dose_col,
            response=args.response_col,
            group=args.group_col,
            group_values=args.group_value,
        ),
        transform=TransformKind(args.transform),
        dose_contrast=args.dose_contrast,
        vcov=CovarianceKind(args.vcov),
        alternative=Alternative(args.alternative),
        alpha=args.alpha,
        policy=_policy(args),
        qmc=_qmc_config(args, defaults),
        formats=formats,
        out_json=args.out_json,
        out_svg=args.out_svg,
        interval=args.interval,
    )


def cmd_analyze(args: argparse.Namespace, defaults: Dict[str, Any]) -> int:
    cfg = analysis_config_from_args(args, defaults)
    report = run_analysis(cfg)

    if "json" in cfg.formats:
        write_json(report, cfg.out_json)
    if "svg" in cfg.formats:
        write_forest_plot(json.loads(report.model_dump_json()), cfg.out_svg, cfg.interval)
    sys.stdout.write(render_text(report))
    return EXIT_OK


def cmd_contrasts(args: argparse.Namespace, defaults: Dict[str, Any]) -> int:
    if args.labs is None and args.doses is None:
        raise ContrastError("give --labs, --doses or both")

    blocks: Dict[str, Any] = {}
    c_lab = c_dose = None
    if args.labs is not None:
        c_lab = grand_mean_matrix(make_lab_factor(args.labs, args.lab_sizes))
        blocks["lab"] = c_lab
    if args.doses is not None:
        dose = make_dose_factor(args.doses, args.dose_sizes, args.dose_levels)
        c_dose = build_dose_contrast(dose, args.dose_contrast)
        blocks["dose"] = c_dose
    if c_lab is not None and c_dose is not None:
        blocks["interaction"] = kronecker_interaction(c_lab, c_dose)

    if args.json:
        payload = {name: to_json_dict(c) for name, c in blocks.items()}
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
        return EXIT_OK

    titles = {
        "lab": "Total-mean contrasts for the laboratories",
        "dose": f"{c_dose.kind.value if c_dose is not None else ''} contrasts for the doses",
        "interaction": "Interaction contrasts (dose contrast by total mean)",
    }
    parts = [to_text(c, f"{titles[name]} ({c.q} x {c.m})") for name, c in blocks.items()]
    if "interaction" in blocks:
        labels = blocks["interaction"].row_labels
        parts[-1] = f"{titles['interaction']} ({len(labels)} rows)\n" + "\n".join(
            f"{i:>3}  {label}" for i, label in enumerate(labels, start=1)
        )
    sys.stdout.write("\n\n".join(parts) + "\n")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace, defaults: Dict[str, Any]) -> int:
    report = load_report(args.report)
    write_forest_plot(report, args.out_svg, args.interval, args.title)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, defaults: Dict[str, Any]) -> int:
    scenario = SimulationScenario(
        labs=args.labs,
        doses=args.doses,
        n_per_cell=args.n,
        sigma=args.sigma,
        interaction_lab=args.interaction_lab,
        variance_pattern=args.variance_pattern,
        replicates=args.replicates,
        seed=resolve_seed(args.seed, defaults),
    )
    workers = args.workers if args.workers is not None else env_int("TRENDSIM_WORKERS", 1)
    settings = SimulationSettings(
        dose_contrast=args.dose_contrast,
        vcov=CovarianceKind(args.vcov),
        alternative=Alternative(args.alternative),
        alpha=args.alpha,
        policy=_policy(args),
        qmc=_qmc_config(args, defaults).model_copy(update={"workers": 1}),
        magnitudes=args.interaction_magnitudes,
        workers=workers,
    )
    rows = run_simulation(scenario, settings)
    if args.out_json:
        payload = {
            "scenario": scenario.model_dump(),
            "settings": json.loads(settings.model_dump_json()),
            "rows": [r.model_dump() for r in rows],
        }
        try:
            with open(args.out_json, "w", encoding="utf-8", newline="\n") as f:
                json.dump(payload, f, indent=2)
                f.write("\n")
        except OSError as e:
            raise ReportError(f"cannot write simulation table {args.out_json}: {e}") from e
        logger.info(f"Wrote simulation table to {args.out_json}")
    sys.stdout.write(format_table(rows) + "\n")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, defaults: Dict[str, Any]) -> int:
    columns = defaults["columns"]
    d = synthetic_ames_dataset(args.data_seed)
    write_csv(d, args.out, ColumnMapping(lab=columns["lab"], dose=columns["dose"], response=columns["response"]))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    defaults = load_defaults()
    parser = build_parser(defaults)
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    try:
        return args.handler(args, defaults)
    except TrendsimError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"error: invalid configuration: {e.errors()[0].get('msg', e)}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
