"""
SPFA Toolkit command line
Fit, rotate, score and simulate over CSV files

    python spfa_cli.py fit --input data.csv --q 2 --method both --rotation varimax
    python spfa_cli.py scores --input data.csv --q 2 --method spfa --family best_linear,harman
    python spfa_cli.py simulate --sl .8 --q 2 --n 1000 --reps 200 --seed 42
    python spfa_cli.py report --results results.csv --compare table2

Exit codes: 0 success, 1 usage or input error, 2 numerical failure or non-convergence.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import config
from errors import FactorAnalysisError, InputError, exit_code_for
from extraction import ExtractionMethod, FactorSolution, FitOptions, LoadingMatrix, fit
from matrix_kernel import MomentMode, sample_moment_matrix
from report import (
    compare_reference,
    emit_comparison,
    emit_figure_table,
    emit_report,
    frame_to_csv,
    read_report,
)
from rotation import (
    Criterion,
    RotationMode,
    RotationOptions,
    RotationSolution,
    identity_rotation,
    rotate,
)
from scores import PredictorFamily, predictor_weights, score_rows, validity_report
from simulation import SimulationConfig, load_simulation_config, run_grid

logger = logging.getLogger(__name__)

METHOD_TAGS = {"cfm": ExtractionMethod.MINRES, "spfa": ExtractionMethod.SPFA}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as InputError (exit code 1)"""

    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


# ==================== CSV I/O ====================


def read_data_csv(path: str) -> pd.DataFrame:
    """Numeric n x p data with a header row; errors name the offending row and column"""
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"cannot read {path}: {e}") from e
    if raw.shape[1] == 0 or raw.shape[0] == 0:
        raise InputError(f"{path} has no data rows")

    data = raw.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    bad = data.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise InputError(
            f"{path}: non-numeric value '{raw.iat[row, col]}' in row {row + 2}, "
            f"column '{raw.columns[col]}'"
        )
    return data.astype(float)


def read_loadings_csv(path: str) -> LoadingMatrix:
    """Loadings file: variable names in the first column, one column per factor"""
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, index_col=0)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read {path}: {e}") from e
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise InputError(f"{path} has no loadings")
    values = raw.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise InputError(
            f"{path}: non-numeric loading '{raw.iat[row, col]}' in row {row + 2}, "
            f"column '{raw.columns[col]}'"
        )
    return LoadingMatrix(
        values.to_numpy(dtype=float),
        rows=tuple(str(i) for i in values.index),
        cols=tuple(str(c) for c in values.columns),
    )


def write_loadings(loadings: LoadingMatrix, path: Path) -> None:
    frame = loadings.to_frame()
    frame.index.name = "variable"
    frame = frame.reset_index()
    path.write_text(frame_to_csv(frame), encoding="utf-8")
    logger.info(f"Wrote {path}")


def write_json(payload: Dict, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")


def _clean(value):
    """JSON-safe copy: NaN and inf become None"""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


# ==================== SHARED STEPS ====================


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.getenv("SPFA_SEED", str(config.SEED)))


def _fit_options(args) -> FitOptions:
    return FitOptions(
        tolerance=args.tolerance if args.tolerance is not None else config.TOLERANCE,
        gradient_tolerance=(
            args.gradient_tolerance
            if args.gradient_tolerance is not None
            else config.GRADIENT_TOLERANCE
        ),
        max_iter=args.max_iter if args.max_iter is not None else config.MAX_ITER,
    )


def _rotation_options(args) -> RotationOptions:
    return RotationOptions(
        starts=args.starts if args.starts is not None else config.ROTATION_STARTS,
        normalize=args.kaiser,
        seed=_resolve_seed(args),
    )


def _methods(tag: str) -> List[str]:
    return ["cfm", "spfa"] if tag == "both" else [tag]


def _rotate(args, loadings: LoadingMatrix) -> RotationSolution:
    if args.rotation == "none":
        return identity_rotation(loadings)
    target = None
    if args.rotation == Criterion.TARGET.value:
        if not args.target:
            raise InputError("--rotation target requires --target <loadings.csv>")
        target = read_loadings_csv(args.target).values
    return rotate(loadings, args.rotation, args.mode, target=target, opts=_rotation_options(args))


def _fit_models(args, data: pd.DataFrame):
    n, p = data.shape
    if n <= p:
        raise InputError(f"need more observations than variables (n={n}, p={p})")
    s = sample_moment_matrix(data, args.moment)
    fitted = {}
    for tag in _methods(args.method):
        solution = fit(s, args.q, METHOD_TAGS[tag], _fit_options(args))
        logger.info(
            f"{tag}: objective={solution.objective:.6g} iterations={solution.iterations} "
            f"converged={solution.converged}"
        )
        fitted[tag] = (solution, _rotate(args, solution.loadings))
    return s, fitted


def _output_dir(args) -> Path:
    out = Path(args.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {out}: {e}") from e
    return out


def _solution_payload(solution: FactorSolution, rotation: RotationSolution) -> Dict:
    payload = solution.to_dict()
    payload["rotation"] = rotation.to_dict()
    payload["settings"] = {
        key: value
        for key, value in config.to_dict().items()
        if key in ("TOLERANCE", "GRADIENT_TOLERANCE", "MAX_ITER", "HEYWOOD_BOUND")
    }
    return _clean(payload)


# ==================== SUBCOMMANDS ====================


def cmd_fit(args) -> int:
    """Extract, rotate and write loadings plus solution metadata"""
    data = read_data_csv(args.input)
    _, fitted = _fit_models(args, data)
    out = _output_dir(args)

    status = 0
    for tag, (solution, rotation) in fitted.items():
        write_loadings(solution.loadings, out / f"{tag}_loadings.csv")
        write_loadings(rotation.pattern, out / f"{tag}_rotated.csv")
        write_json(_solution_payload(solution, rotation), out / f"{tag}_solution.json")
        if not (solution.converged and rotation.converged):
            status = 2
    return status


def cmd_rotate(args) -> int:
    """Rotate a loadings CSV"""
    loadings = read_loadings_csv(args.loadings)
    rotation = _rotate(args, loadings)
    output = Path(args.output)
    write_loadings(rotation.pattern, output)
    write_json(_clean(rotation.to_dict()), output.with_suffix(".json"))
    return 0 if rotation.converged else 2


def cmd_scores(args) -> int:
    """Score rows and report predictor validity"""
    families = [PredictorFamily.parse(name) for name in args.family.split(",") if name.strip()]
    if not families:
        raise InputError("--family needs at least one predictor family")
    data = read_data_csv(args.input)
    s, fitted = _fit_models(args, data)
    out = _output_dir(args)

    status = 0
    for tag, (solution, rotation) in fitted.items():
        reports = {}
        for family in families:
            predictor = predictor_weights(solution, rotation, family, s)
            report = validity_report(predictor, solution, rotation, s)
            scores = score_rows(predictor, data.to_numpy())
            frame = pd.DataFrame(scores, columns=list(rotation.pattern.cols))
            (out / f"{tag}_{family.value}_scores.csv").write_text(
                frame_to_csv(frame), encoding="utf-8"
            )
            weights = predictor.to_frame(rows=list(data.columns), cols=list(rotation.pattern.cols))
            weights.index.name = "variable"
            (out / f"{tag}_{family.value}_weights.csv").write_text(
                frame_to_csv(weights.reset_index()), encoding="utf-8"
            )
            logger.info(
                f"{tag} {family.value}: determinacy "
                + " ".join(f"{d:.3f}" for d in report.determinacy)
            )
            reports[family.value] = {**report.to_dict(), "scale": predictor.scale.tolist()}
        write_json(_clean(reports), out / f"{tag}_validity.json")
        if not (solution.converged and rotation.converged):
            status = 2
    return status


def _simulation_settings(args) -> SimulationConfig:
    settings = load_simulation_config(args.config) if args.config else SimulationConfig()
    overrides = {
        "sl_list": args.sl,
        "q_list": args.q,
        "n_list": args.n,
        "methods": args.methods,
        "rotations": args.rotations,
        "delta_list": args.deltas,
        "replications": args.reps,
        "threads": args.threads,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(settings, key, value)
    if args.seed is None and not args.config:
        settings.seed = _resolve_seed(args)
    if args.full:
        settings.replications = config.FULL_REPLICATIONS
    settings.validate()
    return settings


def cmd_simulate(args) -> int:
    """Run the condition grid and write the results table"""
    settings = _simulation_settings(args)
    results = run_grid(
        settings.conditions(),
        replications=settings.replications,
        methods=settings.methods,
        rotations=settings.rotations,
        base_seed=settings.seed,
        threads=settings.threads,
        deltas=settings.delta_list,
        mode=args.mode,
        metrics_path=args.metrics_path,
    )
    emit_report(results, args.format, args.output)
    if args.figure1:
        emit_figure_table(results, args.figure1)
    return 0


def cmd_report(args) -> int:
    """Post-process a results CSV"""
    results = read_report(args.results)
    if args.figure1:
        emit_figure_table(results, args.figure1)
    if args.compare:
        comparison = compare_reference(results, rotation=args.rotation)
        emit_comparison(comparison, args.output)
        disagreements = int((~comparison["agrees"]).sum())
        logger.info(
            f"reference comparison: {len(comparison)} entries, "
            f"{disagreements} outside 2 standard errors"
        )
    return 0


# ==================== PARSER ====================


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _add_rotation_args(parser: argparse.ArgumentParser, allow_none: bool = True) -> None:
    choices = [c.value for c in Criterion] + (["none"] if allow_none else [])
    parser.add_argument("--rotation", choices=choices, default=Criterion.VARIMAX.value)
    parser.add_argument(
        "--mode", choices=[m.value for m in RotationMode], default=RotationMode.ORTHOGONAL.value
    )
    parser.add_argument("--target", help="target loadings CSV for --rotation target")
    parser.add_argument("--starts", type=int, help="random rotation starts")
    parser.add_argument("--kaiser", action="store_true", help="Kaiser row normalization")
    parser.add_argument("--seed", type=int, help="seed (falls back to SPFA_SEED)")


def _add_fit_args(parser: argparse.ArgumentParser, method_choices: Sequence[str]) -> None:
    parser.add_argument("--input", required=True, help="n x p data CSV with header row")
    parser.add_argument("--q", type=_positive_int, required=True, help="number of factors")
    parser.add_argument("--method", choices=method_choices, default="both")
    parser.add_argument(
        "--moment", choices=[m.value for m in MomentMode], default=config.MOMENT
    )
    parser.add_argument("--output-dir", default=".")
    parser.add_argument("--tolerance", type=float)
    parser.add_argument("--gradient-tolerance", type=float)
    parser.add_argument("--max-iter", type=_positive_int)
    _add_rotation_args(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="spfa_cli.py", description="Score Predictor Factor Analysis toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p_fit = sub.add_parser("fit", help="extract and rotate loadings")
    _add_fit_args(p_fit, ["cfm", "spfa", "both"])
    p_fit.set_defaults(handler=cmd_fit)

    p_rotate = sub.add_parser("rotate", help="rotate a loadings CSV")
    p_rotate.add_argument("--loadings", required=True)
    p_rotate.add_argument("--output", required=True)
    _add_rotation_args(p_rotate, allow_none=False)
    p_rotate.set_defaults(handler=cmd_rotate)

    p_scores = sub.add_parser("scores", help="factor score predictors and validity")
    _add_fit_args(p_scores, ["cfm", "spfa", "both"])
    p_scores.add_argument(
        "--family", default=PredictorFamily.BEST_LINEAR.value, help="comma-separated families"
    )
    p_scores.set_defaults(handler=cmd_scores)

    p_sim = sub.add_parser("simulate", help="Monte Carlo condition grid")
    p_sim.add_argument("--config", help="flat key = value simulation file")
    p_sim.add_argument("--sl", type=_float_list)
    p_sim.add_argument("--q", type=_int_list)
    p_sim.add_argument("--n", type=_int_list)
    p_sim.add_argument("--reps", type=_positive_int)
    p_sim.add_argument("--full", action="store_true", help="1000 replications per cell")
    p_sim.add_argument("--methods", type=_str_list)
    p_sim.add_argument("--rotations", type=_str_list)
    p_sim.add_argument("--deltas", type=_float_list)
    p_sim.add_argument(
        "--mode", choices=[m.value for m in RotationMode], default=RotationMode.ORTHOGONAL.value
    )
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--threads", type=_positive_int)
    p_sim.add_argument("--output", default="results.csv")
    p_sim.add_argument("--format", choices=["csv", "json"], default="csv")
    p_sim.add_argument("--figure1", help="also write the long-format congruence CSV")
    p_sim.add_argument("--metrics-path", help="prometheus text file for run metrics")
    p_sim.set_defaults(handler=cmd_simulate)

    p_report = sub.add_parser("report", help="post-process simulation results")
    p_report.add_argument("--results", required=True)
    p_report.add_argument("--compare", choices=["table2"])
    p_report.add_argument("--rotation", default=Criterion.VARIMAX.value)
    p_report.add_argument("--figure1")
    p_report.add_argument("--output", default="reference_comparison.csv")
    p_report.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except InputError as e:
        print(str(e), file=sys.stderr)
        return 1

    level = logging.DEBUG if args.verbose else getattr(logging, config.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format=config.LOG_FORMAT)

    try:
        return args.handler(args)
    except FactorAnalysisError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
