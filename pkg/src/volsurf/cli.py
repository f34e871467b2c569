"""Command-line entry point: ``volsurf <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiment as ex
from .checkpoint import load_checkpoint
from .estimators import ESTIMATORS
from .exceptions import ConfigError, DataError, TrainingDivergenceError
from .surface_data import ingest_quotes, read_quotes, save_series, synthetic_series

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("volsurf")


def _config(args) -> ex.ExperimentConfig:
    config = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    return ex.apply_overrides(config, args.set or [])


def cmd_generate_data(args) -> int:
    config = _config(args)
    series = synthetic_series(config.synthetic_config(), seed=config.seed)
    out = Path(args.out) if args.out else ex.resolve_output_dir(config, args.output_dir) / "series.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_series(out, series)
    print(f"wrote {len(series)} days to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    series = ingest_quotes(read_quotes(args.quotes))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_series(out, series)
    print(f"wrote {len(series)} days to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    kind = args.model or config.model
    if kind not in ex.MODEL_KINDS:
        raise ConfigError(f"model must be one of {ex.MODEL_KINDS}")
    out_dir = ex.resolve_output_dir(config, args.output_dir)
    data = ex.prepare_data(config)
    est = ex.train_and_save(config, kind, data, out_dir)
    print(f"{kind}: best epoch {est.best_epoch_}, checkpoint {out_dir / f'{kind}_checkpoint.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    out_dir = ex.resolve_output_dir(config, args.output_dir)
    est = load_checkpoint(args.checkpoint)
    kind = next(k for k, cls in ESTIMATORS.items() if type(est) is cls)
    data = ex.prepare_data(config)
    summary = {}
    for name, model in ((kind, est), (ex.BASELINE, None)):
        summary[name] = ex.summarize(ex.evaluate_estimator(config, name, model, data, out_dir))
    ex.write_summary_csv(out_dir / "summary.csv", summary)
    _print_summary(summary)
    return EXIT_OK


def cmd_plot(args) -> int:
    paths = {}
    for item in args.csv:
        label, _, path = item.rpartition("=")
        path = Path(path)
        paths[label or path.stem.removesuffix("_daily")] = path
    ex.plot_daily(paths, args.out, args.column)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    config = _config(args)
    result = ex.run_all(config, args.output_dir)
    _print_summary(result.summary)
    print(f"outputs in {result.output_dir}")
    return EXIT_OK


def _print_summary(summary) -> None:
    print(f"{'model':<14}{'vol MAPE %':>12}{'call MAPE %':>13}")
    for model, (vol, call) in summary.items():
        print(f"{model:<14}{vol:>12.4f}{call:>13.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volsurf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--output-dir", help="output directory (overrides $VOLSURF_OUTPUT_DIR)")
        return p

    p = with_config(sub.add_parser("generate-data", help="synthetic config -> series file"))
    p.add_argument("--out", help="series file (default: <output dir>/series.jsonl)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("ingest", help="quote CSV -> series file")
    p.add_argument("--quotes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = with_config(sub.add_parser("train", help="config -> checkpoint + training log"))
    p.add_argument("--model", choices=ex.MODEL_KINDS)
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="checkpoint + split -> daily CSV + summary"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="daily metric CSVs -> SVG line plot")
    p.add_argument("csv", nargs="+", metavar="[LABEL=]CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--column", default="vol_mape_pct", choices=("vol_mape_pct", "call_mape_pct"))
    p.set_defaults(func=cmd_plot)

    p = with_config(sub.add_parser("run-all", help="five models + persistence baseline"))
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
