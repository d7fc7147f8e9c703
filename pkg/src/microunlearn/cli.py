"""Command-line entry point.

Verbs: ``run`` (configured variant over all seeds), ``ablate`` (all five
variants), ``baseline`` (gradient-ascent comparison), ``emit-plots`` (tidy
CSV series from a finished run directory). Exit codes: 0 success, 2 config
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigParseError, load_config
from .engine import ALL_VARIANTS, Variant
from .experiment import (
    MissingArtifacts,
    emit_plot_data,
    run_experiment,
    write_artifacts,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microunlearn",
        description="Selective-unlearning experiments on a tiny language model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", required=True, help="output directory for artifacts")
        p.add_argument("--seed", type=int, default=None, help="override: single seed")

    p_run = sub.add_parser("run", help="run the configured variant over all seeds")
    common(p_run)
    p_run.add_argument(
        "--variant",
        default=None,
        choices=[v.value for v in Variant],
        help="override the configured variant",
    )

    p_ablate = sub.add_parser("ablate", help="run all ablation variants")
    common(p_ablate)

    p_base = sub.add_parser("baseline", help="run the gradient-ascent baseline")
    common(p_base)

    p_plots = sub.add_parser("emit-plots", help="write tidy plot CSVs from a run dir")
    p_plots.add_argument("--out", required=True, help="directory of a finished run")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "emit-plots":
            paths = emit_plot_data(args.out)
            for p in paths:
                print(p)
            return 0

        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seeds=(args.seed,))
        with open(args.config, "rb") as fh:
            config_bytes = fh.read()

        if args.command == "run":
            variant = Variant(args.variant) if args.variant else cfg.unlearn.variant
            results = run_experiment(cfg, variants=[variant])
        elif args.command == "ablate":
            results = run_experiment(cfg, variants=list(ALL_VARIANTS))
        elif args.command == "baseline":
            results = run_experiment(cfg, variants=[], include_baseline=True)
        else:  # pragma: no cover - argparse enforces choices
            raise ValueError(f"unknown command {args.command!r}")

        write_artifacts(args.out, config_bytes, results)
        for r in results:
            row = r.report.deterministic_row()
            print(
                f"{r.name} seed={r.seed} fr={row['fr']:.3f} kpr={row['kpr']:.3f} "
                f"hmta={row['hmta']:.3f} mia_resist={row['mia_resist']:.3f}"
            )
        print(f"artifacts written to {args.out}")
        return 0
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifacts, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
