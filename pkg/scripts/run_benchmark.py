#!/usr/bin/env python3
"""Run the full desk-scale experiment: main method, ablations, baseline, plots.

Equivalent to:
    microunlearn ablate  --config scripts/desk_benchmark.json --out <dir>
    microunlearn baseline --config scripts/desk_benchmark.json --out <dir>/baseline
    microunlearn emit-plots --out <dir>
but shares one fitted original model per seed across everything.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from microunlearn.config import load_config
from microunlearn.engine import ALL_VARIANTS
from microunlearn.experiment import emit_plot_data, run_experiment, write_artifacts


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config",
        default=os.path.join(os.path.dirname(__file__), "desk_benchmark.json"),
    )
    parser.add_argument("--out", default="benchmark_results")
    args = parser.parse_args()

    cfg = load_config(args.config)
    with open(args.config, "rb") as fh:
        config_bytes = fh.read()

    results = run_experiment(
        cfg, variants=list(ALL_VARIANTS), include_baseline=True
    )
    write_artifacts(args.out, config_bytes, results)
    for r in results:
        row = r.report.deterministic_row()
        print(
            f"{r.name:13s} seed={r.seed:4d} fr={row['fr']:.3f} kpr={row['kpr']:.3f} "
            f"us={row['us']:.3f} hmta={row['hmta']:.3f} auc={row['mia_auc']:.3f} "
            f"resist={row['mia_resist']:.3f}"
        )
    for path in emit_plot_data(args.out):
        print(f"plot data: {path}")
    print(f"artifacts in {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
