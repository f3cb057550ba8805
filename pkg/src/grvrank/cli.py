"""Command-line pipeline driver.

Subcommands mirror the pipeline stages; every run is reproducible from the
config file, the seed and the per-stage manifests. Failures exit non-zero
with a single `ErrorClass: message` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grvrank", description=__doc__)
    p.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
    p.add_argument("--outdir", help="override output directory")
    p.add_argument("--seed", type=int, help="override seed (also drives synthesis)")
    p.add_argument("--force", action="store_true", help="overwrite results from a different config")
    p.add_argument("--threads", type=int, help="cap numeric worker threads")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "label", "fit", "predict", "eval", "run-all", "grid-search"):
        sub.add_parser(name)
    rr = sub.add_parser("rerank")
    rr.add_argument("--gamma", type=float, help="override the aggregation weight")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    # import after the thread caps are in place
    from . import pipeline
    from .config import PipelineConfig, apply_overrides, load_config

    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        apply_overrides(
            cfg,
            outdir=args.outdir,
            seed=args.seed,
            gamma=getattr(args, "gamma", None),
        )
        stages = {
            "synth": pipeline.stage_synth,
            "label": pipeline.stage_label,
            "fit": pipeline.stage_fit,
            "predict": pipeline.stage_predict,
            "rerank": pipeline.stage_rerank,
            "eval": pipeline.stage_eval,
            "run-all": pipeline.run_all,
            "grid-search": pipeline.grid_search,
        }
        result = stages[args.command](cfg, force=args.force)
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    json.dump(result, sys.stdout, indent=1, sort_keys=True, default=str)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
