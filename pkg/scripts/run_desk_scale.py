#!/usr/bin/env python3
"""Run every desk-scale config in scripts/configs and print a one-line summary each.

Example 2 is swept over d = 2, 4, 6. Outputs (CSV, manifest, SVG) land under
--out, one subdirectory per run.

    python scripts/run_desk_scale.py --out out/desk
    python scripts/run_desk_scale.py --only poc_example1 dt_example1
"""
import argparse
import sys
import time
from pathlib import Path

from chaoskit.cli import parse_document, write_outputs
from chaoskit.harness import MomentAudit, run_study, with_overrides

CONFIGS = Path(__file__).resolve().parent / "configs"
SWEEPS = {"poc_example2": [{"d": d} for d in (2, 4, 6)]}


def summary(results) -> str:
    if isinstance(results, MomentAudit):
        return f"all_finite={results.all_finite} max_moment={results.max_moment:.4g}"
    return "  ".join(f"p={r.p:g} slope={r.slope} r2={r.r_squared}" for r in results)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/desk")
    ap.add_argument("--only", nargs="*", help="config names without .yaml")
    args = ap.parse_args(argv)

    names = args.only or sorted(p.stem for p in CONFIGS.glob("*.yaml"))
    for name in names:
        base, output = parse_document((CONFIGS / f"{name}.yaml").read_text())
        for changes in SWEEPS.get(name, [{}]):
            cfg = with_overrides(base, **changes)
            start = time.perf_counter()
            results = run_study(cfg)
            secs = time.perf_counter() - start
            dest = Path(args.out) / f"{name}_d{cfg.d}"
            write_outputs(cfg, results, dest, fmt="both", chart=output.chart, duration=secs)
            print(f"{name} d={cfg.d} [{secs:.0f}s] {summary(results)}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
