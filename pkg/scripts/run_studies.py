"""Run the configured studies and write log-log plot data for each.

    python scripts/run_studies.py [--out results] [--only timestep coupling]
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from weighted_ips.cli import emit_plotdata, parse_config, run_study

CONFIGS = Path(__file__).parent / "configs"
ORDER = ["conservative", "variance_vs_N", "variance_vs_eps", "timestep", "coupling", "bias_vs_eps"]


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="results")
    parser.add_argument("--only", nargs="*", choices=ORDER)
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args()

    status = 0
    for name in args.only or ORDER:
        overrides = {"out": str(Path(args.out) / name)}
        if args.threads:
            overrides["threads"] = str(args.threads)
        cfg = parse_config(CONFIGS / f"{name}.cfg", overrides)
        start = time.perf_counter()
        code = run_study(cfg)
        status = status or code
        out = Path(cfg.out)
        summary = json.loads((out / f"{cfg.study}_summary.json").read_text())
        print(f"{name}: exit {code} in {time.perf_counter() - start:.0f} s")
        for fit in summary.get("fits", []):
            if fit.get("slope") is not None:
                print(f"  {fit['statistic']} vs {fit['versus']}: slope {fit['slope']:.3f}, R2 {fit['r2']:.3f}")
        if cfg.study != "single-run" and code == 0:
            emit_plotdata(out / f"{cfg.study}.csv", cfg.study, out / "plot")
    return status


if __name__ == "__main__":
    sys.exit(main())
