"""Score a quality-graded synthetic suite and correlate every metric with the oracle.

    python3 scripts/quality_suite.py --env pointmass --seeds 3 --out runs/suite
"""

import argparse
import logging
import time
from pathlib import Path

from bwdq.report import SuiteConfig, graded_suite, run_suite


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--env", default="pointmass")
    p.add_argument("--levels", default="0,0.25,0.5,0.75,1")
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--out", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    levels = [float(x) for x in args.levels.split(",")]
    env, entries = graded_suite(args.env, levels, args.n, args.seeds)
    t0 = time.time()
    res = run_suite(entries, env, SuiteConfig(compute_oracle=not args.no_oracle))
    print(f"suite took {time.time() - t0:.0f}s")
    cols = ["mean_reward", "mean_q", "mean_advantage", "pd_random", "bwd", "oracle"]
    print("quality " + " ".join(f"{c:>14}" for c in cols))
    for a in res.averaged:
        print(f"{a['quality']:>7} " + " ".join(f"{a[c]:14.5g}" if a[c] is not None else f"{'-':>14}" for c in cols))
    for r in res.rows:
        print(r.dataset_id, "bwd", r.bwd.value if r.bwd else r.error)
    print("pearson ", res.pearson)
    print("spearman", res.spearman)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "suite.json").write_text(res.to_json() + "\n")
        (out / "suite.csv").write_text(res.to_csv())


if __name__ == "__main__":
    main()
