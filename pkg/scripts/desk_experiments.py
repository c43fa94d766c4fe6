"""Desk-scale ablation suite: every arm on every contrast role, shared seeds.

    python3 scripts/desk_experiments.py [--out results/] [--cache-dir .cache/acceptance]

Prints the comparison table and the mean-image baseline; results are cached
so re-running after an unrelated edit is instant.
"""

import argparse
import logging
import time
from pathlib import Path

from mcsynth.experiments import desk_config, results_table, run_suite

# the arms the acceptance suite checks, by role
PLAN = [
    ("c3", ["full", "no_multiscale", "no_fm_fa", "single_contrast"]),
    ("c2", ["full", "no_fm_fa"]),
    ("c1", ["full", "no_fm_fa"]),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--cache-dir", type=Path, default=Path(".cache/acceptance"))
    ap.add_argument("--with-no-adv", action="store_true", help="also run the pure-L1 arm")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = desk_config()
    t0 = time.time()
    results = []
    for role, arms in PLAN:
        if args.with_no_adv and role == "c3":
            arms = arms + ["no_adv"]
        results += run_suite(arms, [role], cfg, cache_dir=args.cache_dir)
    csv, text = results_table(results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(csv)
    (args.out / "ablation.txt").write_text(text)
    print(text)
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
