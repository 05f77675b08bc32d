"""Regenerate the policy tables (base row plus the 16 one-at-a-time variations).

    python scripts/run_tables.py --preset desk --scenarios 0 1 2 3 --out results/desk
"""
import argparse
import time

from prophet_match.experiments import STANDARD_SWEEP, ExperimentConfig, reproduce_tables, write_reports


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", choices=("desk", "full"), default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenarios", type=int, nargs="+", default=[0])
    ap.add_argument("--replicates", type=int, default=None)
    ap.add_argument("--base-only", action="store_true")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    kw = {"master_seed": args.seed}
    if args.replicates:
        kw["replicates"] = args.replicates
    cfg = ExperimentConfig.desk(**kw) if args.preset == "desk" else ExperimentConfig(**kw)
    t0 = time.perf_counter()
    reports = reproduce_tables(cfg, sweep=() if args.base_only else STANDARD_SWEEP, scenarios=args.scenarios, threads=args.threads)
    csv_path, txt_path = write_reports(reports, args.out)
    print(txt_path.read_text())
    print(f"wrote {csv_path} and {txt_path} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
