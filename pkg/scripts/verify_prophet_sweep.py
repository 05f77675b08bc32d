"""Exact checks of the single-resource guarantees on random scenario trees."""
import argparse

import numpy as np

from prophet_match.prophet import prophet_report, report_passes
from prophet_match.scenario import random_tree


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trees", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    worst_ratio, failures = 1.0, 0
    for _ in range(args.trees):
        tree = random_tree(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        rep = prophet_report(tree)
        failures += not report_passes(rep)
        if rep["reward_mass_bound"] > 0:
            worst_ratio = min(worst_ratio, rep["e_v_stp"] * (1 + rep["tbar"]) / rep["reward_mass_bound"])
    print(f"{args.trees} trees, {failures} failures; min E[V](1+tbar)/R = {worst_ratio:.4f} (>= 1 required)")


if __name__ == "__main__":
    main()
