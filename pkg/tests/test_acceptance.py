"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from prophet_match.experiments import ExperimentConfig, generate_market, run_benchmark, simulate_market
from prophet_match.flow import lp3_instance, solve_lp3, solve_offline_matching, verify_solution
from prophet_match.matching import MatchInstance, check_separation_bound, capping_bound_holds, solve_relaxation
from prophet_match.prophet import (
    check_optional_stopping,
    check_submartingale,
    mixing_bound_holds,
    reward_mass_bound,
    stp_values,
    thresholds_exact,
    tight_instance,
)
from prophet_match.scenario import random_tree, unit_mass_tree

from .conftest import record
from .oracles import brute_matching, exact_offline_expectation

TOL = 1e-9
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _tree_sweep():
    rng = np.random.default_rng(20240501)
    for _ in range(500):
        T = int(rng.integers(1, 6))
        I = int(rng.integers(1, 4))
        yield random_tree(rng, T, I, max_branches=3, zero_prob=0.1)


def test_criterion_1_threshold_guarantee_exact():
    t0 = time.perf_counter()
    ok = 0
    worst = math.inf
    for tree in _tree_sweep():
        tbar = tree.tbar
        h = thresholds_exact(tree, tbar)
        e_v = stp_values(tree, tbar, h)[tree.root]
        slack = e_v - reward_mass_bound(tree) / (1 + tbar)
        worst = min(worst, slack)
        ok += slack >= -TOL
    dt = time.perf_counter() - t0
    assert record(1, ok == 500 and dt <= 60, f"{ok}/500 trees satisfy E[V]>=E[sum rp]/(1+tbar)-1e-9, min slack {worst:.3g}, {dt:.1f}s (limit 60s)")


def test_criterion_2_half_guarantee_and_tight_instance():
    rng = np.random.default_rng(7)
    ok = 0
    worst = math.inf
    for _ in range(500):
        tree = unit_mass_tree(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        s1 = tree.children[tree.root][0]
        v1 = stp_values(tree, 1.0)[s1]
        R = reward_mass_bound(tree)
        worst = min(worst, v1 - 0.5 * R)
        ok += v1 >= 0.5 * R - TOL
    errs = []
    for eps in (0.5, 0.1, 0.01):
        t = tight_instance(eps)
        errs.append(abs(stp_values(t, 1.0)[t.root] / reward_mass_bound(t) - 1 / (2 - eps)))
    good = ok == 500 and max(errs) <= TOL
    assert record(2, good, f"{ok}/500 unit-mass trees with V(S1)>=R/2-1e-9 (min slack {worst:.3g}); tight-instance max error {max(errs):.2g} (tol 1e-9)")


def test_criterion_3_optional_stopping_and_submartingale():
    worst_gap = worst_sub = -math.inf
    for tree in _tree_sweep():
        tbar = tree.tbar
        h = thresholds_exact(tree, tbar)
        e_v, e_z = check_optional_stopping(tree, tbar, h)
        worst_gap = max(worst_gap, abs(e_v - e_z))
        worst_sub = max(worst_sub, check_submartingale(tree, tbar, h))
    good = worst_gap <= TOL and worst_sub <= TOL
    assert record(3, good, f"500 trees: max optional-stopping gap {worst_gap:.3g}, max submartingale violation {worst_sub:.3g} (tol 1e-9)")


def test_criterion_4_inequality_sweeps():
    rng = np.random.default_rng(4)
    n, k = 1_000_000, 4
    a = rng.exponential(1.0, n) * 10 ** rng.uniform(-3, 2, n)
    b = 1.0 + rng.exponential(1.0, n) * 10 ** rng.uniform(-3, 2, n)
    p = rng.exponential(1.0, (n, k)) * (rng.random((n, k)) < 0.8)
    r = rng.exponential(1.0, (n, k)) * 10 ** rng.uniform(-3, 2, (n, k))
    bad3 = int((~mixing_bound_holds(a, b, p, r, tol=1e-12)).sum())
    lam = 10 ** rng.uniform(-6, 3, n)
    x = lam * 10 ** rng.uniform(-4, 4, n)
    x[:1000] = 2 * lam[:1000]  # equality points
    bad4 = int((~capping_bound_holds(lam, x, tol=1e-12)).sum())
    assert record(4, bad3 == 0 and bad4 == 0, f"mixing bound: {bad3} violations / 1e6; capping bound: {bad4} violations / 1e6 (tol 1e-12)")


def _random_lp(rng, I, J, T):
    lam = rng.uniform(0.05, 1.0, (I, T))
    lam /= lam.sum(axis=0) * rng.uniform(1.0, 1.5, T)
    mu = rng.uniform(0.05, 1.0, (J, T))
    mu /= mu.sum(axis=0) * rng.uniform(1.0, 1.5, T)
    return lam, mu, rng.normal(0.5, 1.0, (I, J, T, T))


def test_criterion_5_lp_correctness():
    rng = np.random.default_rng(5)
    match_ok = 0
    for _ in range(200):
        T = int(rng.integers(1, 5))
        dem = [None if rng.random() < 0.2 else int(rng.integers(3)) for _ in range(T)]
        sup = [None if rng.random() < 0.2 else int(rng.integers(3)) for _ in range(T)]
        r = rng.normal(size=(3, 3, T, T))
        sol, _ = solve_offline_matching(dem, sup, r)
        match_ok += abs(sol.objective - brute_matching(dem, sup, r)) <= 1e-12
    gap_worst = 0.0
    for _ in range(200):
        lam, mu, r = _random_lp(rng, *rng.integers(1, 6, 3))
        inst = lp3_instance(lam, mu, r)
        gap_worst = max(gap_worst, verify_solution(inst, solve_lp3(inst)).duality_gap)
    offline_bound = 0
    for k in range(50):
        I, J, T = (1, 1, 3) if k % 2 else (2, 1, 2)
        lam, mu, r = _random_lp(rng, I, J, T)
        offline_bound += solve_lp3(lp3_instance(lam, mu, r)).objective >= exact_offline_expectation(lam, mu, r) - TOL
    good = match_ok == 200 and gap_worst <= 1e-7 and offline_bound == 50
    assert record(5, good, f"offline matching = brute force on {match_ok}/200; max LP3 duality gap {gap_worst:.2g} (tol 1e-7); LP3 >= E[OFF] on {offline_bound}/50")


def test_criterion_6_separation_bound():
    rng = np.random.default_rng(6)
    ok = total = 0
    worst = math.inf
    for _ in range(50):
        support = ()
        while len(support) < 10:
            I, J, T = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 6)
            lam, mu, r = _random_lp(rng, I, J, T)
            inst = MatchInstance(lam, mu, r)
            x, _, _ = solve_relaxation(inst)
            support = np.argwhere(x > 0)
        for e in support[rng.permutation(len(support))[:10]]:
            e = tuple(int(v) for v in e)
            mean, se = check_separation_bound(inst, x, e, 10_000, rng)
            slack = mean - (0.5 * x[e] - 3 * se)
            worst = min(worst, slack)
            ok += slack >= 0
            total += 1
    assert record(6, ok == total == 500, f"{ok}/{total} edges with E[p]>=x*/2-3se, min slack {worst:.3g}")


def test_criterion_7_quarter_guarantee():
    t0 = time.perf_counter()
    ok = 0
    worst = math.inf
    for k in range(20):
        cfg = ExperimentConfig.desk(master_seed=1000 + k)
        inst = generate_market(cfg).instance
        rewards, _, lp_obj, _ = simulate_market(inst, 200, cfg.n_inner_paths, (cfg.master_seed, 0), with_offline=False)
        on = rewards[:, 0]
        se = on.std(ddof=1) / math.sqrt(len(on))
        slack = on.mean() - (0.25 * lp_obj - 3 * se)
        worst = min(worst, on.mean() / lp_obj)
        ok += slack >= 0
    dt = time.perf_counter() - t0
    assert record(7, ok == 20 and dt <= 600, f"{ok}/20 desk markets with mean ON >= LP3/4 - 3se (lowest ON ratio {worst:.3f}), {dt:.0f}s (limit 600s)")


def test_criterion_8_table_bands():
    rep = run_benchmark(ExperimentConfig.desk(master_seed=0))
    on, p1, p2 = rep.ratio("ON"), rep.ratio("ON+1"), rep.ratio("ON+2")
    best_plus = max(rep.ratio(f"ON+{k}") for k in range(1, 5))
    checks = [
        0.45 <= on <= 0.55,
        0.60 <= p1 <= 0.72,
        0.60 <= p2 <= 0.72,
        on < p1,
        rep.ratio("Greedy") < best_plus,
    ]
    detail = f"ON {on:.3f} in [0.45,0.55]; ON+1 {p1:.3f}, ON+2 {p2:.3f} in [0.60,0.72]; ON<ON+1; Greedy {rep.ratio('Greedy'):.3f} < max ON+ {best_plus:.3f}"
    assert record(8, all(checks), detail)


def _cli(args, out_dir):
    proc = subprocess.run(
        [sys.executable, "-m", "prophet_match.cli", *map(str, args), "--out", str(out_dir)],
        capture_output=True,
        check=False,
    )
    files = {p.name: p.read_bytes() for p in sorted(Path(out_dir).glob("*"))} if Path(out_dir).exists() else {}
    return proc.returncode, proc.stdout, files


def test_criterion_9_cli_determinism(tmp_path):
    small = tmp_path / "small.json"
    small.write_text(json.dumps({"preset": "desk", "I": 4, "J": 4, "T": 10, "replicates": 30, "n_inner_paths": 10, "sweep": [["alpha", 0.2], ["omega", 0.02]]}))
    cases = {
        "validate": ["validate", CONFIGS / "chain.json"],
        "prophet-verify": ["prophet-verify", CONFIGS / "chain.json"],
        "prophet-verify-mc": ["prophet-verify", "--mc", "50", "--inner-paths", "5", CONFIGS / "chain.json"],
        "matching-run": ["matching-run", small],
        "benchmark": ["benchmark", small],
    }
    same = []
    for name, args in cases.items():
        runs = [
            _cli([*args, "--seed", "12345", "--threads", str(th)], tmp_path / f"{name}-{k}")
            for k, th in enumerate((1, 1, 3))
        ]
        same.append(runs[0] == runs[1] == runs[2] and runs[0][0] == 0)
    detail = ", ".join(f"{n}:{'identical' if s else 'DIFFERS'}" for n, s in zip(cases, same))
    assert record(9, all(same), f"two runs with seed 12345 and a --threads 3 run, byte-identical: {detail}")
