"""Command-line entry point: ``prophet-match <subcommand> FILE``.

Exit codes: 0 success, 1 invariant or acceptance failure, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from dataclasses import replace
from decimal import Decimal
from pathlib import Path
from typing import Any

import numpy as np

from . import experiments as ex
from .flow import flows_to_csv, lp3_instance, offline_value
from .matching import (
    ConsistencyError,
    run_bid_price,
    run_greedy,
    run_online_family,
    sample_realization,
    solve_relaxation,
)
from .prophet import InvalidUpperBound, prophet_report, report_passes, run_stp
from .scenario import EnumerationCapError, TreeError, sample_path, tree_from_dict

SEED_ENV = "PROPHET_MATCH_SEED"
OK, FAIL, INPUT_ERROR = 0, 1, 2


class InputError(Exception):
    pass


def _read_json(path: str) -> tuple[dict[str, Any], str]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{path}: no such file")
    text = p.read_text()
    try:
        doc = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}:1: expected a JSON object")
    return doc, text


def _plain(obj):
    if isinstance(obj, Decimal):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


def _node_line(text: str, node_id) -> int | None:
    pat = re.compile(r'"id"\s*:\s*' + re.escape(json.dumps(node_id)) + r"\s*[,}]")
    m = pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _seed(args, fallback: int = 0) -> int:
    raw = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    if raw is None:
        return fallback
    try:
        seed = int(raw)
    except ValueError:
        raise InputError(f"seed {raw!r} is not an integer") from None
    if not 0 <= seed < 2**64:
        raise InputError("seed must be an unsigned 64-bit integer")
    return seed


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, name: str, text: str) -> None:
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _load_tree(path: str):
    doc, text = _read_json(path)
    try:
        tree = tree_from_dict(doc)
    except TreeError as e:
        line = _node_line(text, e.node_id) if e.node_id is not None else None
        loc = f"{path}:{line}" if line else path
        raise TreeError(f"{loc}: {e}", e.node_id) from None
    overrides = None
    if "thresholds" in doc:
        by_str = {str(k): float(v) for k, v in doc["thresholds"].items()}
        overrides = {}
        for nid in tree.nodes:
            if str(nid) not in by_str:
                raise InputError(f"{path}: thresholds missing node {nid!r}")
            overrides[nid] = by_str[str(nid)]
    return tree, overrides


def _load_config(path: str, args) -> ex.ExperimentConfig:
    doc, _ = _read_json(path)
    try:
        cfg = ex.ExperimentConfig.from_dict(_plain(doc))
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None
    return replace(cfg, master_seed=_seed(args, cfg.master_seed))


def cmd_validate(args) -> int:
    doc, text = _read_json(args.file)
    if "nodes" in doc:
        try:
            tree, _ = _load_tree(args.file)
        except TreeError as e:
            print(f"invalid tree: {e}", file=sys.stderr)
            return FAIL
        print(f"ok: tree with {len(tree.nodes)} nodes, T={tree.horizon}, I={tree.num_types}, tbar={tree.tbar:.12g}")
        return OK
    try:
        cfg = ex.ExperimentConfig.from_dict(_plain(doc))
    except (TypeError, ValueError) as e:
        print(f"invalid config: {args.file}: {e}", file=sys.stderr)
        return FAIL
    print(f"ok: experiment config I={cfg.I} J={cfg.J} T={cfg.T} replicates={cfg.replicates} rows={1 + len(cfg.sweep)}")
    return OK


def _mc_report(tree, n_outer: int, n_inner: int, seed: int) -> dict[str, Any]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    tbar = tree.tbar
    rewards, masses = [], []
    for _ in range(n_outer):
        path = sample_path(tree, rng)
        trace = run_stp(tree, path, tbar, n_paths=n_inner, rng=rng)
        rewards.append(trace.reward)
        masses.append(sum(tree.nodes[n].reward_mass for n in path.node_ids))
    v, m = np.array(rewards), np.array(masses)
    se = float(v.std(ddof=1) / math.sqrt(n_outer)) if n_outer > 1 else 0.0
    bound = float(m.mean())
    return {
        "mode": "mc",
        "tbar": tbar,
        "reward_mass_bound": bound,
        "e_v_stp": float(v.mean()),
        "e_v_stp_stderr": se,
        "guarantee": 1.0 / (1.0 + tbar),
        "outer_paths": n_outer,
        "inner_paths": n_inner,
    }


def cmd_prophet_verify(args) -> int:
    tree, overrides = _load_tree(args.file)
    seed = _seed(args)
    tbar = args.tbar if args.tbar is not None else tree.tbar
    if args.mc:
        rep = _mc_report(tree, args.mc, args.inner_paths, seed)
        _emit(args, "report.json", _dumps(rep))
        ok = rep["e_v_stp"] + 3 * rep["e_v_stp_stderr"] >= rep["reward_mass_bound"] * rep["guarantee"]
        return OK if ok else FAIL
    try:
        rep = prophet_report(tree, tbar, thresholds=overrides)
    except EnumerationCapError as e:
        print(f"{e}; rerun with --mc N for a Monte Carlo estimate", file=sys.stderr)
        return INPUT_ERROR
    rep["passes"] = report_passes(rep)
    _emit(args, "report.json", _dumps(rep))
    if not rep["passes"]:
        print("invariant failure: see report", file=sys.stderr)
        return FAIL
    return OK


def cmd_matching_run(args) -> int:
    cfg = _load_config(args.file, args)
    market = ex.generate_market(cfg)
    inst = market.instance
    x_star, sol, duals = solve_relaxation(inst)
    ss = np.random.SeedSequence([cfg.master_seed, cfg.scenario, 3])
    real_ss, pol_ss = ss.spawn(2)
    real = sample_realization(inst, np.random.default_rng(real_ss))
    pol_seed = int(pol_ss.generate_state(1, np.uint64)[0])
    fam = run_online_family(inst, x_star, real, cfg.n_inner_paths, pol_seed)
    traces = {"ON": fam[0], "Greedy": run_greedy(inst, real), "BPH": run_bid_price(inst, real, duals)}
    for k, tr in enumerate(fam[1:], 1):
        traces[f"ON+{k}"] = tr
    summary = {
        "lp3_objective": sol.objective,
        "lp3_residual": sol.residuals,
        "offline_value": offline_value(real.demand, real.supply, inst.reward),
        "rewards": {k: tr.total_reward for k, tr in traces.items()},
        "matches": {k: len(tr.matches) for k, tr in traces.items()},
        "max_unit_mass": fam[0].max_unit_mass,
    }
    _emit(args, "summary.json", _dumps(summary))
    if args.out:
        out = Path(args.out)
        flows_to_csv(lp3_instance(inst.lam, inst.mu, inst.reward), sol, out / "flows.csv")
        for k, tr in traces.items():
            tr.to_csv(out / f"trace_{k.replace('+', 'plus')}.csv")
    bad = any(v > summary["offline_value"] + 1e-9 for v in summary["rewards"].values())
    return FAIL if bad or summary["max_unit_mass"] > 1 + 1e-9 else OK


def cmd_benchmark(args) -> int:
    cfg = _load_config(args.file, args)
    reports = ex.reproduce_tables(cfg, sweep=cfg.sweep, threads=args.threads)
    csv_text = ex.reports_to_csv(reports)
    txt = ex.reports_to_text(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(csv_text)
        (out / "report.txt").write_text(txt)
    sys.stdout.write(txt.split("\n\n")[0].splitlines()[2] + "\n" if reports else "")
    bad = any(r.offline_violations or r.max_unit_mass > 1 + 1e-9 for r in reports)
    return FAIL if bad else OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prophet-match")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", default=None, help=f"unsigned 64-bit seed (fallback: ${SEED_ENV})")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("file")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a tree or config file").set_defaults(fn=cmd_validate)
    pv = sub.add_parser("prophet-verify", parents=[common], help="exact STP verification on a tree")
    pv.add_argument("--tbar", type=float, default=None)
    pv.add_argument("--mc", type=int, default=0, metavar="N", help="Monte Carlo mode with N outer paths")
    pv.add_argument("--inner-paths", type=int, default=100)
    pv.set_defaults(fn=cmd_prophet_verify)
    sub.add_parser("matching-run", parents=[common], help="simulate one market realisation").set_defaults(fn=cmd_matching_run)
    sub.add_parser("benchmark", parents=[common], help="policy tables").set_defaults(fn=cmd_benchmark)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return INPUT_ERROR
    try:
        return args.fn(args)
    except InputError as e:
        print(str(e), file=sys.stderr)
        return INPUT_ERROR
    except (TreeError, InvalidUpperBound) as e:
        print(f"input error: {e}", file=sys.stderr)
        return INPUT_ERROR
    except ConsistencyError as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return FAIL


if __name__ == "__main__":
    sys.exit(main())
