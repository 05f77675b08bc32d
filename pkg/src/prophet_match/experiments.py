"""Synthetic two-sided markets, policy benchmarks and table rendering."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .flow import offline_value
from .matching import (
    ON_PLUS_MULTIPLIERS,
    MatchInstance,
    run_bid_price,
    run_greedy,
    run_online_family,
    sample_realization,
    solve_relaxation,
)

POLICIES = ("ON", "Greedy", "BPH", "ON+1", "ON+2", "ON+3", "ON+4")

STANDARD_SWEEP: tuple[tuple[str, float], ...] = (
    ("alpha", 0.0), ("alpha", 0.2), ("alpha", 0.8), ("alpha", 1.0),
    ("tau_idle", 2.0), ("tau_idle", 5.0), ("tau_idle", 20.0), ("tau_idle", 30.0),
    ("beta", 0.0), ("beta", 0.2), ("beta", 0.8), ("beta", 1.0),
    ("omega", 0.005), ("omega", 0.02), ("omega", 0.08), ("omega", 0.15),
)  # fmt: skip

SWEEPABLE = ("alpha", "tau_idle", "beta", "omega")
SQUARE_DEG = 0.25

# stream tags for seed derivation
_MARKET, _REPLICATE = 1, 2


@dataclass(frozen=True)
class ExperimentConfig:
    I: int = 30
    J: int = 30
    T: int = 60
    alpha: float = 0.5
    tau_idle: float = 10.0
    beta: float = 0.5
    omega: float = 0.05
    replicates: int = 1000
    n_inner_paths: int = 100
    master_seed: int = 0
    scenario: int = 0
    sweep: tuple[tuple[str, float], ...] = ()
    coordinates_file: str | None = None

    def __post_init__(self):
        for name in ("I", "J", "T", "replicates", "n_inner_paths"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("tau_idle", "omega"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        sweep = tuple((str(k), float(v)) for k, v in self.sweep)
        for k, _ in sweep:
            if k not in SWEEPABLE:
                raise ValueError(f"cannot sweep over {k!r}")
        object.__setattr__(self, "sweep", sweep)

    @classmethod
    def desk(cls, **kw) -> "ExperimentConfig":
        base = dict(I=10, J=10, T=30, replicates=200, n_inner_paths=50)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kw = {k: v for k, v in doc.items() if k != "preset"}
        if "sweep" in kw:
            kw["sweep"] = STANDARD_SWEEP if kw["sweep"] == "standard" else tuple(map(tuple, kw["sweep"]))
        preset = doc.get("preset", "full")
        if preset == "desk":
            return cls.desk(**kw)
        if preset != "full":
            raise ValueError(f"unknown preset {preset!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["sweep"] = [list(p) for p in self.sweep]
        return d


@dataclass(frozen=True)
class GeneratedScenario:
    instance: MatchInstance
    demand_xy: np.ndarray
    supply_xy: np.ndarray
    lam_t: np.ndarray
    mu_t: np.ndarray
    quality: np.ndarray


@dataclass
class PolicyStats:
    mean: float
    halfwidth: float | None
    ratio: float
    ratio_halfwidth: float | None


@dataclass
class SimReport:
    label: str
    lp_objective: float
    offline_mean: float
    policies: dict[str, PolicyStats]
    replicates: int
    lp_zero: bool = False
    max_unit_mass: float = 0.0
    offline_violations: int = 0
    table: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def ratio(self, name: str) -> float:
        return self.policies[name].ratio


def f_decay(gap, alpha: float, tau_idle: float):
    """Idle-time factor 1 - alpha + alpha * exp(-gap / tau)."""
    return 1.0 - alpha + alpha * np.exp(-np.asarray(gap, dtype=float) / tau_idle)


def g_distance(d, beta: float, omega: float):
    return 1.0 - beta + beta * np.exp(-np.asarray(d, dtype=float) / omega)


def _seed(*words: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(w) for w in words])


def _coordinates(cfg: ExperimentConfig, rng: np.random.Generator):
    dxy = rng.random((cfg.I, 2)) * SQUARE_DEG
    sxy = rng.random((cfg.J, 2)) * SQUARE_DEG
    if cfg.coordinates_file:
        doc = json.loads(Path(cfg.coordinates_file).read_text())
        dxy = np.asarray(doc["demand"], dtype=float)
        sxy = np.asarray(doc["supply"], dtype=float)
        if dxy.shape != (cfg.I, 2) or sxy.shape != (cfg.J, 2):
            raise ValueError("coordinates file does not match I and J")
    return dxy, sxy


def generate_market(cfg: ExperimentConfig, rng: np.random.Generator | None = None) -> GeneratedScenario:
    """Draw a market. The random draws (quality, geography, rates) do not
    depend on alpha, tau, beta or omega, so a sweep varies one mechanism on
    otherwise identical markets."""
    if rng is None:
        rng = np.random.default_rng(_seed(cfg.master_seed, _MARKET, cfg.scenario))
    I, J, T = cfg.I, cfg.J, cfg.T
    quality = rng.standard_normal((I, J))
    dxy, sxy = _coordinates(cfg, rng)
    lam_t = rng.random(T)
    mu_t = rng.random(T)
    # rates must be strictly positive
    lam_t = np.maximum(lam_t, np.finfo(float).tiny)
    mu_t = np.maximum(mu_t, np.finfo(float).tiny)
    dist = np.abs(dxy[:, None, :] - sxy[None, :, :]).sum(axis=-1)
    g = g_distance(dist, cfg.beta, cfg.omega)
    t = np.arange(T)
    gap = t[:, None] - t[None, :]
    f = np.where(gap >= 0, f_decay(np.maximum(gap, 0), cfg.alpha, cfg.tau_idle), 0.0)
    reward = (quality * g)[:, :, None, None] * f[None, None, :, :]
    inst = MatchInstance(
        lam=np.tile(lam_t / I, (I, 1)),
        mu=np.tile(mu_t / J, (J, 1)),
        reward=reward,
    )
    return GeneratedScenario(inst, dxy, sxy, lam_t, mu_t, quality)


def confidence_interval(samples: Sequence[float]) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(x.size))


def _replicate(args) -> tuple[list[float], float, float]:
    inst, x_star, duals, n_paths, seed, with_offline = args
    ss = np.random.SeedSequence(seed)
    real_ss, pol_ss = ss.spawn(2)
    real = sample_realization(inst, np.random.default_rng(real_ss))
    pol_seed = int(pol_ss.generate_state(1, np.uint64)[0])
    fam = run_online_family(inst, x_star, real, n_paths, pol_seed)
    row = [
        fam[0].total_reward,
        run_greedy(inst, real).total_reward,
        run_bid_price(inst, real, duals).total_reward,
    ] + [tr.total_reward for tr in fam[1:]]
    off = offline_value(real.demand, real.supply, inst.reward) if with_offline else math.nan
    return row, off, fam[0].max_unit_mass


def simulate_market(
    inst: MatchInstance,
    n_replicates: int,
    n_paths: int,
    seed_words: Sequence[int],
    threads: int = 1,
    with_offline: bool = True,
    relaxation=None,
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Per-replicate rewards ``[n, 7]`` (POLICIES order), offline values,
    LP objective and the largest routed mass seen on any supply unit."""
    x_star, sol, duals = relaxation if relaxation is not None else solve_relaxation(inst)
    jobs = [
        (inst, x_star, duals, n_paths, list(seed_words) + [_REPLICATE, k], with_offline)
        for k in range(n_replicates)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(_replicate, jobs))
    else:
        out = [_replicate(j) for j in jobs]
    rewards = np.array([o[0] for o in out])
    offline = np.array([o[1] for o in out])
    mass = max((o[2] for o in out), default=0.0)
    return rewards, offline, sol.objective, mass


def _label(cfg: ExperimentConfig, base: ExperimentConfig) -> str:
    for name in SWEEPABLE:
        if getattr(cfg, name) != getattr(base, name):
            return f"{name}={getattr(cfg, name):g}"
    return "Base"


def run_benchmark(
    cfg: ExperimentConfig, threads: int = 1, label: str = "Base", with_offline: bool = True
) -> SimReport:
    market = generate_market(cfg)
    rewards, offline, lp_obj, mass = simulate_market(
        market.instance,
        cfg.replicates,
        cfg.n_inner_paths,
        (cfg.master_seed, cfg.scenario),
        threads=threads,
        with_offline=with_offline,
    )
    return summarize(rewards, offline, lp_obj, mass, label, cfg.scenario)


def summarize(
    rewards: np.ndarray,
    offline: np.ndarray,
    lp_obj: float,
    mass: float,
    label: str = "Base",
    table: int = 0,
) -> SimReport:
    n = rewards.shape[0]
    lp_zero = not lp_obj > 0.0
    stats = {}
    for k, name in enumerate(POLICIES):
        col = rewards[:, k]
        if n >= 2:
            mean, hw = confidence_interval(col)
        else:
            mean, hw = float(col.mean()), None
        ratio = 0.0 if lp_zero else mean / lp_obj
        rhw = None if hw is None else (0.0 if lp_zero else hw / lp_obj)
        stats[name] = PolicyStats(mean, hw, ratio, rhw)
    off_mean = float(np.nanmean(offline)) if np.isfinite(offline).any() else math.nan
    viol = int(np.sum(rewards > offline[:, None] + 1e-9)) if np.isfinite(offline).all() else 0
    return SimReport(
        label=label,
        lp_objective=lp_obj,
        offline_mean=off_mean,
        policies=stats,
        replicates=n,
        lp_zero=lp_zero,
        max_unit_mass=mass,
        offline_violations=viol,
        table=table,
    )


def sweep_configs(cfg: ExperimentConfig, sweep: Sequence[tuple[str, float]] | None = None):
    sweep = cfg.sweep if sweep is None else sweep
    rows = [(cfg, "Base")]
    for name, value in sweep:
        c = replace(cfg, **{name: value})
        rows.append((c, _label(c, cfg)))
    return rows


def reproduce_tables(
    cfg: ExperimentConfig,
    sweep: Sequence[tuple[str, float]] | None = STANDARD_SWEEP,
    scenarios: Sequence[int] | None = None,
    threads: int = 1,
) -> list[SimReport]:
    """One report per (scenario, row); each scenario is an independent market."""
    scenarios = (cfg.scenario,) if scenarios is None else scenarios
    out = []
    for sc in scenarios:
        base = replace(cfg, scenario=sc)
        for c, label in sweep_configs(base, sweep):
            out.append(run_benchmark(c, threads=threads, label=label))
    return out


CSV_HEADER = (
    ["table", "row", "replicates", "lp3_objective", "offline_mean", "offline_ratio"]
    + [f"{p}_{k}" for p in POLICIES for k in ("mean", "ratio", "ratio_halfwidth")]
)


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.10g}"


def reports_to_csv(reports: Sequence[SimReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        off_ratio = None if r.lp_zero or math.isnan(r.offline_mean) else r.offline_mean / r.lp_objective
        row = [r.table, r.label, r.replicates, _fmt(r.lp_objective), _fmt(r.offline_mean), _fmt(off_ratio)]
        for p in POLICIES:
            s = r.policies[p]
            row += [_fmt(s.mean), _fmt(s.ratio), _fmt(s.ratio_halfwidth)]
        w.writerow(row)
    return buf.getvalue()


def reports_to_text(reports: Sequence[SimReport]) -> str:
    cols = ["", *POLICIES, "OFF"]
    lines = []
    tables = sorted({r.table for r in reports})
    for tb in tables:
        rows = [r for r in reports if r.table == tb]
        body = []
        for r in rows:
            cells = [r.label]
            for p in POLICIES:
                s = r.policies[p]
                cell = f"{100 * s.ratio:.1f}%"
                if s.ratio_halfwidth is not None:
                    cell += f" ±{100 * s.ratio_halfwidth:.1f}"
                cells.append(cell)
            off = "" if r.lp_zero or math.isnan(r.offline_mean) else f"{100 * r.offline_mean / r.lp_objective:.1f}%"
            cells.append(off)
            body.append(cells)
        widths = [max(len(c[k]) for c in [cols] + body) for k in range(len(cols))]
        lines.append(f"Scenario {tb}: performance relative to the LP3 bound")
        for c in [cols] + body:
            lines.append("  ".join(x.rjust(wd) if k else x.ljust(wd) for k, (x, wd) in enumerate(zip(c, widths))).rstrip())
        if any(r.lp_zero for r in rows):
            lines.append("note: LP objective is 0 on some rows; ratios reported as 0")
        lines.append("")
    return "\n".join(lines)


def write_reports(reports: Sequence[SimReport], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc, pt = out / "report.csv", out / "report.txt"
    pc.write_text(reports_to_csv(reports))
    pt.write_text(reports_to_text(reports))
    return pc, pt
