"""Online two-sided matching: separation + admission, resource-sharing
variants, and the greedy / bid-price baselines.

Periods and types are 0-based throughout. Supply units are identified by
``(j, s)`` and demand units by ``(i, t)``; a demand unit can only be matched
to a supply unit with ``s <= t``.

The scenario ``S_t`` seen by the admission step is the supply-arrival history
up to ``t``. Every supply unit runs its own single-resource threshold policy
with ``tbar = 1`` over the stream of demand units routed to it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .flow import LpSolution, flow_tensor, lp3_instance, solve_lp3, supply_dual_matrix
from .prophet import ThresholdEstimate

MASS_TOL = 1e-9
ON_PLUS_MULTIPLIERS = (1.0, 1.3, 1.6, 2.0)


class ConsistencyError(RuntimeError):
    """An invariant guaranteed by the LP structure was violated."""


@dataclass(frozen=True)
class MatchInstance:
    lam: np.ndarray  # [i, t]
    mu: np.ndarray  # [j, s]
    reward: np.ndarray  # [i, j, t, s]; entries with s > t are ignored

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        reward = np.asarray(self.reward, dtype=float)
        I, T = lam.shape
        J = mu.shape[0]
        if mu.shape != (J, T) or reward.shape != (I, J, T, T):
            raise ValueError("inconsistent shapes for lam, mu, reward")
        if (lam <= 0).any() or (mu <= 0).any():
            raise ValueError("arrival rates must be strictly positive")
        if (lam.sum(axis=0) > 1 + 1e-12).any() or (mu.sum(axis=0) > 1 + 1e-12).any():
            raise ValueError("per-period arrival rates exceed 1")
        if not np.isfinite(reward).all():
            raise ValueError("rewards must be finite")
        reward = reward * np.tril(np.ones((T, T)))[None, None]
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "reward", reward)

    @property
    def I(self) -> int:
        return self.lam.shape[0]

    @property
    def J(self) -> int:
        return self.mu.shape[0]

    @property
    def T(self) -> int:
        return self.lam.shape[1]

    def r(self, i: int, j: int, t: int, s: int) -> float:
        return float(self.reward[i, j, t, s]) if s <= t else 0.0


@dataclass(frozen=True)
class Realization:
    demand: tuple[int | None, ...]
    supply: tuple[int | None, ...]
    u: tuple[float, ...] = ()
    v: tuple[float, ...] = ()


@dataclass(frozen=True)
class MatchEvent:
    period: int
    event: str
    i: int
    j: int | None
    s: int | None
    reward: float
    threshold: float | None
    decision: str


@dataclass
class MatchTrace:
    events: list[MatchEvent] = field(default_factory=list)
    total_reward: float = 0.0
    max_unit_mass: float = 0.0
    max_routing_excess: float = -math.inf

    @property
    def matches(self) -> list[tuple[int, int, int, int, float]]:
        return [
            (e.i, e.period, e.j, e.s, e.reward)
            for e in self.events
            if e.event in ("match", "match-alt")
        ]

    @property
    def rejections(self) -> list[tuple[int, int, str]]:
        return [(e.i, e.period, e.decision) for e in self.events if e.event == "reject"]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["period", "event", "i", "j", "s", "reward", "threshold", "decision"])
            for e in self.events:
                w.writerow(
                    [
                        e.period,
                        e.event,
                        e.i,
                        "" if e.j is None else e.j,
                        "" if e.s is None else e.s,
                        repr(e.reward),
                        "" if e.threshold is None else repr(e.threshold),
                        e.decision,
                    ]
                )


def _interval_pick(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index k with u in [cum[k-1], cum[k]) along axis 0, or len(cum) if none."""
    return (u[None, ...] >= cum).sum(axis=0)


def sample_realization(inst: MatchInstance, rng: np.random.Generator) -> Realization:
    u = rng.random(inst.T)
    v = rng.random(inst.T)
    dem = _interval_pick(np.cumsum(inst.lam, axis=0), u)
    sup = _interval_pick(np.cumsum(inst.mu, axis=0), v)
    return Realization(
        demand=tuple(None if k == inst.I else int(k) for k in dem),
        supply=tuple(None if k == inst.J else int(k) for k in sup),
        u=tuple(u.tolist()),
        v=tuple(v.tolist()),
    )


def solve_relaxation(inst: MatchInstance) -> tuple[np.ndarray, LpSolution, np.ndarray]:
    """Solve the deterministic LP; returns ``x[i, j, t, s]``, the raw solution
    and supply-node duals ``[j, s]``."""
    lp = lp3_instance(inst.lam, inst.mu, inst.reward)
    sol = solve_lp3(lp)
    return (
        flow_tensor(lp, sol, inst.I, inst.J, inst.T),
        sol,
        supply_dual_matrix(lp, sol, inst.J, inst.T),
    )


def _routing_weights(inst: MatchInstance, x_star: np.ndarray) -> np.ndarray:
    # W[i, j, t, s] = x*[i, j, t, s] / mu[j, s]
    return x_star / inst.mu[None, :, None, :]


def separation_probs(
    inst: MatchInstance,
    x_star: np.ndarray,
    supply_history: Sequence[int | None],
    i: int,
    t: int,
) -> dict[tuple[int, int], float]:
    """Routing probabilities p_ijts(S_t) over supply units arrived by ``t``."""
    W = _routing_weights(inst, x_star)
    units = [(j, s) for s, j in enumerate(supply_history[: t + 1]) if j is not None]
    Y = np.array([W[i, j, t, s] for j, s in units])
    total = Y.sum() if len(Y) else 0.0
    if total <= 0.0:
        return {u: 0.0 for u in units}
    scale = min(inst.lam[i, t], total) / total
    return {u: float(scale * y) for u, y in zip(units, Y)}


def separation_pick(
    probs: Sequence[float], lambda_it: float, rng: np.random.Generator | float
) -> int | None:
    """Index picked with probability probs[k] / lambda_it, None with the rest."""
    q = np.asarray(probs, dtype=float) / lambda_it
    if q.sum() > 1.0 + MASS_TOL:
        raise ConsistencyError(f"routing mass {q.sum():.12g} exceeds 1")
    w = rng if isinstance(rng, float) else float(rng.random())
    lo = 0.0
    for k, p in enumerate(q):
        if lo <= w < lo + p:
            return k
        lo += p
    return None


class _Engine:
    """Shared per-realization state for the online policies.

    Supply history, per-unit admitted mass and threshold estimates depend
    only on the realization and the seed, never on which units a policy has
    used, so several policies can share one engine and see identical
    randomness (common random numbers).
    """

    def __init__(
        self,
        inst: MatchInstance,
        x_star: np.ndarray,
        real: Realization,
        n_paths: int,
        seed: int,
    ):
        if n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        self.inst = inst
        self.real = real
        self.n_paths = n_paths
        self.seed = seed
        I, J, T = inst.I, inst.J, inst.T
        self.W = _routing_weights(inst, x_star)
        self.RW = inst.reward * self.W
        # Wpad[s, j, i, t]; the extra j row encodes "no arrival".
        self.Wpad = np.zeros((T, J + 1, I, T))
        self.Wpad[:, :J] = self.W.transpose(3, 1, 0, 2)
        self.mu_cum = np.cumsum(inst.mu, axis=0)
        self.base = np.zeros((I, T))  # sum of W over arrived units, per (i, t')
        self.units: list[tuple[int, int]] = []
        self.unit_index: dict[tuple[int, int], int] = {}
        self.mass: list[float] = []
        self.t = -1
        self.factor_now = np.zeros(I)
        self._pick_u: float | None = None
        self._factor_future: np.ndarray | None = None
        self._h_cache: dict[int, ThresholdEstimate] = {}
        self.max_unit_mass = 0.0
        self.max_routing_excess = -math.inf

    def advance(self) -> None:
        """Move to the next period: register supply, accrue routed mass."""
        self.t += 1
        t = self.t
        j = self.real.supply[t]
        if j is not None:
            self.unit_index[(j, t)] = len(self.units)
            self.units.append((j, t))
            self.mass.append(0.0)
            self.base += self.W[:, j, :, t]
        total = self.base[:, t]
        lam = self.inst.lam[:, t]
        with np.errstate(invalid="ignore", divide="ignore"):
            self.factor_now = np.where(total > 0, np.minimum(lam, total) / total, 0.0)
        routed = np.minimum(lam, total)
        self.max_routing_excess = max(self.max_routing_excess, float((routed - lam).max()))
        for k, (uj, us) in enumerate(self.units):
            self.mass[k] += float(self.factor_now @ self.W[:, uj, t, us])
        if self.mass:
            self.max_unit_mass = max(self.max_unit_mass, max(self.mass))
            if self.max_unit_mass > 1.0 + MASS_TOL:
                raise ConsistencyError(f"unit routed mass {self.max_unit_mass:.12g} exceeds 1")
        self._pick_u = None
        self._factor_future = None
        self._h_cache = {}
        self._rng = np.random.default_rng([self.seed, t])

    def pick_uniform(self) -> float:
        if self._pick_u is None:
            self._pick_u = float(self._rng.random())
        return self._pick_u

    def routing(self, i: int) -> np.ndarray:
        """p_ijts(S_t) for every arrived unit, in arrival order."""
        t = self.t
        return np.array(
            [self.factor_now[i] * self.W[i, j, t, s] for j, s in self.units]
        )

    def pick(self, i: int) -> int | None:
        p = self.routing(i)
        if not len(p):
            return None
        return separation_pick(p, float(self.inst.lam[i, self.t]), self.pick_uniform())

    def _future(self) -> np.ndarray:
        if self._factor_future is None:
            self.pick_uniform()  # keep the stream order fixed
            self._factor_future = future_factors(
                self.inst, self.Wpad, self.mu_cum, self.base, self.t, self.n_paths, self._rng
            )
        return self._factor_future

    def threshold(self, k: int) -> ThresholdEstimate:
        if k not in self._h_cache:
            self._h_cache.update(self.thresholds([k]))
        return self._h_cache[k]

    def thresholds(self, ks: Iterable[int]) -> dict[int, ThresholdEstimate]:
        ks = [k for k in ks if k not in self._h_cache]
        if ks:
            t = self.t
            keys = [self.units[k] for k in ks]
            masses = np.array([self.mass[k] for k in ks])
            est = _unit_thresholds(self.RW, self._future(), keys, masses, t, self.n_paths)
            self._h_cache.update(zip(ks, est))
        return self._h_cache


def future_factors(
    inst: MatchInstance,
    Wpad: np.ndarray,
    mu_cum: np.ndarray,
    base: np.ndarray,
    t: int,
    n_paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Routing scale min(lam, sum Y) / sum Y for periods after ``t`` along
    ``n_paths`` simulated continuations of supply arrivals. Shape (n, I, F).
    """
    T = inst.T
    F = T - t - 1
    if F <= 0:
        return np.zeros((n_paths, inst.I, 0))
    v = rng.random((n_paths, F))
    types = _interval_pick(mu_cum[:, t + 1 :, None], v.T).T  # (n, F), J means none
    total = np.broadcast_to(base[None, :, t + 1 :], (n_paths, inst.I, F)).copy()
    for f in range(F):
        s = t + 1 + f
        total += Wpad[s, types[:, f]][:, :, t + 1 :]
    lam = inst.lam[None, :, t + 1 :]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, np.minimum(lam, total) / total, 0.0)


def _unit_thresholds(
    RW: np.ndarray,
    factors: np.ndarray,
    units: Sequence[tuple[int, int]],
    masses: np.ndarray,
    t: int,
    n_paths: int,
) -> list[ThresholdEstimate]:
    if (masses > 1.0 + MASS_TOL).any():
        raise ConsistencyError("past routed mass exceeds 1")
    if factors.shape[2] == 0:
        return [ThresholdEstimate(0.0, 0.0, n_paths) for _ in units]
    K = np.stack([RW[:, j, t + 1 :, s] for j, s in units])  # (U, I, F)
    num = np.tensordot(factors, K, axes=([1, 2], [1, 2]))  # (n, U)
    denom = 2.0 - masses
    vals = num / denom[None, :]
    mean = vals.mean(axis=0)
    if n_paths > 1:
        se = vals.std(axis=0, ddof=1) / math.sqrt(n_paths)
    else:
        se = np.full(len(units), float("nan"))
    return [ThresholdEstimate(float(m), float(e), n_paths) for m, e in zip(mean, se)]


def admission_threshold(
    inst: MatchInstance,
    x_star: np.ndarray,
    unit: tuple[int, int],
    supply_history: Sequence[int | None],
    t: int,
    n_paths: int,
    rng: np.random.Generator,
) -> ThresholdEstimate:
    """Monte Carlo h_js(S_t) with tbar = 1 for an arrived unit ``(j, s)``.

    ``supply_history`` must cover periods ``0..t``; later entries are ignored.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    j, s = unit
    if s > t or supply_history[s] != j:
        raise ValueError(f"unit {unit} has not arrived by period {t}")
    W = _routing_weights(inst, x_star)
    base = np.zeros((inst.I, inst.T))
    for s2, j2 in enumerate(supply_history[: t + 1]):
        if j2 is not None:
            base += W[:, j2, :, s2]
    past = 0.0
    for t2 in range(s, t + 1):
        tot = base[:, t2]
        lam = inst.lam[:, t2]
        with np.errstate(invalid="ignore", divide="ignore"):
            fac = np.where(tot > 0, np.minimum(lam, tot) / tot, 0.0)
        past += float(fac @ W[:, j, t2, s])
    if past > 1.0 + MASS_TOL:
        raise ConsistencyError(f"past routed mass {past:.12g} exceeds 1")
    Wpad = np.zeros((inst.T, inst.J + 1, inst.I, inst.T))
    Wpad[:, : inst.J] = W.transpose(3, 1, 0, 2)
    factors = future_factors(inst, Wpad, np.cumsum(inst.mu, axis=0), base, t, n_paths, rng)
    return _unit_thresholds(inst.reward * W, factors, [unit], np.array([past]), t, n_paths)[0]


def _seed_from(rng: np.random.Generator | int) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


def _margin(rule: str, multiplier: float, h: float, r: float) -> float:
    if rule == "surplus":
        return r - multiplier * h
    if rule == "shortfall":
        return multiplier * h - r
    raise ValueError(f"unknown margin rule {rule!r}")


class _OnlinePolicy:
    def __init__(self, engine: _Engine, multiplier: float | None, rule: str = "surplus"):
        self.engine = engine
        self.multiplier = multiplier
        self.rule = rule
        self.available: set[int] = set()
        self.trace = MatchTrace()

    def on_supply(self, k: int) -> None:
        self.available.add(k)

    def on_demand(self, i: int) -> None:
        eng = self.engine
        t = eng.t
        k = eng.pick(i)
        if k is None:
            j = s = h = None
            r, reason = 0.0, "no-pick"
        else:
            j, s = eng.units[k]
            r = eng.inst.r(i, j, t, s)
            if k not in self.available:
                reason, h = "unavailable", None
            else:
                h = eng.threshold(k).value
                if r >= h:
                    self._match(t, i, k, r, h, "match", "accept")
                    return
                reason = "threshold"
        if self.multiplier is not None and self._alternative(i, exclude=k):
            return
        self._reject(t, i, j, s, reason, r, h)

    def _alternative(self, i: int, exclude: int | None) -> bool:
        eng = self.engine
        t = eng.t
        rewards = {}
        for k in sorted(self.available):
            if k != exclude:
                r = eng.inst.r(i, eng.units[k][0], t, eng.units[k][1])
                if r > 0.0:
                    rewards[k] = r
        if not rewards:
            return False
        hs = eng.thresholds(rewards)
        best, best_margin = None, -math.inf
        for k, r in rewards.items():
            margin = _margin(self.rule, self.multiplier, hs[k].value, r)
            if margin >= 0.0 and margin > best_margin:
                best, best_margin = k, margin
        if best is None:
            return False
        self._match(t, i, best, rewards[best], hs[best].value, "match-alt", "alternative")
        return True

    def _match(self, t, i, k, r, h, event, decision) -> None:
        j, s = self.engine.units[k]
        self.available.discard(k)
        self.trace.events.append(MatchEvent(t, event, i, j, s, r, h, decision))
        self.trace.total_reward += r

    def _reject(self, t, i, j, s, reason, r=0.0, h=None) -> None:
        self.trace.events.append(MatchEvent(t, "reject", i, j, s, r, h, reason))


def run_online_family(
    inst: MatchInstance,
    x_star: np.ndarray,
    real: Realization,
    n_paths: int,
    rng: np.random.Generator | int,
    multipliers: Sequence[float | None] = (None,) + ON_PLUS_MULTIPLIERS,
    margin_rule: str = "surplus",
) -> list[MatchTrace]:
    """Run ON (multiplier None) and ON+ variants in lockstep on one engine.

    An ON+ policy behaves like ON until ON would reject a demand unit; it then
    offers the available unit with the largest non-negative margin. The
    default ``"surplus"`` margin is ``r - multiplier * h``; ``"shortfall"``
    uses ``multiplier * h - r``.
    """
    if margin_rule not in ("surplus", "shortfall"):
        raise ValueError(f"unknown margin rule {margin_rule!r}")
    eng = _Engine(inst, x_star, real, n_paths, _seed_from(rng))
    policies = [_OnlinePolicy(eng, m, margin_rule) for m in multipliers]
    for t in range(inst.T):
        eng.advance()
        if real.supply[t] is not None:
            k = eng.unit_index[(real.supply[t], t)]
            for p in policies:
                p.on_supply(k)
        i = real.demand[t]
        if i is not None:
            for p in policies:
                p.on_demand(i)
    for p in policies:
        p.trace.max_unit_mass = eng.max_unit_mass
        p.trace.max_routing_excess = eng.max_routing_excess
    return [p.trace for p in policies]


def run_online(
    inst: MatchInstance,
    x_star: np.ndarray,
    real: Realization,
    n_paths: int,
    rng: np.random.Generator | int,
) -> MatchTrace:
    return run_online_family(inst, x_star, real, n_paths, rng, (None,))[0]


def run_online_plus(
    inst: MatchInstance,
    x_star: np.ndarray,
    real: Realization,
    n_paths: int,
    margin_multiplier: float,
    rng: np.random.Generator | int,
    margin_rule: str = "surplus",
) -> MatchTrace:
    if margin_multiplier < 1.0:
        raise ValueError("margin multiplier must be at least 1")
    return run_online_family(
        inst, x_star, real, n_paths, rng, (margin_multiplier,), margin_rule
    )[0]


def _run_index_policy(inst: MatchInstance, real: Realization, score) -> MatchTrace:
    trace = MatchTrace()
    available: list[tuple[int, int]] = []
    for t in range(inst.T):
        j = real.supply[t]
        if j is not None:
            available.append((j, t))
        i = real.demand[t]
        if i is None:
            continue
        best, best_score = None, -math.inf
        for unit in available:
            r = inst.r(i, unit[0], t, unit[1])
            sc = score(r, unit)
            if sc is not None and sc > best_score:
                best, best_score = unit, sc
        if best is None:
            trace.events.append(MatchEvent(t, "reject", i, None, None, 0.0, None, "no-candidate"))
            continue
        available.remove(best)
        r = inst.r(i, best[0], t, best[1])
        trace.events.append(MatchEvent(t, "match", i, best[0], best[1], r, None, "accept"))
        trace.total_reward += r
    return trace


def run_greedy(inst: MatchInstance, real: Realization) -> MatchTrace:
    """Match each demand unit to the available unit with the highest positive reward."""
    return _run_index_policy(inst, real, lambda r, unit: r if r > 0.0 else None)


def run_bid_price(inst: MatchInstance, real: Realization, supply_duals: np.ndarray) -> MatchTrace:
    """Match to the unit maximising reward minus its dual price, when that is >= 0."""

    def score(r, unit):
        margin = r - supply_duals[unit]
        return margin if r > 0.0 and margin >= 0.0 else None

    return _run_index_policy(inst, real, score)


def check_separation_bound(
    inst: MatchInstance,
    x_star: np.ndarray,
    edge: tuple[int, int, int, int],
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of p_ijts(S_t) over supply histories."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    i, j, t, s = edge
    if s > t:
        return 0.0, 0.0
    W = _routing_weights(inst, x_star)
    v = rng.random((n_samples, t + 1))
    types = _interval_pick(np.cumsum(inst.mu[:, : t + 1], axis=0)[:, :, None], v.T).T
    Wi = np.zeros((inst.J + 1, t + 1))
    Wi[: inst.J] = W[i, :, t, : t + 1]
    Y = Wi[types, np.arange(t + 1)[None, :]]  # (n, t+1)
    total = Y.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(total > 0, np.minimum(inst.lam[i, t], total) / total, 0.0)
    p = scale * Y[:, s] * (types[:, s] == j)
    se = float(p.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(p.mean()), se


def capping_bound_check(lam: float, x: float) -> bool:
    """min(lam, x) / x >= 1 - x / (4 lam) for lam, x > 0."""
    if lam <= 0 or x <= 0:
        raise ValueError("capping bound domain: lam > 0 and x > 0")
    return bool(capping_bound_holds(np.array([lam]), np.array([x]))[0])


def capping_bound_holds(lam: np.ndarray, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return np.minimum(lam, x) / x >= 1.0 - x / (4.0 * lam) - tol
