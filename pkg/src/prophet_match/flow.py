"""Bipartite transportation LPs solved as max-reward network flows.

Both LPs have the same shape: supply nodes ``(j, s)`` and demand nodes
``(i, t)`` with capacities, one edge per admissible pair ``s <= t`` carrying
reward ``r`` and its own cap. The deterministic relaxation uses expected
masses (``mu``, ``lambda``, ``lambda * mu``); the offline matching uses the
realised 0/1 indicators.

The solver is a primal-dual successive-shortest-path method: Dijkstra on
reduced costs updates node potentials, then a blocking flow is pushed over
the zero-reduced-cost subgraph. It stops once the cheapest source-to-sink
path no longer has negative cost, which is the free-disposal optimum. Node
potentials at termination give the LP duals.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

CAP_EPS = 1e-12
COST_EPS = 1e-12


class LpError(ValueError):
    pass


@dataclass
class BipartiteLpInstance:
    demand_caps: np.ndarray
    supply_caps: np.ndarray
    edge_demand: np.ndarray
    edge_supply: np.ndarray
    edge_rewards: np.ndarray
    edge_caps: np.ndarray
    demand_keys: list[tuple[int, int]] = field(default_factory=list)
    supply_keys: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.demand_caps = np.asarray(self.demand_caps, dtype=float)
        self.supply_caps = np.asarray(self.supply_caps, dtype=float)
        self.edge_demand = np.asarray(self.edge_demand, dtype=np.int64)
        self.edge_supply = np.asarray(self.edge_supply, dtype=np.int64)
        self.edge_rewards = np.asarray(self.edge_rewards, dtype=float)
        self.edge_caps = np.asarray(self.edge_caps, dtype=float)
        n = len(self.edge_rewards)
        if not (len(self.edge_demand) == len(self.edge_supply) == len(self.edge_caps) == n):
            raise LpError("edge arrays differ in length")
        for name in ("demand_caps", "supply_caps", "edge_caps"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or (arr < 0).any():
                raise LpError(f"{name} must be finite and non-negative")
        if n and (
            self.edge_demand.min() < 0
            or self.edge_demand.max() >= len(self.demand_caps)
            or self.edge_supply.min() < 0
            or self.edge_supply.max() >= len(self.supply_caps)
        ):
            raise LpError("edge endpoint out of range")
        if not self.demand_keys:
            self.demand_keys = [(k, 0) for k in range(len(self.demand_caps))]
        if not self.supply_keys:
            self.supply_keys = [(k, 0) for k in range(len(self.supply_caps))]
        for e in range(n):
            t = self.demand_keys[self.edge_demand[e]][1]
            s = self.supply_keys[self.edge_supply[e]][1]
            if s > t:
                raise LpError(f"edge {e}: supply period {s} after demand period {t}")

    @property
    def num_edges(self) -> int:
        return len(self.edge_rewards)

    def to_dict(self) -> dict[str, Any]:
        return {
            "demand": [
                {"i": int(i), "t": int(t), "cap": float(c)}
                for (i, t), c in zip(self.demand_keys, self.demand_caps)
            ],
            "supply": [
                {"j": int(j), "s": int(s), "cap": float(c)}
                for (j, s), c in zip(self.supply_keys, self.supply_caps)
            ],
            "edges": [
                {"demand": int(d), "supply": int(u), "reward": float(r), "cap": float(c)}
                for d, u, r, c in zip(
                    self.edge_demand, self.edge_supply, self.edge_rewards, self.edge_caps
                )
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "BipartiteLpInstance":
        return cls(
            demand_caps=[d["cap"] for d in doc["demand"]],
            supply_caps=[s["cap"] for s in doc["supply"]],
            edge_demand=[e["demand"] for e in doc["edges"]],
            edge_supply=[e["supply"] for e in doc["edges"]],
            edge_rewards=[e["reward"] for e in doc["edges"]],
            edge_caps=[e["cap"] for e in doc["edges"]],
            demand_keys=[(d["i"], d["t"]) for d in doc["demand"]],
            supply_keys=[(s["j"], s["s"]) for s in doc["supply"]],
        )


@dataclass
class LpSolution:
    flows: np.ndarray
    objective: float
    demand_duals: np.ndarray
    supply_duals: np.ndarray
    edge_duals: np.ndarray
    residuals: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "objective": self.objective,
            "flows": self.flows.tolist(),
            "demand_duals": self.demand_duals.tolist(),
            "supply_duals": self.supply_duals.tolist(),
            "edge_duals": self.edge_duals.tolist(),
            "residuals": self.residuals,
        }


@dataclass(frozen=True)
class ResidualReport:
    primal_violation: float
    dual_violation: float
    duality_gap: float
    complementary_slackness: float
    dual_objective: float

    @property
    def worst(self) -> float:
        return max(
            self.primal_violation,
            self.dual_violation,
            self.duality_gap,
            self.complementary_slackness,
        )


def lp3_instance(lam: np.ndarray, mu: np.ndarray, reward: np.ndarray) -> BipartiteLpInstance:
    """Deterministic relaxation from rates ``lam[i, t]``, ``mu[j, s]`` and
    rewards ``reward[i, j, t, s]``. Only pairs with ``s <= t`` and positive
    reward become edges.
    """
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    reward = np.asarray(reward, dtype=float)
    I, T = lam.shape
    J = mu.shape[0]
    tri = np.tril(np.ones((T, T), dtype=bool))  # [t, s] with s <= t
    mask = (reward > 0) & tri[None, None, :, :]
    ii, jj, tt, ss = np.nonzero(mask)
    return BipartiteLpInstance(
        demand_caps=lam.ravel(),
        supply_caps=mu.ravel(),
        edge_demand=ii * T + tt,
        edge_supply=jj * T + ss,
        edge_rewards=reward[ii, jj, tt, ss],
        edge_caps=lam[ii, tt] * mu[jj, ss],
        demand_keys=[(i, t) for i in range(I) for t in range(T)],
        supply_keys=[(j, s) for j in range(J) for s in range(T)],
    )


def offline_instance(
    demand_arrivals: Sequence[int | None],
    supply_arrivals: Sequence[int | None],
    reward: np.ndarray,
) -> BipartiteLpInstance:
    """Realised-unit instance: one node per arrived unit, unit capacities."""
    dem = [(i, t) for t, i in enumerate(demand_arrivals) if i is not None]
    sup = [(j, s) for s, j in enumerate(supply_arrivals) if j is not None]
    ed, es, er = [], [], []
    for a, (i, t) in enumerate(dem):
        for b, (j, s) in enumerate(sup):
            if s <= t and reward[i, j, t, s] > 0:
                ed.append(a)
                es.append(b)
                er.append(reward[i, j, t, s])
    return BipartiteLpInstance(
        demand_caps=np.ones(len(dem)),
        supply_caps=np.ones(len(sup)),
        edge_demand=ed,
        edge_supply=es,
        edge_rewards=er,
        edge_caps=np.ones(len(er)),
        demand_keys=dem,
        supply_keys=sup,
    )


class _Network:
    """Residual network in flat arrays; arc ``k`` and ``k ^ 1`` are reverses."""

    def __init__(self, n: int, tail, head, cap, cost):
        m = len(tail)
        self.n = n
        self.tail = np.empty(2 * m, dtype=np.int64)
        self.head = np.empty(2 * m, dtype=np.int64)
        self.tail[0::2], self.tail[1::2] = tail, head
        self.head[0::2], self.head[1::2] = head, tail
        self.cap = np.zeros(2 * m)
        self.cap[0::2] = cap
        self.cost = np.empty(2 * m)
        self.cost[0::2], self.cost[1::2] = cost, -np.asarray(cost, dtype=float)

    def reduced(self, pot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        live = np.nonzero(self.cap > CAP_EPS)[0]
        rc = self.cost[live] + pot[self.tail[live]] - pot[self.head[live]]
        return live, np.maximum(rc, 0.0)

    def dijkstra(self, pot: np.ndarray, start: int) -> np.ndarray:
        live, rc = self.reduced(pot)
        g = csr_matrix((rc, (self.tail[live], self.head[live])), shape=(self.n, self.n))
        return dijkstra(g, indices=start)


def _build_network(inst: BipartiteLpInstance) -> tuple[_Network, int, int]:
    nS = len(inst.supply_caps)
    nD = len(inst.demand_caps)
    src, sink = 0, 1 + nS + nD
    sup = np.arange(nS)
    dem = np.arange(nD)
    tail = np.concatenate([np.zeros(nS, dtype=np.int64), 1 + inst.edge_supply, 1 + nS + dem])
    head = np.concatenate([1 + sup, 1 + nS + inst.edge_demand, np.full(nD, sink)])
    cap = np.concatenate([inst.supply_caps, inst.edge_caps, inst.demand_caps])
    cost = np.concatenate([np.zeros(nS), -inst.edge_rewards, np.zeros(nD)])
    return _Network(nS + nD + 2, tail, head, cap, cost), src, sink


def _solve_flow(inst: BipartiteLpInstance) -> tuple[np.ndarray, np.ndarray, _Network]:
    nS = len(inst.supply_caps)
    nD = len(inst.demand_caps)
    net, src, sink = _build_network(inst)
    first_edge_arc = 2 * nS
    edge_arcs = first_edge_arc + 2 * np.arange(inst.num_edges)

    # Initial residual graph is a layered DAG, so potentials come from one sweep.
    pot = np.zeros(net.n)
    ok = net.cap[edge_arcs] > CAP_EPS
    np.minimum.at(pot, net.head[edge_arcs[ok]], net.cost[edge_arcs[ok]])
    pot[sink] = pot[1 + nS : 1 + nS + nD].min() if nD else 0.0

    while True:
        dist = net.dijkstra(pot, src)
        reach = np.isfinite(dist)
        if not reach[sink]:
            # Unreached nodes get a common shift large enough to keep every
            # residual arc feasible and pot[sink] >= pot[src].
            fill = max(dist[reach].max(), pot[src] - pot[sink])
            pot = pot + np.where(reach, dist, fill)
            break
        pot = pot + np.where(reach, dist, dist[reach].max())
        if pot[sink] - pot[src] >= -COST_EPS:
            break
        _blocking_flow(net, pot, src, sink)

    return net.cap[edge_arcs + 1].copy(), pot, net


def _blocking_flow(net: _Network, pot: np.ndarray, src: int, sink: int) -> None:
    """Dinic-style blocking flows over arcs with zero reduced cost.

    Hop levels from the source and to the sink are computed with vectorised
    BFS, so the Python walk only sees arcs on shortest augmenting paths.
    """
    n = net.n
    while True:
        live = np.nonzero(net.cap > CAP_EPS)[0]
        rc = net.cost[live] + pot[net.tail[live]] - pot[net.head[live]]
        arcs = live[np.abs(rc) <= 1e-9]
        tails, heads = net.tail[arcs], net.head[arcs]
        g = csr_matrix((np.ones(len(arcs)), (tails, heads)), shape=(n, n))
        fwd = dijkstra(g, indices=src, unweighted=True)
        if not np.isfinite(fwd[sink]):
            return
        bwd = dijkstra(g.T.tocsr(), indices=sink, unweighted=True)
        keep = (fwd[heads] == fwd[tails] + 1) & (fwd[heads] + bwd[heads] == fwd[sink])
        arcs = arcs[keep]
        cap = dict(zip(arcs.tolist(), net.cap[arcs].tolist()))
        head = dict(zip(arcs.tolist(), net.head[arcs].tolist()))
        adj: dict[int, list[int]] = {}
        for k, u in zip(arcs.tolist(), net.tail[arcs].tolist()):
            adj.setdefault(u, []).append(k)
        it = dict.fromkeys(adj, 0)
        while True:
            stack = [src]
            path: list[int] = []
            while stack and stack[-1] != sink:
                u = stack[-1]
                out = adj.get(u, ())
                i = it.get(u, 0)
                while i < len(out) and cap[out[i]] <= CAP_EPS:
                    i += 1
                it[u] = i
                if i < len(out):
                    k = out[i]
                    stack.append(head[k])
                    path.append(k)
                else:
                    stack.pop()
                    if path:
                        path.pop()
                        it[stack[-1]] += 1
            if not stack:
                break
            push = min(cap[k] for k in path)
            for k in path:
                cap[k] -= push
                net.cap[k] -= push
                net.cap[k ^ 1] += push


def _dual_potentials(net: _Network, pot: np.ndarray, src: int, sink: int) -> np.ndarray:
    """Largest potentials not above ``pot`` that stay feasible on every residual
    arc, including the free-disposal arcs sink -> source and (when flow is
    positive) source -> sink. Only the latter can have negative reduced cost,
    so one Dijkstra from the sink settles it.
    """
    total = float(net.cap[1 : 2 * int((net.tail[0::2] == src).sum()) : 2].sum())
    gap = pot[src] - pot[sink]
    if total <= CAP_EPS or gap >= 0.0:
        return pot
    d = net.dijkstra(pot, sink)
    delta = np.minimum(0.0, gap + d)
    return pot + delta


def solve_lp3(inst: BipartiteLpInstance) -> LpSolution:
    """Optimal primal flows and dual prices of a bipartite transportation LP."""
    nS = len(inst.supply_caps)
    nD = len(inst.demand_caps)
    src, sink = 0, 1 + nS + nD
    flows, pot, net = _solve_flow(inst)
    D = _dual_potentials(net, pot, src, sink)
    sup_pot = D[1 : 1 + nS]
    dem_pot = D[1 + nS : 1 + nS + nD]
    supply_duals = np.maximum(sup_pot - D[src], 0.0)
    demand_duals = np.maximum(D[sink] - dem_pot, 0.0)
    edge_duals = np.maximum(
        dem_pot[inst.edge_demand] - sup_pot[inst.edge_supply] + inst.edge_rewards, 0.0
    )
    flows = np.clip(flows, 0.0, None)
    sol = LpSolution(
        flows=flows,
        objective=float(flows @ inst.edge_rewards),
        demand_duals=demand_duals,
        supply_duals=supply_duals,
        edge_duals=edge_duals,
    )
    sol.residuals = verify_solution(inst, sol).worst
    return sol


def solve_offline_matching(
    demand_arrivals: Sequence[int | None],
    supply_arrivals: Sequence[int | None],
    reward: np.ndarray,
) -> tuple[LpSolution, BipartiteLpInstance]:
    """Max-weight matching over realised units; flows come out integral."""
    inst = offline_instance(demand_arrivals, supply_arrivals, reward)
    sol = solve_lp3(inst)
    sol.flows = np.rint(sol.flows)
    sol.objective = float(sol.flows @ inst.edge_rewards)
    return sol, inst


def offline_value(
    demand_arrivals: Sequence[int | None],
    supply_arrivals: Sequence[int | None],
    reward: np.ndarray,
) -> float:
    return solve_offline_matching(demand_arrivals, supply_arrivals, reward)[0].objective


def verify_solution(inst: BipartiteLpInstance, sol: LpSolution) -> ResidualReport:
    x = np.asarray(sol.flows, dtype=float)
    dem_flow = np.bincount(inst.edge_demand, weights=x, minlength=len(inst.demand_caps))
    sup_flow = np.bincount(inst.edge_supply, weights=x, minlength=len(inst.supply_caps))
    primal = max(
        0.0,
        float(np.max(-x, initial=0.0)),
        float(np.max(x - inst.edge_caps, initial=0.0)),
        float(np.max(dem_flow - inst.demand_caps, initial=0.0)),
        float(np.max(sup_flow - inst.supply_caps, initial=0.0)),
    )
    a, b, g = sol.supply_duals, sol.demand_duals, sol.edge_duals
    cover = a[inst.edge_supply] + b[inst.edge_demand] + g
    dual = max(
        0.0,
        float(np.max(inst.edge_rewards - cover, initial=0.0)),
        float(np.max(-a, initial=0.0)),
        float(np.max(-b, initial=0.0)),
        float(np.max(-g, initial=0.0)),
    )
    primal_obj = float(x @ inst.edge_rewards)
    dual_obj = float(a @ inst.supply_caps + b @ inst.demand_caps + g @ inst.edge_caps)
    gap = abs(primal_obj - dual_obj) / (1.0 + abs(primal_obj))
    cs = float(
        np.abs(x * (cover - inst.edge_rewards)).sum()
        + np.abs(a * (inst.supply_caps - sup_flow)).sum()
        + np.abs(b * (inst.demand_caps - dem_flow)).sum()
        + np.abs(g * (inst.edge_caps - x)).sum()
    )
    return ResidualReport(primal, dual, gap, cs, dual_obj)


def flows_to_csv(inst: BipartiteLpInstance, sol: LpSolution, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "t", "s", "x"])
        for e in np.nonzero(sol.flows > 0)[0]:
            i, t = inst.demand_keys[inst.edge_demand[e]]
            j, s = inst.supply_keys[inst.edge_supply[e]]
            w.writerow([i, j, t, s, repr(float(sol.flows[e]))])


def dump_json(obj: BipartiteLpInstance | LpSolution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), indent=2) + "\n")


def flow_tensor(inst: BipartiteLpInstance, sol: LpSolution, I: int, J: int, T: int) -> np.ndarray:
    """Scatter edge flows of a relaxation instance into ``x[i, j, t, s]``."""
    x = np.zeros((I, J, T, T))
    dk = np.array(inst.demand_keys).reshape(-1, 2)
    sk = np.array(inst.supply_keys).reshape(-1, 2)
    if inst.num_edges:
        i, t = dk[inst.edge_demand].T
        j, s = sk[inst.edge_supply].T
        x[i, j, t, s] = sol.flows
    return x


def supply_dual_matrix(inst: BipartiteLpInstance, sol: LpSolution, J: int, T: int) -> np.ndarray:
    out = np.zeros((J, T))
    for (j, s), v in zip(inst.supply_keys, sol.supply_duals):
        out[j, s] = v
    return out
