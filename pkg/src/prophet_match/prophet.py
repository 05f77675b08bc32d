"""Simulation-based threshold policy for a single resource on a scenario tree.

The threshold at node ``S_t`` is

    h(S_t) = E[ future reward mass | S_t ] / (1 + tbar - past arrival mass)

where the past mass is summed along the path to ``S_t`` (inclusive) and is
therefore known at ``S_t``. The policy sells to the first arrival whose reward
is at least ``h(S_t)``.

Besides the policy itself this module carries the exact bookkeeping used to
check its guarantee on enumerable trees: value recursion, the offline oracle,
the Z-process and its submartingale / optional-stopping identities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .scenario import (
    DEFAULT_ENUM_CAP,
    EnumerationCapError,
    SamplePath,
    ScenarioTree,
    chain_tree,
    tbar_upper_bound,
)

TBAR_TOL = 1e-9


class InvalidUpperBound(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdEstimate:
    value: float
    stderr: float = 0.0
    n_paths: int = 0


@dataclass(frozen=True)
class StpTrace:
    path: SamplePath
    accept_period: int
    reward: float
    thresholds_seen: tuple[float, ...]
    cumulative_mass: tuple[float, ...]

    @property
    def sold(self) -> bool:
        return self.accept_period <= len(self.path.arrivals)


@dataclass(frozen=True)
class ZTrace:
    z_values: tuple[float, ...]


def _check_tbar(tree: ScenarioTree, tbar: float) -> None:
    need = tbar_upper_bound(tree)
    if tbar < need - TBAR_TOL:
        raise InvalidUpperBound(f"invalid upper bound: tbar={tbar} < path mass {need:.12g}")


def _check_cap(tree: ScenarioTree, node_id: Hashable, cap: int) -> None:
    n = tree.count_leaves(node_id)
    if n > cap:
        raise EnumerationCapError(f"tree too large for enumeration ({n} leaves > cap {cap})")


def future_reward_mass(tree: ScenarioTree) -> dict[Hashable, float]:
    """E[sum of r*p over periods strictly after the node | node], for every node."""
    out: dict[Hashable, float] = {}
    order = list(tree.iter_nodes())
    for node in reversed(order):
        out[node.id] = sum(
            tree.nodes[c].branch_prob * (tree.nodes[c].reward_mass + out[c])
            for c in tree.children[node.id]
        )
    return out


def past_masses(tree: ScenarioTree) -> dict[Hashable, float]:
    """Arrival mass accumulated along the path to each node, inclusive."""
    out: dict[Hashable, float] = {}
    for node in tree.iter_nodes():
        base = 0.0 if node.parent is None else out[node.parent]
        out[node.id] = base + node.mass
    return out


def thresholds_exact(
    tree: ScenarioTree, tbar: float | None = None, cap: int = DEFAULT_ENUM_CAP
) -> dict[Hashable, float]:
    """Exact ``h`` at every node of an enumerable tree."""
    tbar = tree.tbar if tbar is None else tbar
    _check_cap(tree, tree.root, cap)
    _check_tbar(tree, tbar)
    fut = future_reward_mass(tree)
    past = past_masses(tree)
    return {nid: fut[nid] / (1.0 + tbar - past[nid]) for nid in tree.nodes}


def threshold_exact(
    tree: ScenarioTree, node_id: Hashable, tbar: float, cap: int = DEFAULT_ENUM_CAP
) -> ThresholdEstimate:
    _check_cap(tree, node_id, cap)
    past = tree.past_mass(node_id)
    fut = 0.0
    worst = 0.0
    # Walk the subtree once: expected future reward and the largest future mass.
    stack = [(node_id, 1.0, 0.0)]
    while stack:
        nid, prob, mass = stack.pop()
        ch = tree.children[nid]
        if not ch:
            worst = max(worst, mass)
        for c in ch:
            cn = tree.nodes[c]
            q = prob * cn.branch_prob
            fut += q * cn.reward_mass
            stack.append((c, q, mass + cn.mass))
    if past + worst > tbar + TBAR_TOL:
        raise InvalidUpperBound(
            f"invalid upper bound: tbar={tbar} < path mass {past + worst:.12g}"
        )
    return ThresholdEstimate(fut / (1.0 + tbar - past), 0.0, 0)


def threshold_mc(
    tree: ScenarioTree,
    node_id: Hashable,
    tbar: float,
    n_paths: int,
    rng: np.random.Generator,
) -> ThresholdEstimate:
    """Sample-mean estimate of ``h`` from ``n_paths`` conditional continuations."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    past = tree.past_mass(node_id)
    denom = 1.0 + tbar - past
    if denom < 1.0 - TBAR_TOL:
        raise InvalidUpperBound(f"invalid upper bound: past mass {past:.12g} > tbar={tbar}")
    sums = np.empty(n_paths)
    for k in range(n_paths):
        acc = 0.0
        cur = node_id
        while tree.children[cur]:
            ch = tree.children[cur]
            if len(ch) == 1:
                cur = ch[0]
            else:
                w = np.array([tree.nodes[c].branch_prob for c in ch])
                j = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right"))
                cur = ch[min(j, len(ch) - 1)]
            acc += tree.nodes[cur].reward_mass
        sums[k] = acc
    vals = sums / denom
    stderr = float(vals.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return ThresholdEstimate(float(vals.mean()), stderr, n_paths)


def run_stp(
    tree: ScenarioTree,
    path: SamplePath,
    tbar: float,
    n_paths: int | None = None,
    rng: np.random.Generator | None = None,
    thresholds: Mapping[Hashable, float] | None = None,
) -> StpTrace:
    """Run the policy along one realised path.

    ``n_paths=None`` uses exact thresholds; an integer switches to Monte Carlo
    estimation with fresh continuations at every period. ``thresholds`` may
    supply precomputed values keyed by node id.
    """
    if n_paths is not None and rng is None:
        raise ValueError("Monte Carlo thresholds need an rng")
    T = len(path.arrivals)

    def h(nid: Hashable) -> float:
        if thresholds is not None:
            return thresholds[nid]
        if n_paths is None:
            return threshold_exact(tree, nid, tbar).value
        if not tree.children[nid]:
            return 0.0
        return threshold_mc(tree, nid, tbar, n_paths, rng).value

    seen = [h(path.node_ids[0])]
    cum = [0.0]
    accept, reward = T + 1, 0.0
    for t in range(1, T + 1):
        nid = path.node_ids[t]
        node = tree.nodes[nid]
        cum.append(cum[-1] + node.mass)
        seen.append(h(nid))
        i = path.arrivals[t - 1]
        if i is not None and node.rewards[i] >= seen[-1]:
            accept, reward = t, node.rewards[i]
            break
    return StpTrace(path, accept, reward, tuple(seen), tuple(cum))


def stp_values(
    tree: ScenarioTree,
    tbar: float | None = None,
    thresholds: Mapping[Hashable, float] | None = None,
    cap: int = DEFAULT_ENUM_CAP,
) -> dict[Hashable, float]:
    """Value-to-go of the policy at every node given the resource is unsold."""
    if thresholds is None:
        thresholds = thresholds_exact(tree, tbar, cap)
    else:
        _check_cap(tree, tree.root, cap)
    V: dict[Hashable, float] = {}
    for node in reversed(list(tree.iter_nodes())):
        cont = sum(tree.nodes[c].branch_prob * V[c] for c in tree.children[node.id])
        h = thresholds[node.id]
        gain = sum(
            p * (r - cont)
            for p, r in zip(node.arrival_probs, node.rewards)
            if p > 0.0 and r >= h
        )
        V[node.id] = gain + cont
    return V


def stp_value_recursion(
    tree: ScenarioTree, node_id: Hashable, tbar: float, cap: int = DEFAULT_ENUM_CAP
) -> float:
    return stp_values(tree, tbar, cap=cap)[node_id]


def offline_oracle(tree: ScenarioTree, path: SamplePath) -> float:
    """Hindsight value: the best realised reward on the path."""
    best = 0.0
    for nid, i in zip(path.node_ids[1:], path.arrivals):
        if i is not None:
            best = max(best, tree.nodes[nid].rewards[i])
    return best


def expected_offline_value(tree: ScenarioTree, cap: int = DEFAULT_ENUM_CAP) -> float:
    """Exact E[max realised reward], summed leaf by leaf.

    For a fixed node path the periods are independent; an item (t, i) is the
    maximum iff it arrives and no strictly-earlier-ranked item arrives in any
    other period.
    """
    from .scenario import enumerate_paths

    total = 0.0
    for pw in enumerate_paths(tree, cap=cap):
        nodes = [tree.nodes[nid] for nid in pw.node_ids[1:]]
        items = sorted(
            (
                (r, t, p)
                for t, n in enumerate(nodes)
                for p, r in zip(n.arrival_probs, n.rewards)
                if p > 0.0
            ),
            key=lambda x: -x[0],
        )
        higher = [0.0] * len(nodes)
        val = 0.0
        for r, t, p in items:
            others = 1.0
            for k, m in enumerate(higher):
                if k != t:
                    others *= 1.0 - m
            val += r * p * others
            higher[t] += p
        total += pw.probability * val
    return total


def reward_mass_bound(tree: ScenarioTree, cap: int = DEFAULT_ENUM_CAP) -> float:
    """E[sum_t sum_i r_it p_it(S_t)], an upper bound on the offline value."""
    _check_cap(tree, tree.root, cap)
    return future_reward_mass(tree)[tree.root]


def z_trace(
    tree: ScenarioTree,
    trace: StpTrace,
    thresholds: Sequence[float] | None = None,
) -> ZTrace:
    """Z(S_t) = h(S_t) + sum_{t'<=t} sum_i p (r - h)^+ for t = 0..stopping period.

    When the resource was never sold the trace runs to period T+1, where
    ``h`` is zero.
    """
    hs = list(trace.thresholds_seen if thresholds is None else thresholds)
    T = len(trace.path.arrivals)
    last = min(trace.accept_period, T + 1)
    z = [hs[0]]
    acc = 0.0
    for t in range(1, last + 1):
        if t == T + 1:
            z.append(acc)
            break
        node = tree.nodes[trace.path.node_ids[t]]
        ht = hs[t]
        acc += sum(p * max(r - ht, 0.0) for p, r in zip(node.arrival_probs, node.rewards))
        z.append(ht + acc)
    return ZTrace(tuple(z))


def _excess(node, h: float) -> float:
    return sum(p * max(r - h, 0.0) for p, r in zip(node.arrival_probs, node.rewards))


def check_submartingale(
    tree: ScenarioTree,
    tbar: float | None = None,
    thresholds: Mapping[Hashable, float] | None = None,
    cap: int = DEFAULT_ENUM_CAP,
) -> float:
    """Largest one-step drop Z(S_{t-1}) - E[Z(S_t) | S_{t-1}] over the tree.

    The accumulated excess up to ``t-1`` cancels, so each internal node only
    needs its own threshold and its children's.
    """
    if thresholds is None:
        thresholds = thresholds_exact(tree, tbar, cap)
    else:
        _check_cap(tree, tree.root, cap)
    worst = -math.inf
    for nid, ch in tree.children.items():
        if not ch:
            # Step T -> T+1: h(S_T) = 0 is replaced by h(S_{T+1}) = 0.
            worst = max(worst, thresholds[nid])
            continue
        nxt = sum(
            tree.nodes[c].branch_prob * (thresholds[c] + _excess(tree.nodes[c], thresholds[c]))
            for c in ch
        )
        worst = max(worst, thresholds[nid] - nxt)
    return worst


def check_optional_stopping(
    tree: ScenarioTree,
    tbar: float | None = None,
    thresholds: Mapping[Hashable, float] | None = None,
    cap: int = DEFAULT_ENUM_CAP,
) -> tuple[float, float]:
    """(E[V^STP], E[Z(S_tau)]) by a forward pass over all outcome paths.

    Outcome paths sharing a node prefix and an unsold resource are merged, so
    the pass is linear in the number of nodes.
    """
    if thresholds is None:
        thresholds = thresholds_exact(tree, tbar, cap)
    else:
        _check_cap(tree, tree.root, cap)
    # node -> (prob of reaching it unsold, accumulated excess through parent)
    state: dict[Hashable, tuple[float, float]] = {tree.root: (1.0, 0.0)}
    e_v = 0.0
    e_z = 0.0
    for node in tree.iter_nodes():
        q, acc = state.pop(node.id)
        h = thresholds[node.id]
        acc += _excess(node, h)
        sell = sum(p for p, r in zip(node.arrival_probs, node.rewards) if p > 0.0 and r >= h)
        e_v += q * sum(
            p * r for p, r in zip(node.arrival_probs, node.rewards) if p > 0.0 and r >= h
        )
        e_z += q * sell * (h + acc)
        ch = tree.children[node.id]
        if not ch:
            e_z += q * (1.0 - sell) * acc
        for c in ch:
            state[c] = (q * (1.0 - sell) * tree.nodes[c].branch_prob, acc)
    return e_v, e_z


def mixing_bound_check(a: float, b: float, p: Sequence[float], r: Sequence[float]) -> bool:
    """(a + sum p r) / (b + sum p) <= a/b + sum p (r - a/b)^+ for b >= 1, a, p, r >= 0."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    if a < 0 or b < 1 or p.shape != r.shape or (p < 0).any() or (r < 0).any():
        raise ValueError("mixing bound domain: a >= 0, b >= 1, p >= 0, r >= 0")
    return bool(mixing_bound_holds(np.array([a]), np.array([b]), p[None, :], r[None, :])[0])


def mixing_bound_holds(
    a: np.ndarray, b: np.ndarray, p: np.ndarray, r: np.ndarray, tol: float = 1e-12
) -> np.ndarray:
    """Vectorised check; ``p`` and ``r`` have shape (n, k)."""
    lhs = (a + (p * r).sum(axis=1)) / (b + p.sum(axis=1))
    ab = a / b
    rhs = ab + (p * np.maximum(r - ab[:, None], 0.0)).sum(axis=1)
    return lhs <= rhs + tol


def tight_instance(epsilon: float) -> ScenarioTree:
    """Two-period chain where the policy earns exactly 1/(2 - epsilon) of R.

    Period 1 offers reward 1 with probability 1 - epsilon; period 2 offers
    reward 1/epsilon with probability epsilon. The total mass is 1.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    tree = chain_tree([[1.0 - epsilon], [epsilon]], [[1.0], [1.0 / epsilon]])
    return ScenarioTree(
        nodes=tree.nodes,
        horizon=tree.horizon,
        num_types=tree.num_types,
        root=tree.root,
        children=tree.children,
        tbar_override=1.0,
    )


def prophet_report(
    tree: ScenarioTree,
    tbar: float | None = None,
    thresholds: Mapping[Hashable, float] | None = None,
    cap: int = DEFAULT_ENUM_CAP,
) -> dict[str, float]:
    """Exact verification summary for an enumerable tree."""
    tbar = tree.tbar if tbar is None else tbar
    if thresholds is None:
        thresholds = thresholds_exact(tree, tbar, cap)
    bound = reward_mass_bound(tree, cap)
    e_off = expected_offline_value(tree, cap)
    e_v, e_z = check_optional_stopping(tree, tbar, thresholds, cap)
    sub = check_submartingale(tree, tbar, thresholds, cap)
    return {
        "tbar": tbar,
        "reward_mass_bound": bound,
        "e_v_off": e_off,
        "e_v_stp": e_v,
        "ratio": e_v / e_off if e_off > 0 else 1.0,
        "ratio_to_bound": e_v / bound if bound > 0 else 1.0,
        "guarantee": 1.0 / (1.0 + tbar),
        "submartingale_max_violation": sub,
        "optional_stopping_gap": abs(e_v - e_z),
    }


def report_passes(report: Mapping[str, float], tol: float = 1e-9) -> bool:
    return (
        report["e_v_stp"] >= report["reward_mass_bound"] / (1.0 + report["tbar"]) - tol
        and report["reward_mass_bound"] >= report["e_v_off"] - tol
        and report["submartingale_max_violation"] <= tol
        and report["optional_stopping_gap"] <= tol
    )
