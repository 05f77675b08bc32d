"""Scenario trees for the exogenous state process and per-period arrivals.

A tree node at period ``t`` carries the arrival probabilities ``p[i]`` of each
customer type and the reward ``r[i]`` of selling to that type. The root is a
dummy period-0 node with no arrivals. A root-to-leaf walk is one sample path.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

PROB_TOL = 1e-12
DEFAULT_ENUM_CAP = 10**6


class TreeError(ValueError):
    """Invalid scenario tree input."""

    def __init__(self, message: str, node_id: Hashable | None = None):
        super().__init__(message)
        self.node_id = node_id


class EnumerationCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioNode:
    id: Hashable
    parent: Hashable | None
    period: int
    branch_prob: float
    arrival_probs: tuple[float, ...]
    rewards: tuple[float, ...]

    @property
    def mass(self) -> float:
        return float(sum(self.arrival_probs))

    @property
    def reward_mass(self) -> float:
        return float(sum(p * r for p, r in zip(self.arrival_probs, self.rewards)))


@dataclass(frozen=True)
class SamplePath:
    node_ids: tuple[Hashable, ...]
    arrivals: tuple[int | None, ...]
    uniforms: tuple[float, ...]

    def __post_init__(self):
        if len(self.arrivals) != len(self.node_ids) - 1:
            raise ValueError("one arrival slot per period required")


@dataclass(frozen=True)
class PathWeight:
    node_ids: tuple[Hashable, ...]
    probability: float


@dataclass(frozen=True)
class ScenarioTree:
    nodes: dict[Hashable, ScenarioNode]
    horizon: int
    num_types: int
    root: Hashable
    children: dict[Hashable, tuple[Hashable, ...]] = field(repr=False)
    tbar_override: float | None = None

    def node(self, node_id: Hashable) -> ScenarioNode:
        return self.nodes[node_id]

    def path_to(self, node_id: Hashable) -> list[ScenarioNode]:
        """Nodes from the root down to ``node_id`` inclusive."""
        out = []
        cur: Hashable | None = node_id
        while cur is not None:
            n = self.nodes[cur]
            out.append(n)
            cur = n.parent
        return out[::-1]

    def past_mass(self, node_id: Hashable) -> float:
        return sum(n.mass for n in self.path_to(node_id))

    def leaves(self) -> list[Hashable]:
        return [nid for nid, ch in self.children.items() if not ch]

    def count_leaves(self, node_id: Hashable | None = None) -> int:
        stack = [self.root if node_id is None else node_id]
        count = 0
        while stack:
            nid = stack.pop()
            ch = self.children[nid]
            if ch:
                stack.extend(ch)
            else:
                count += 1
        return count

    def iter_nodes(self) -> Iterable[ScenarioNode]:
        """Nodes in breadth-first (period) order."""
        frontier = [self.root]
        while frontier:
            nxt = []
            for nid in frontier:
                yield self.nodes[nid]
                nxt.extend(self.children[nid])
            frontier = nxt

    @property
    def tbar(self) -> float:
        if self.tbar_override is not None:
            return self.tbar_override
        return tbar_upper_bound(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "horizon": self.horizon,
            "num_types": self.num_types,
            "nodes": [
                {
                    "id": n.id,
                    "parent": n.parent,
                    "branch_prob": n.branch_prob,
                    "p": list(n.arrival_probs),
                    "r": list(n.rewards),
                }
                for n in self.iter_nodes()
            ],
        }


def build_tree(
    node_specs: Sequence[dict[str, Any]],
    horizon: int | None = None,
    num_types: int | None = None,
    tbar_override: float | None = None,
) -> ScenarioTree:
    """Validate a list of node records and assemble a :class:`ScenarioTree`.

    Each record holds ``id``, ``parent`` (``None`` for the root),
    ``branch_prob``, ``p`` and ``r``. The root may omit ``p``/``r``; it is
    stored with zero arrivals. Inputs are never renormalised: any violated
    invariant raises :class:`TreeError` naming the offending node.
    """
    specs = list(node_specs)
    if not specs:
        raise TreeError("tree has no nodes")
    ids = [s["id"] for s in specs]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise TreeError(f"duplicate node id {dup!r}", dup)
    by_id = {s["id"]: s for s in specs}
    roots = [s["id"] for s in specs if s.get("parent") is None]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}")
    root = roots[0]

    if num_types is None:
        widths = {len(s.get("p", [])) for s in specs if s["id"] != root}
        num_types = max(widths) if widths else 0

    children: dict[Hashable, list[Hashable]] = {i: [] for i in ids}
    for s in specs:
        par = s.get("parent")
        if par is None:
            continue
        if par not in by_id:
            raise TreeError(f"node {s['id']!r}: unknown parent {par!r}", s["id"])
        children[par].append(s["id"])

    nodes: dict[Hashable, ScenarioNode] = {}
    period = {root: 0}
    frontier = [root]
    while frontier:
        nxt = []
        for nid in frontier:
            for c in children[nid]:
                period[c] = period[nid] + 1
                nxt.append(c)
        frontier = nxt
    if len(period) != len(specs):
        orphan = next(i for i in ids if i not in period)
        raise TreeError(f"node {orphan!r} is not reachable from the root (cycle?)", orphan)

    for s in specs:
        nid = s["id"]
        is_root = nid == root
        p = tuple(float(v) for v in s.get("p", [0.0] * num_types))
        r = tuple(float(v) for v in s.get("r", [0.0] * num_types))
        if is_root:
            if any(v != 0.0 for v in p):
                raise TreeError("root node must carry zero arrival probabilities", nid)
            p = (0.0,) * num_types
            r = (0.0,) * num_types
            bp = float(s.get("branch_prob", 1.0))
            if bp != 1.0:
                raise TreeError("root node must have branch_prob 1", nid)
        else:
            bp = float(s["branch_prob"])
        if len(p) != num_types or len(r) != num_types:
            raise TreeError(
                f"node {nid!r}: expected {num_types} types, got p={len(p)} r={len(r)}", nid
            )
        if not 0.0 <= bp <= 1.0:
            raise TreeError(f"node {nid!r}: branch probability {bp} outside [0, 1]", nid)
        if any(v < 0.0 or v > 1.0 for v in p):
            raise TreeError(f"node {nid!r}: arrival probability outside [0, 1]", nid)
        if sum(p) > 1.0 + PROB_TOL:
            raise TreeError(
                f"node {nid!r}: arrival probabilities exceed 1 (sum {sum(p):.12g})", nid
            )
        if any(v < 0.0 for v in r):
            raise TreeError(f"node {nid!r}: negative reward", nid)
        nodes[nid] = ScenarioNode(nid, s.get("parent"), period[nid], bp, p, r)

    for nid, ch in children.items():
        if ch:
            total = sum(nodes[c].branch_prob for c in ch)
            if abs(total - 1.0) > PROB_TOL:
                raise TreeError(
                    f"node {nid!r}: branch probabilities sum {total:.12g} != 1", nid
                )

    depths = {period[nid] for nid, ch in children.items() if not ch}
    if len(depths) != 1:
        raise TreeError(f"inconsistent leaf depths {sorted(depths)}")
    depth = depths.pop()
    if horizon is not None and depth != horizon:
        raise TreeError(f"leaf depth {depth} does not match horizon {horizon}")

    tree = ScenarioTree(
        nodes=nodes,
        horizon=depth,
        num_types=num_types,
        root=root,
        children={k: tuple(v) for k, v in children.items()},
        tbar_override=tbar_override,
    )
    if tbar_override is not None and tbar_override < tbar_upper_bound(tree) - 1e-9:
        raise TreeError(
            f"tbar override {tbar_override} below the realised path mass "
            f"{tbar_upper_bound(tree):.12g}"
        )
    return tree


def load_tree(path: str | Path) -> ScenarioTree:
    """Read a tree JSON document. Probabilities are parsed as decimals."""
    text = Path(path).read_text()
    doc = json.loads(text, parse_float=Decimal)
    return tree_from_dict(doc)


def tree_from_dict(doc: dict[str, Any]) -> ScenarioTree:
    for key in ("horizon", "num_types", "nodes"):
        if key not in doc:
            raise TreeError(f"missing field {key!r}")
    specs = []
    for raw in doc["nodes"]:
        if "id" not in raw:
            raise TreeError("node without id")
        spec = {
            "id": raw["id"],
            "parent": raw.get("parent"),
            "branch_prob": float(raw.get("branch_prob", 1)),
        }
        # Decimal -> float rounds once, correctly.
        for key in ("p", "r"):
            if key in raw:
                spec[key] = [float(v) for v in raw[key]]
        specs.append(spec)
    tbar = doc.get("tbar")
    return build_tree(
        specs,
        horizon=int(doc["horizon"]),
        num_types=int(doc["num_types"]),
        tbar_override=None if tbar is None else float(tbar),
    )


def dump_tree(tree: ScenarioTree, path: str | Path) -> None:
    doc = tree.to_dict()
    if tree.tbar_override is not None:
        doc["tbar"] = tree.tbar_override
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def sample_arrival(node: ScenarioNode, u: float) -> int | None:
    """Type index ``i`` with ``u`` in ``[sum p[:i], sum p[:i+1])``, else None."""
    return interval_pick(node.arrival_probs, u)


def interval_pick(probs: Sequence[float], u: float) -> int | None:
    lo = 0.0
    for i, p in enumerate(probs):
        hi = lo + p
        if lo <= u < hi:
            return i
        lo = hi
    return None


def sample_path(tree: ScenarioTree, rng: np.random.Generator) -> SamplePath:
    """Walk root to leaf choosing children by branch probability.

    Two uniforms are drawn per period: one for the child, one for arrivals.
    """
    ids = [tree.root]
    arrivals: list[int | None] = []
    uniforms: list[float] = []
    cur = tree.root
    for _ in range(tree.horizon):
        ch = tree.children[cur]
        cur = _pick_child(tree, ch, rng.random())
        u = float(rng.random())
        ids.append(cur)
        arrivals.append(sample_arrival(tree.nodes[cur], u))
        uniforms.append(u)
    return SamplePath(tuple(ids), tuple(arrivals), tuple(uniforms))


def _pick_child(tree: ScenarioTree, children: Sequence[Hashable], w: float) -> Hashable:
    if len(children) == 1:
        return children[0]
    cum = np.cumsum([tree.nodes[c].branch_prob for c in children])
    k = bisect.bisect_right(cum.tolist(), w * cum[-1])
    return children[min(k, len(children) - 1)]


def enumerate_paths(
    tree: ScenarioTree, start: Hashable | None = None, cap: int = DEFAULT_ENUM_CAP
) -> list[PathWeight]:
    """All root-to-leaf (or ``start``-to-leaf) node sequences with probabilities.

    Probabilities are conditional on reaching ``start``.
    """
    start = tree.root if start is None else start
    n = tree.count_leaves(start)
    if n > cap:
        raise EnumerationCapError(f"tree too large for enumeration ({n} leaves > cap {cap})")
    out: list[PathWeight] = []
    stack = [((start,), 1.0)]
    while stack:
        ids, prob = stack.pop()
        ch = tree.children[ids[-1]]
        if not ch:
            out.append(PathWeight(ids, prob))
            continue
        for c in reversed(ch):
            stack.append((ids + (c,), prob * tree.nodes[c].branch_prob))
    return out


def tbar_upper_bound(tree: ScenarioTree) -> float:
    """Largest total arrival mass over all root-to-leaf paths."""
    best = 0.0
    stack = [(tree.root, 0.0)]
    while stack:
        nid, acc = stack.pop()
        acc += tree.nodes[nid].mass
        ch = tree.children[nid]
        if not ch:
            best = max(best, acc)
        else:
            stack.extend((c, acc) for c in ch)
    return best


def chain_tree(probs: Sequence[Sequence[float]], rewards: Sequence[Sequence[float]]) -> ScenarioTree:
    """Deterministic-scenario tree: one node per period."""
    specs: list[dict[str, Any]] = [{"id": 0, "parent": None}]
    for t, (p, r) in enumerate(zip(probs, rewards), start=1):
        specs.append({"id": t, "parent": t - 1, "branch_prob": 1.0, "p": list(p), "r": list(r)})
    return build_tree(specs, num_types=len(probs[0]) if probs else 0)


def random_tree(
    rng: np.random.Generator,
    horizon: int,
    num_types: int,
    max_branches: int = 3,
    mass_scale: float = 1.0,
    zero_prob: float = 0.0,
) -> ScenarioTree:
    """Random enumerable tree used by property sweeps and the acceptance suite."""
    specs: list[dict[str, Any]] = [{"id": 0, "parent": None}]
    next_id = 1
    frontier = [0]
    for _ in range(horizon):
        nxt = []
        for par in frontier:
            k = int(rng.integers(1, max_branches + 1))
            bp = rng.dirichlet(np.ones(k))
            bp[-1] = 1.0 - bp[:-1].sum()
            for b in bp:
                raw = rng.dirichlet(np.ones(num_types + 1))[:num_types] * mass_scale
                if zero_prob and rng.random() < zero_prob:
                    raw = np.zeros(num_types)
                specs.append(
                    {
                        "id": next_id,
                        "parent": par,
                        "branch_prob": float(b),
                        "p": raw.tolist(),
                        "r": rng.exponential(1.0, num_types).tolist(),
                    }
                )
                nxt.append(next_id)
                next_id += 1
        frontier = nxt
    return build_tree(specs, num_types=num_types)


def unit_mass_tree(
    rng: np.random.Generator, horizon: int, num_types: int, max_branches: int = 3
) -> ScenarioTree:
    """Random tree whose every root-to-leaf path carries total mass exactly 1.

    Period 1 has a single node (deterministic S_1); tbar is fixed at 1.
    """
    specs: list[dict[str, Any]] = [{"id": 0, "parent": None}]
    next_id = 1
    frontier = [(0, 1.0)]  # (node, mass still to place)
    for t in range(1, horizon + 1):
        nxt = []
        for par, left in frontier:
            k = 1 if t == 1 else int(rng.integers(1, max_branches + 1))
            bp = rng.dirichlet(np.ones(k))
            bp[-1] = 1.0 - bp[:-1].sum()
            for b in bp:
                m = max(left, 0.0) if t == horizon else left * float(rng.random())
                p = rng.dirichlet(np.ones(num_types)) * m
                specs.append(
                    {
                        "id": next_id,
                        "parent": par,
                        "branch_prob": float(b),
                        "p": p.tolist(),
                        "r": rng.exponential(1.0, num_types).tolist(),
                    }
                )
                nxt.append((next_id, left - float(p.sum())))
                next_id += 1
        frontier = nxt
    return build_tree(specs, num_types=num_types, tbar_override=1.0)
