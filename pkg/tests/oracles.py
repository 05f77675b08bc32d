"""Brute-force reference implementations used to freeze expected values.

Nothing here calls the library's algorithms; only plain data is shared.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def _paths(tree, start):
    """(node ids from start to leaf, conditional probability)."""
    ch = tree.children[start]
    if not ch:
        yield (start,), 1.0
        return
    for c in ch:
        for rest, pr in _paths(tree, c):
            yield (start,) + rest, tree.nodes[c].branch_prob * pr


def _depth_path(tree, nid):
    out = [nid]
    while tree.nodes[out[-1]].parent is not None:
        out.append(tree.nodes[out[-1]].parent)
    return out[::-1]


def brute_threshold(tree, nid, tbar):
    past = sum(sum(tree.nodes[n].arrival_probs) for n in _depth_path(tree, nid))
    num = 0.0
    for ids, pr in _paths(tree, nid):
        fut = 0.0
        for n in ids[1:]:
            node = tree.nodes[n]
            fut += sum(p * r for p, r in zip(node.arrival_probs, node.rewards))
        num += pr * fut
    return num / (1.0 + tbar - past)


def brute_outcomes(tree):
    """Every (node path, arrival vector, probability) with positive probability."""
    for ids, pr in _paths(tree, tree.root):
        choices = []
        for n in ids[1:]:
            node = tree.nodes[n]
            opts = [(i, p) for i, p in enumerate(node.arrival_probs) if p > 0]
            rest = 1.0 - sum(node.arrival_probs)
            if rest > 0:
                opts.append((None, rest))
            choices.append(opts)
        for combo in itertools.product(*choices):
            prob = pr * math.prod(p for _, p in combo)
            yield ids, tuple(i for i, _ in combo), prob


def brute_stp_and_offline(tree, tbar):
    """(E[V^STP], E[V^OFF], E[sum r p]) by full outcome enumeration."""
    h = {nid: brute_threshold(tree, nid, tbar) for nid in tree.nodes}
    e_v = e_off = 0.0
    for ids, arr, prob in brute_outcomes(tree):
        got = best = 0.0
        sold = False
        for n, i in zip(ids[1:], arr):
            if i is None:
                continue
            r = tree.nodes[n].rewards[i]
            best = max(best, r)
            if not sold and r >= h[n]:
                got, sold = r, True
        e_v += prob * got
        e_off += prob * best
    mass = 0.0
    for ids, pr in _paths(tree, tree.root):
        mass += pr * sum(
            sum(p * r for p, r in zip(tree.nodes[n].arrival_probs, tree.nodes[n].rewards))
            for n in ids
        )
    return e_v, e_off, mass


def brute_matching(demand, supply, reward):
    """Exhaustive max-weight matching; demand/supply are per-period type or None."""
    dem = [(i, t) for t, i in enumerate(demand) if i is not None]
    sup = [(j, s) for s, j in enumerate(supply) if j is not None]

    def go(k, used):
        if k == len(dem):
            return 0.0
        i, t = dem[k]
        best = go(k + 1, used)
        for b, (j, s) in enumerate(sup):
            if b in used or s > t:
                continue
            r = reward[i, j, t, s]
            if r > 0:
                best = max(best, r + go(k + 1, used | {b}))
        return best

    return go(0, frozenset())


def vertex_lp(A, b, c):
    """max c x s.t. A x <= b, x >= 0 by enumerating basic solutions."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    n = A.shape[1]
    G = np.vstack([A, -np.eye(n)])
    h = np.concatenate([b, np.zeros(n)])
    best = -math.inf
    for rows in itertools.combinations(range(G.shape[0]), n):
        M = G[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, h[list(rows)])
        if (G @ x <= h + 1e-9).all():
            best = max(best, float(c @ x))
    return best


def lp3_matrices(lam, mu, reward):
    """Dense LP3 data over edges with r > 0 and s <= t."""
    I, T = lam.shape
    J = mu.shape[0]
    edges = [
        (i, j, t, s)
        for i in range(I)
        for j in range(J)
        for t in range(T)
        for s in range(t + 1)
        if reward[i, j, t, s] > 0
    ]
    rows, rhs = [], []
    for j in range(J):
        for s in range(T):
            rows.append([1.0 if (e[1], e[3]) == (j, s) else 0.0 for e in edges])
            rhs.append(mu[j, s])
    for i in range(I):
        for t in range(T):
            rows.append([1.0 if (e[0], e[2]) == (i, t) else 0.0 for e in edges])
            rhs.append(lam[i, t])
    for k, (i, j, t, s) in enumerate(edges):
        row = [0.0] * len(edges)
        row[k] = 1.0
        rows.append(row)
        rhs.append(lam[i, t] * mu[j, s])
    c = [reward[e] for e in edges]
    return edges, np.array(rows).reshape(-1, len(edges)), np.array(rhs), np.array(c)


def exact_offline_expectation(lam, mu, reward):
    """E[V^OFF] over every joint arrival realisation."""
    I, T = lam.shape
    J = mu.shape[0]
    dem_opts = [[(i, lam[i, t]) for i in range(I)] + [(None, 1 - lam[:, t].sum())] for t in range(T)]
    sup_opts = [[(j, mu[j, s]) for j in range(J)] + [(None, 1 - mu[:, s].sum())] for s in range(T)]
    total = 0.0
    for d in itertools.product(*dem_opts):
        pd = math.prod(p for _, p in d)
        if pd <= 0:
            continue
        for s_ in itertools.product(*sup_opts):
            ps = math.prod(p for _, p in s_)
            if ps <= 0:
                continue
            total += pd * ps * brute_matching([x for x, _ in d], [x for x, _ in s_], reward)
    return total


def exact_admission_threshold(lam, mu, reward, x, unit, supply_history, t):
    """h_js(S_t) with tbar = 1 by enumerating all future supply outcomes."""
    I, T = lam.shape
    J = mu.shape[0]
    j0, s0 = unit
    W = x / mu[None, :, None, :]

    def routed(hist, tp):
        mass = gain = 0.0
        for i in range(I):
            ys = [(jj, ss, W[i, jj, tp, ss]) for ss, jj in enumerate(hist[: tp + 1]) if jj is not None]
            tot = sum(y for *_, y in ys)
            if tot <= 0:
                continue
            sc = min(lam[i, tp], tot) / tot
            for jj, ss, y in ys:
                if (jj, ss) == (j0, s0):
                    mass += sc * y
                    gain += sc * y * reward[i, jj, tp, ss]
        return mass, gain

    hist = list(supply_history[: t + 1])
    past = sum(routed(hist, tp)[0] for tp in range(s0, t + 1))
    opts = [
        [(jj, mu[jj, ss]) for jj in range(J)] + [(None, 1 - mu[:, ss].sum())]
        for ss in range(t + 1, T)
    ]
    num = 0.0
    for combo in itertools.product(*opts):
        pr = math.prod(p for _, p in combo)
        full = hist + [c for c, _ in combo]
        num += pr * sum(routed(full, tp)[1] for tp in range(t + 1, T))
    return num / (2.0 - past)
