"""Independent lattice oracles: exhaustive path enumeration and DAG sweeps.

These share no code with the heap-based planner kernel; they recompute
edge validity from the lattice definition and walk every feasible path
(enumeration) or relax layers in topological order (sweep).
"""

import numpy as np


def iter_successors(lat, t, d, k):
    spec = lat.spec
    for k2 in range(max(0, k + spec.dk_min), min(lat.n_v - 1, k + spec.dk_max) + 1):
        nd = d + k + k2
        if nd > lat.d_sink:
            continue
        if nd == lat.d_sink and t + 1 < lat.t_lo:
            continue
        yield nd, k2


def enumerate_paths_min_cost(lat, count_paths=False):
    """Pure exhaustive DFS over all feasible source->sink paths."""
    best = np.inf
    n_paths = 0
    stack = [(0, 0, lat.k_src, 0.0)]
    while stack:
        t, d, k, cost = stack.pop()
        if d == lat.d_sink:
            if t >= lat.t_lo:
                n_paths += 1
                if cost < best:
                    best = cost
            continue
        if t + 1 > lat.t_hi:
            continue
        for nd, k2 in iter_successors(lat, t, d, k):
            stack.append((t + 1, nd, k2, cost + lat.cost_table[k, k2]))
    if count_paths:
        return best, n_paths
    return best


def sweep_min_cost(lat):
    """Topological (time-layer) relaxation; exact on this DAG."""
    INF = np.inf
    dist = {(0, 0, lat.k_src): 0.0}
    best = INF
    for t in range(lat.t_hi):
        nxt = {}
        for (tt, d, k), cost in dist.items():
            if tt != t or d == lat.d_sink:
                continue
            for nd, k2 in iter_successors(lat, t, d, k):
                c = cost + lat.cost_table[k, k2]
                key = (t + 1, nd, k2)
                if c < nxt.get(key, INF):
                    nxt[key] = c
        for key, cost in nxt.items():
            if cost < dist.get(key, INF):
                dist[key] = cost
            if key[1] == lat.d_sink and key[0] >= lat.t_lo:
                best = min(best, dist[key])
    return best


def reachable_counts_reference(lat):
    """Independent reachability BFS for node/edge counting."""
    seen = {(0, 0, lat.k_src)}
    frontier = [(0, 0, lat.k_src)]
    edges = 0
    while frontier:
        new = []
        for (t, d, k) in frontier:
            if d == lat.d_sink or t + 1 > lat.t_hi:
                continue
            for nd, k2 in iter_successors(lat, t, d, k):
                edges += 1
                node = (t + 1, nd, k2)
                if node not in seen:
                    seen.add(node)
                    new.append(node)
        frontier = new
    return len(seen), edges
