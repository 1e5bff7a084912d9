"""Independent reference computations the test suite checks against.

Nothing in here imports from the package's algorithm implementations beyond
the Tensor container itself; each oracle recomputes the quantity under test
by a different method (central differences, pruned path enumeration, DFS).
"""

from __future__ import annotations

import numpy as np


def finite_difference(f, tensors, eps: float = 1e-5):
    """Central-difference gradients of the scalar callable f().

    f must recompute its value from the current .data of each tensor; entries
    are perturbed in place one at a time.
    """
    def value():
        out = f()
        return out.data.item() if hasattr(out, "data") else float(out)

    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def assert_grads_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape, (analytic.shape, numeric.shape)
    ok = np.abs(analytic - numeric) <= atol + rtol * np.maximum(
        np.abs(analytic), np.abs(numeric)
    )
    assert ok.all(), (
        f"gradient mismatch at {np.argwhere(~ok)[:5]}: "
        f"analytic {analytic[~ok][:5]} vs numeric {numeric[~ok][:5]}"
    )


def shortest_distances_by_enumeration(n, edges, weights, source):
    """Exact single-source distances by exhaustive path search.

    Depth-first extension of simple paths, pruned only when a prefix is
    already no better than the best known distance to its endpoint (such a
    prefix cannot start a shortest path under positive weights, so pruning
    keeps the search exhaustive over candidates).  Returns (dist, reached)
    with dist 0.0 on unreached nodes.
    """
    out_edges: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (u, v), w in zip(edges, weights):
        out_edges[u].append((v, float(w)))
    best = {source: 0.0}
    stack = [(source, 0.0)]
    while stack:
        node, length = stack.pop()
        if length > best.get(node, np.inf):
            continue
        for v, w in out_edges[node]:
            cand = length + w
            if cand < best.get(v, np.inf):
                best[v] = cand
                stack.append((v, cand))
    dist = np.zeros(n)
    reached = np.zeros(n, dtype=bool)
    for node, d in best.items():
        dist[node] = d
        reached[node] = True
    return dist, reached


def predecessors_from_distances(n, edges, weights, source, dist, reached):
    """Lowest-index optimal parent per reached node, from exact distances."""
    pred = np.arange(n, dtype=np.int64)
    for j in range(n):
        if not reached[j] or j == source:
            continue
        best_i, best_val = None, np.inf
        for (u, v), w in zip(edges, weights):
            if v != j or not reached[u]:
                continue
            cand = dist[u] + float(w)
            if cand < best_val - 1e-12 or (abs(cand - best_val) <= 1e-12 and (best_i is None or u < best_i)):
                best_i, best_val = u, cand
        pred[j] = best_i
    return pred


def reachable_by_dfs(n, edges, source):
    """Plain iterative DFS reachability."""
    out_edges: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        out_edges[u].append(v)
    seen = np.zeros(n, dtype=bool)
    seen[source] = True
    stack = [source]
    while stack:
        u = stack.pop()
        for v in out_edges[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return seen


def hop_distances_by_dfs(n, edges, source):
    """Hop counts via repeated DFS level checks (deliberately naive)."""
    out_edges: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        out_edges[u].append(v)
    hops = np.full(n, -1, dtype=np.int64)
    frontier = {source}
    level = 0
    seen = {source}
    while frontier:
        for u in frontier:
            hops[u] = level
        nxt = set()
        for u in frontier:
            for v in out_edges[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.add(v)
        frontier = nxt
        level += 1
    return hops
