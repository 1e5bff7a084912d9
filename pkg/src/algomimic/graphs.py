"""Directed weighted graphs and the random families used for training data.

Edges are stored as a lexicographically sorted (src, dst) array with strictly
positive per-edge weights.  Generators draw from a caller-supplied
numpy Generator so every dataset is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fsio import read_ndjson, write_ndjson

GRAPH_SCHEMA = "graph-dataset"
GRAPH_VERSION = 1

FAMILY_KINDS = ("erdos_renyi", "ladder", "complete")


class GraphError(ValueError):
    pass


@dataclass
class Graph:
    """n nodes, sorted duplicate-free directed edges, positive weights."""

    n: int
    edges: np.ndarray  # [E, 2] int64
    weights: np.ndarray  # [E] float64

    def __post_init__(self):
        if self.n < 1:
            raise GraphError(f"graph needs at least one node, got n={self.n}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise GraphError(
                f"{edges.shape[0]} edges but {weights.shape[0]} weights"
            )
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n:
                raise GraphError(f"edge endpoint out of range for n={self.n}")
            if (edges[:, 0] == edges[:, 1]).any():
                raise GraphError("self-loops are not allowed")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            weights = weights[order]
            dup = (np.diff(edges[:, 0]) == 0) & (np.diff(edges[:, 1]) == 0)
            if dup.any():
                raise GraphError("duplicate edges are not allowed")
        if weights.size and (not np.isfinite(weights).all() or (weights <= 0).any()):
            raise GraphError("edge weights must be finite and strictly positive")
        edges.flags.writeable = False
        weights.flags.writeable = False
        self.edges = edges
        self.weights = weights

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def max_weight(self) -> float:
        return float(self.weights.max()) if self.weights.size else 1.0


@dataclass(frozen=True)
class GraphFamily:
    """A random graph distribution: topology kind plus weight range.

    p=None uses the density rule min(1, 2 ln n / n), which keeps expected
    degree logarithmic so single-source trees stay nontrivial at every size.
    """

    kind: str = "erdos_renyi"
    p: float | None = None
    weight_lo: float = 0.2
    weight_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise GraphError(f"unknown family kind {self.kind!r}")
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise GraphError(f"edge probability must be in [0, 1], got {self.p}")
        if not 0.0 < self.weight_lo <= self.weight_hi:
            raise GraphError(
                f"invalid weight range [{self.weight_lo}, {self.weight_hi}]"
            )

    def edge_probability(self, n: int) -> float:
        if self.p is not None:
            return self.p
        if n <= 1:
            return 1.0
        return min(1.0, 2.0 * math.log(n) / n)


def _all_ordered_pairs(n: int) -> np.ndarray:
    src, dst = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    pairs = np.stack([src.reshape(-1), dst.reshape(-1)], axis=1)
    return pairs[pairs[:, 0] != pairs[:, 1]]


def _ladder_pairs(n: int) -> np.ndarray:
    pairs = []
    for i in range(0, n - 1, 2):
        pairs.append((i, i + 1))  # rung
    for i in range(n - 2):
        pairs.append((i, i + 2))  # rail
    both = [(u, v) for u, v in pairs] + [(v, u) for u, v in pairs]
    return np.asarray(sorted(set(both)), dtype=np.int64).reshape(-1, 2)


def generate(family: GraphFamily, n: int, rng: np.random.Generator) -> Graph:
    """Draw one graph: topology first, then weights, in fixed rng order."""
    if n < 1:
        raise GraphError(f"cannot generate a graph with n={n}")
    if family.kind == "erdos_renyi":
        pairs = _all_ordered_pairs(n)
        keep = rng.random(pairs.shape[0]) < family.edge_probability(n)
        edges = pairs[keep]
    elif family.kind == "complete":
        edges = _all_ordered_pairs(n)
    else:
        edges = _ladder_pairs(n)
    weights = rng.uniform(family.weight_lo, family.weight_hi, size=edges.shape[0])
    return Graph(n=n, edges=edges, weights=weights)


def reachable_from(graph: Graph, source: int) -> np.ndarray:
    if not 0 <= source < graph.n:
        raise GraphError(f"source {source} out of range for n={graph.n}")
    out: list[list[int]] = [[] for _ in range(graph.n)]
    for u, v in graph.edges:
        out[int(u)].append(int(v))
    seen = np.zeros(graph.n, dtype=bool)
    seen[source] = True
    stack = [source]
    while stack:
        u = stack.pop()
        for v in out[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return seen


def ensure_source_reaches(
    graph: Graph, source: int, family: GraphFamily, rng: np.random.Generator
) -> Graph:
    """Augment so every node is reachable from `source`.

    Walks a random permutation chain starting at the source and inserts an
    edge only for chain nodes still unreachable at that point, so an
    already-covered graph comes back unchanged and the added count is minimal
    for the drawn chain.  New edges get fresh weights from the family range.
    """
    seen = reachable_from(graph, source)
    if seen.all():
        return graph
    perm = [source] + [int(v) for v in rng.permutation(graph.n) if v != source]
    edges = [tuple(e) for e in graph.edges.tolist()]
    weights = list(graph.weights.tolist())
    out: list[list[int]] = [[] for _ in range(graph.n)]
    for u, v in edges:
        out[u].append(v)

    def absorb(start: int) -> None:
        stack = [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            for v in out[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)

    for a, b in zip(perm[:-1], perm[1:]):
        if seen[b]:
            continue
        edges.append((a, b))
        weights.append(float(rng.uniform(family.weight_lo, family.weight_hi)))
        out[a].append(b)
        absorb(b)
    return Graph(n=graph.n, edges=np.asarray(edges), weights=np.asarray(weights))


def permute(graph: Graph, perm) -> Graph:
    """Relabel nodes by the bijection perm (node i becomes perm[i])."""
    p = np.asarray(perm, dtype=np.int64)
    if p.shape != (graph.n,) or not np.array_equal(np.sort(p), np.arange(graph.n)):
        raise GraphError(f"perm is not a bijection on {graph.n} nodes")
    if not graph.num_edges:
        return Graph(n=graph.n, edges=graph.edges, weights=graph.weights)
    edges = np.stack([p[graph.edges[:, 0]], p[graph.edges[:, 1]]], axis=1)
    return Graph(n=graph.n, edges=edges, weights=graph.weights)


# -- dataset files ----------------------------------------------------------


def save_graph_dataset(path, pairs: list[tuple[Graph, int]], extra_header: dict | None = None) -> None:
    header = {"schema": GRAPH_SCHEMA, "version": GRAPH_VERSION, "count": len(pairs)}
    if extra_header:
        header.update(extra_header)
    records = []
    for g, source in pairs:
        records.append(
            {
                "n": g.n,
                "edges": g.edges.tolist(),
                "weights": g.weights.tolist(),
                "source": int(source),
            }
        )
    write_ndjson(path, header, records)


def load_graph_dataset(path) -> list[tuple[Graph, int]]:
    _, records = read_ndjson(path, GRAPH_SCHEMA, GRAPH_VERSION)
    out = []
    for r in records:
        g = Graph(n=int(r["n"]), edges=np.asarray(r["edges"]).reshape(-1, 2), weights=np.asarray(r["weights"]))
        out.append((g, int(r["source"])))
    return out
