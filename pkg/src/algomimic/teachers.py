"""Classical graph algorithms executed step by step, with full state traces.

Two teachers: single-source shortest paths via synchronous parallel edge
relaxation (one sweep per step, so step t holds the best distances using at
most t edges), and breadth-first reachability (step t covers nodes within t
hops).  Both emit one HintStep per step; the step sequence is what models are
trained to imitate.

Unreached nodes carry reached=False plus a 0.0 distance sentinel instead of a
literal infinity, so downstream supervision targets are always finite.
Predecessors are self-valued wherever undefined (unreached nodes, and the
source).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fsio import read_ndjson, write_ndjson
from .graphs import Graph

TRACE_SCHEMA = "trace-dataset"
TRACE_VERSION = 1

BELLMAN_FORD = "bellman_ford"
BFS = "bfs"
TEACHER_NAMES = (BELLMAN_FORD, BFS)


class PreconditionError(ValueError):
    pass


@dataclass
class AbstractInput:
    """A graph plus a source index.  Deliberately unvalidated: the
    precondition checker reports problems as values instead."""

    graph: Graph
    source: int


@dataclass
class HintStep:
    dist: np.ndarray  # [n] float64, 0.0 sentinel where not reached
    reached: np.ndarray  # [n] bool
    pred: np.ndarray  # [n] int64, self where undefined
    reach: np.ndarray  # [n] bool

    def __eq__(self, other) -> bool:
        return (
            np.array_equal(self.dist, other.dist)
            and np.array_equal(self.reached, other.reached)
            and np.array_equal(self.pred, other.pred)
            and np.array_equal(self.reach, other.reach)
        )

    def copy(self) -> "HintStep":
        return HintStep(
            self.dist.copy(), self.reached.copy(), self.pred.copy(), self.reach.copy()
        )


@dataclass
class Trace:
    input: AbstractInput
    steps: list[HintStep]  # steps[0] is the initialization state

    @property
    def output(self) -> HintStep:
        return self.steps[-1]


@dataclass
class Check:
    ok: bool
    description: str = ""

    def __bool__(self) -> bool:
        return self.ok


def init_step(x: AbstractInput) -> HintStep:
    n = x.graph.n
    dist = np.zeros(n)
    reached = np.zeros(n, dtype=bool)
    reached[x.source] = True
    pred = np.arange(n, dtype=np.int64)
    return HintStep(dist, reached, pred, reached.copy())


def _in_edges(graph: Graph) -> list[list[tuple[int, float]]]:
    incoming: list[list[tuple[int, float]]] = [[] for _ in range(graph.n)]
    # edge array is sorted by (src, dst): per node the sources arrive ascending
    for (u, v), w in zip(graph.edges.tolist(), graph.weights.tolist()):
        incoming[v].append((u, float(w)))
    return incoming


def _relax_sweep(x: AbstractInput, step: HintStep, incoming) -> HintStep:
    n = x.graph.n
    nxt = init_step(x)
    for j in range(n):
        if j == x.source:
            continue
        best_i, best_val = -1, np.inf
        for i, w in incoming[j]:
            if not step.reached[i]:
                continue
            val = step.dist[i] + w
            if val < best_val:  # sources ascend, so ties keep the lowest index
                best_i, best_val = i, val
        if best_i >= 0:
            nxt.dist[j] = best_val
            nxt.reached[j] = True
            nxt.pred[j] = best_i
    nxt.reach = nxt.reached.copy()
    return nxt


def _bfs_sweep(x: AbstractInput, step: HintStep, incoming) -> HintStep:
    nxt = step.copy()
    for j in range(x.graph.n):
        if step.reach[j]:
            continue
        for i, _ in incoming[j]:
            if step.reach[i]:  # first hit is the lowest-index parent
                nxt.reach[j] = True
                nxt.reached[j] = True
                nxt.dist[j] = step.dist[i] + 1.0
                nxt.pred[j] = i
                break
    return nxt


def _run_trace(teacher: str, x: AbstractInput, sweep) -> Trace:
    check = check_precondition(teacher, x)
    if not check.ok:
        raise PreconditionError(check.description)
    incoming = _in_edges(x.graph)
    steps = [init_step(x)]
    # budget counts the initialization entry; convergence before the budget
    # appends one confirming duplicate so the last two steps match.
    while len(steps) < x.graph.n:
        nxt = sweep(x, steps[-1], incoming)
        steps.append(nxt)
        if nxt == steps[-2]:
            break
    return Trace(input=x, steps=steps)


def check_precondition(teacher: str, x: AbstractInput) -> Check:
    """Teacher preconditions as a value; trace functions raise on failure."""
    _require_teacher(teacher)
    g = x.graph
    if not 0 <= int(x.source) < g.n:
        return Check(False, f"source {x.source} out of range for n={g.n}")
    if teacher == BELLMAN_FORD:
        weights = np.asarray(g.weights, dtype=np.float64)
        if weights.size:
            if not np.isfinite(weights).all():
                bad = int(np.flatnonzero(~np.isfinite(weights))[0])
                u, v = g.edges[bad]
                return Check(False, f"non-finite weight on edge ({u}, {v})")
            if (weights <= 0).any():
                bad = int(np.flatnonzero(weights <= 0)[0])
                u, v = g.edges[bad]
                return Check(
                    False, f"nonpositive weight {weights[bad]} on edge ({u}, {v})"
                )
    return Check(True)


def bellman_ford_trace(x: AbstractInput) -> Trace:
    """Synchronous shortest-path relaxation from the source, one sweep per step."""
    return _run_trace(BELLMAN_FORD, x, _relax_sweep)


def bfs_trace(x: AbstractInput) -> Trace:
    """Breadth-first reachability; parents are the lowest-index discovered neighbor."""
    return _run_trace(BFS, x, _bfs_sweep)


TEACHERS = {BELLMAN_FORD: bellman_ford_trace, BFS: bfs_trace}


def permute_hint(step: HintStep, perm) -> HintStep:
    """Relabel a state by the same bijection used on the graph's nodes."""
    p = np.asarray(perm, dtype=np.int64)
    n = p.shape[0]
    dist = np.zeros(n)
    reached = np.zeros(n, dtype=bool)
    pred = np.zeros(n, dtype=np.int64)
    reach = np.zeros(n, dtype=bool)
    dist[p] = step.dist
    reached[p] = step.reached
    pred[p] = p[step.pred]
    reach[p] = step.reach
    return HintStep(dist, reached, pred, reach)


def _require_teacher(teacher: str) -> None:
    if teacher not in TEACHERS:
        raise ValueError(f"unknown teacher {teacher!r}; expected one of {TEACHER_NAMES}")


def check_postcondition(teacher: str, x: AbstractInput, out: HintStep, tol: float = 1e-9) -> Check:
    """Tree validity plus local optimality of a final state.

    Works on any candidate output, model predictions included: the checks are
    purely local (edge existence, parent distance consistency, and the
    relaxation inequality along every edge out of a reached node).
    """
    _require_teacher(teacher)
    g = x.graph
    n = g.n
    src = int(x.source)
    unit = teacher == BFS
    flags = out.reach if unit else out.reached
    if not flags[src]:
        return Check(False, "source not marked reached")
    if abs(out.dist[src]) > tol:
        return Check(False, f"source distance {out.dist[src]} is not 0")
    if out.pred[src] != src:
        return Check(False, f"source predecessor {out.pred[src]} is not itself")

    edge_index = {}
    for (u, v), w in zip(g.edges.tolist(), g.weights.tolist()):
        edge_index[(u, v)] = 1.0 if unit else float(w)

    for i in range(n):
        if not flags[i] or i == src:
            continue
        p = int(out.pred[i])
        if p == i:
            return Check(False, f"reached node {i} has self predecessor")
        if (p, i) not in edge_index:
            return Check(False, f"predecessor edge ({p}, {i}) does not exist")
        if not flags[p]:
            return Check(False, f"predecessor {p} of node {i} not reached")
        want = out.dist[p] + edge_index[(p, i)]
        if abs(out.dist[i] - want) > tol:
            return Check(
                False,
                f"node {i}: dist {out.dist[i]} != dist[pred] + w = {want}",
            )

    for (u, v), w in edge_index.items():
        if not flags[u]:
            continue
        if not flags[v]:
            return Check(False, f"edge ({u}, {v}): {u} reached but {v} is not")
        if out.dist[v] > out.dist[u] + w + tol:
            return Check(
                False,
                f"edge ({u}, {v}) violates relaxation: {out.dist[v]} > {out.dist[u]} + {w}",
            )
    return Check(True)


# -- trace files --------------------------------------------------------------


def _step_record(s: HintStep) -> dict:
    return {
        "dist": s.dist.tolist(),
        "reached": [int(b) for b in s.reached],
        "pred": s.pred.tolist(),
        "reach": [int(b) for b in s.reach],
    }


def save_trace_dataset(path, teacher: str, traces: list[Trace], extra_header: dict | None = None) -> None:
    _require_teacher(teacher)
    header = {
        "schema": TRACE_SCHEMA,
        "version": TRACE_VERSION,
        "teacher": teacher,
        "count": len(traces),
    }
    if extra_header:
        header.update(extra_header)
    records = []
    for tr in traces:
        g = tr.input.graph
        records.append(
            {
                "input": {
                    "n": g.n,
                    "edges": g.edges.tolist(),
                    "weights": g.weights.tolist(),
                    "source": int(tr.input.source),
                },
                "steps": [_step_record(s) for s in tr.steps],
            }
        )
    write_ndjson(path, header, records)


def load_trace_dataset(path) -> tuple[str, list[Trace]]:
    header, records = read_ndjson(path, TRACE_SCHEMA, TRACE_VERSION)
    traces = []
    for r in records:
        gi = r["input"]
        g = Graph(
            n=int(gi["n"]),
            edges=np.asarray(gi["edges"]).reshape(-1, 2),
            weights=np.asarray(gi["weights"]),
        )
        x = AbstractInput(graph=g, source=int(gi["source"]))
        steps = [
            HintStep(
                dist=np.asarray(s["dist"], dtype=np.float64),
                reached=np.asarray(s["reached"], dtype=bool),
                pred=np.asarray(s["pred"], dtype=np.int64),
                reach=np.asarray(s["reach"], dtype=bool),
            )
            for s in r["steps"]
        ]
        traces.append(Trace(input=x, steps=steps))
    return header["teacher"], traces
