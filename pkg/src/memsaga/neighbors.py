"""Neighborhood system with exact in-degree q, and per-pair sharing-error bounds.

The directed graph assigns every datapoint j its q nearest points (self
included, Euclidean metric, same-label only for logistic) as *parents*;
N_i is then the set of *children* of i.  Exact in-degree q is what makes
neighborhood-driven memory refreshes hit every slot with probability q/n.

For generalized linear losses, overwriting slot j's memory with the scalar
derivative of a neighboring point i changes the stored loss gradient by
|xi'_j(w) - xi'_i(w)| * ||x_j||, which the `eps_*` routines bound using only
precomputed pair distances, row norms, label gaps, and ||w||.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .problem import LOGISTIC, RIDGE, ProblemInstance


@dataclass
class UniformityReport:
    q: int
    in_degrees: np.ndarray
    bad_nodes: np.ndarray

    @property
    def ok(self) -> bool:
        return self.bad_nodes.size == 0

    def summary(self) -> str:
        n = self.in_degrees.size
        if self.ok:
            return f"in-degree exactly {self.q} for all {n} nodes: OK"
        listed = ", ".join(
            f"{j} (deg {self.in_degrees[j]})" for j in self.bad_nodes[:10]
        )
        more = "" if self.bad_nodes.size <= 10 else f" and {self.bad_nodes.size - 10} more"
        return f"in-degree != {self.q} at nodes: {listed}{more}"


@dataclass
class NeighborGraph:
    """Directed neighbor graph: parents[j] are the q nearest points to j."""

    q: int
    parents: np.ndarray            # (n, q) int64, self always present
    parent_dist: np.ndarray        # (n, q) float64, aligned with parents
    children: list                 # children[i]: int64 array, the set N_i
    children_dist: list            # aligned ||x_i - x_j|| per child
    row_norms: np.ndarray          # (n,) ||x_j||

    @property
    def n(self) -> int:
        return self.parents.shape[0]

    def neighborhood(self, i: int) -> np.ndarray:
        return self.children[i]

    def max_children(self) -> int:
        return max(len(c) for c in self.children)


def _nearest_in_pool(X: np.ndarray, pool: np.ndarray, q: int, block: int = 512):
    """For each member of `pool`, its q nearest pool members by (dist, index).

    Self is forced first so that duplicate points cannot evict a node from
    its own parent list.  Returns (q-column index matrix into `pool`'s global
    ids, matching distances).
    """
    P = X[pool]
    m = pool.size
    sq = np.einsum("ij,ij->i", P, P)
    parents = np.empty((m, q), dtype=np.int64)
    dists = np.empty((m, q))
    for start in range(0, m, block):
        stop = min(start + block, m)
        # squared distances, clipped for float safety
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (P[start:stop] @ P.T)
        np.maximum(d2, 0.0, out=d2)
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = -1.0  # self sentinel: sorts first
        if q < m:
            part = np.argpartition(d2, q - 1, axis=1)[:, :q]
        else:
            part = np.broadcast_to(np.arange(m), (stop - start, m)).copy()
        part_d = np.take_along_axis(d2, part, axis=1)
        # deterministic order: ascending (distance, index)
        for r in range(stop - start):
            order = np.lexsort((part[r], part_d[r]))
            sel = part[r][order]
            seld = part_d[r][order]
            seld[seld < 0.0] = 0.0
            parents[start + r] = pool[sel]
            dists[start + r] = np.sqrt(seld)
    return parents, dists


def build_knn_graph(instance: ProblemInstance, q: int) -> NeighborGraph:
    """Brute-force q-nearest-parents graph (O(n^2) distances, blockwise).

    Logistic restricts candidates to same-label points, so shared memory never
    mixes labels.  Distance ties break by ascending index; every node is its
    own nearest point, hence i is always in N_i.
    """
    n = instance.n
    if not 1 <= q <= n:
        raise ValueError(f"q must be in [1, {n}], got {q}")
    X = instance.features
    parents = np.empty((n, q), dtype=np.int64)
    parent_dist = np.empty((n, q))
    if instance.loss_kind == LOGISTIC:
        pools = [np.flatnonzero(instance.labels == v) for v in (-1.0, 1.0)]
        for v, pool in zip((-1.0, 1.0), pools):
            if 0 < pool.size < q:
                raise ValueError(
                    f"label class {v:+.0f} has {pool.size} members, fewer than q={q}"
                )
    else:
        pools = [np.arange(n)]
    for pool in pools:
        if pool.size == 0:
            continue
        p, dist = _nearest_in_pool(X, pool, q)
        parents[pool] = p
        parent_dist[pool] = dist

    kids: list[list] = [[] for _ in range(n)]
    kid_dist: list[list] = [[] for _ in range(n)]
    for j in range(n):
        for col in range(q):
            i = parents[j, col]
            kids[i].append(j)
            kid_dist[i].append(parent_dist[j, col])
    children = [np.asarray(c, dtype=np.int64) for c in kids]
    children_dist = [np.asarray(c, dtype=np.float64) for c in kid_dist]
    row_norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    return NeighborGraph(q, parents, parent_dist, children, children_dist, row_norms)


def verify_uniformity(graph: NeighborGraph) -> UniformityReport:
    """Check that every node has exactly q parents (equivalently |{i: j in N_i}| = q)."""
    n = graph.n
    in_deg = np.zeros(n, dtype=np.int64)
    for i in range(n):
        np.add.at(in_deg, graph.children[i], 1)
    bad = np.flatnonzero(in_deg != graph.q)
    return UniformityReport(graph.q, in_deg, bad)


def save_graph(graph: NeighborGraph, path) -> None:
    """Write the graph as a text edge list: header `n q`, lines `i j delta_ij`.

    Edges are (parent i, child j), 0-based, one per line, sorted by (i, j).
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{graph.n} {graph.q}\n")
        for i in range(graph.n):
            order = np.argsort(graph.children[i])
            for j, delta in zip(graph.children[i][order], graph.children_dist[i][order]):
                fh.write(f"{i} {j} {float(delta)!r}\n")


def load_graph(path, instance: ProblemInstance) -> NeighborGraph:
    """Read a graph written by `save_graph` and validate it against `instance`.

    Validation: node count, exact in-degree q, and stored distances matching
    recomputation to 1e-12 (guards against stale caches).
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: bad header, expected 'n q'")
        n, q = int(header[0]), int(header[1])
        if n != instance.n:
            raise DataError(f"{path}: graph has n={n}, instance has n={instance.n}")
        kids: list[list] = [[] for _ in range(n)]
        kid_dist: list[list] = [[] for _ in range(n)]
        par: list[list] = [[] for _ in range(n)]
        par_dist: list[list] = [[] for _ in range(n)]
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'i j delta'")
            i, j, delta = int(parts[0]), int(parts[1]), float(parts[2])
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"{path}:{lineno}: node index out of range")
            kids[i].append(j)
            kid_dist[i].append(delta)
            par[j].append(i)
            par_dist[j].append(delta)
    X = instance.features
    parents = np.empty((n, q), dtype=np.int64)
    parent_dist = np.empty((n, q))
    for j in range(n):
        if len(par[j]) != q:
            raise DataError(f"{path}: node {j} has in-degree {len(par[j])}, expected {q}")
        parents[j] = par[j]
        parent_dist[j] = par_dist[j]
        true_d = np.linalg.norm(X[parents[j]] - X[j], axis=1)
        if np.max(np.abs(true_d - parent_dist[j])) > 1e-12:
            raise DataError(f"{path}: stored distances at node {j} do not match the data")
    children = [np.asarray(c, dtype=np.int64) for c in kids]
    children_dist = [np.asarray(c, dtype=np.float64) for c in kid_dist]
    row_norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    return NeighborGraph(q, parents, parent_dist, children, children_dist, row_norms)


@dataclass
class EpsBoundTable:
    """Precomputed per-edge quantities for the sharing-error bounds.

    Only ||w|| (and, for logistic, <x_i, w>) are needed at query time.
    Ridge bound:     (delta_ij ||w|| + |y_j - y_i|) * ||x_j||
    Logistic bound:  (exp(delta_ij ||w||) - 1) * sigmoid(|<x_i, w>|) * ||x_j||
    The logistic form uses the label-symmetric worst case of the margin
    factor, which keeps it valid for both labels and monotone in ||w||
    along rays.
    """

    instance: ProblemInstance
    graph: NeighborGraph
    child_norms: list = field(init=False)
    child_dy: list = field(init=False)
    parent_dy: np.ndarray = field(init=False)

    def __post_init__(self):
        g, inst = self.graph, self.instance
        self.child_norms = [g.row_norms[g.children[i]] for i in range(g.n)]
        if inst.loss_kind == RIDGE:
            self.child_dy = [
                np.abs(inst.labels[g.children[i]] - inst.labels[i]) for i in range(g.n)
            ]
            self.parent_dy = np.abs(inst.labels[g.parents] - inst.labels[:, None])
        else:
            self.child_dy = [np.zeros(len(g.children[i])) for i in range(g.n)]
            self.parent_dy = np.zeros_like(g.parent_dist)

    def neighborhood_bounds(
        self, i: int, w: np.ndarray, w_norm: float | None = None, logit_i: float | None = None
    ) -> np.ndarray:
        """eps_ij(w) for every j in N_i, aligned with graph.children[i]."""
        g = self.graph
        if w_norm is None:
            w_norm = float(np.linalg.norm(w))
        deltas = g.children_dist[i]
        norms = self.child_norms[i]
        if self.instance.loss_kind == RIDGE:
            return (deltas * w_norm + self.child_dy[i]) * norms
        if logit_i is None:
            logit_i = float(self.instance.features[i] @ w)
        margin = 1.0 / (1.0 + math.exp(-abs(logit_i)))
        return np.expm1(deltas * w_norm) * margin * norms

    def edge_bound(self, i: int, j: int, w: np.ndarray) -> float:
        """eps_ij(w) for a single graph edge i -> j; non-edges are an error."""
        pos = np.flatnonzero(self.graph.children[i] == j)
        if pos.size == 0:
            raise ValueError(f"({i}, {j}) is not an edge: {j} not in the neighborhood of {i}")
        return float(self.neighborhood_bounds(i, w)[pos[0]])

    def norm_ball(self, r: float) -> tuple[np.ndarray, float]:
        """Worst-case eps_j over all w with ||w|| <= r, per node, plus the mean.

        For each j, maximizes the edge bound over its incoming edges in
        closed form: the ridge factor at ||w|| = r, the logistic margin at
        its ball maximum sigmoid(||x_i|| r).
        """
        if r < 0:
            raise ValueError("r must be nonnegative")
        g, inst = self.graph, self.instance
        norms_j = g.row_norms[:, None]
        if inst.loss_kind == RIDGE:
            per_edge = (g.parent_dist * r + self.parent_dy) * norms_j
        else:
            margin = 1.0 / (1.0 + np.exp(-g.row_norms[g.parents] * r))
            per_edge = np.expm1(g.parent_dist * r) * margin * norms_j
        eps_j = per_edge.max(axis=1)
        return eps_j, float(eps_j.mean())
