"""Adjacency graphs for small areas.

Provides the neighbourhood structure consumed by the intrinsic
conditional autoregressive (ICAR) prior: undirected simple graphs with an
edge list in ``node1 < node2`` form, degree vectors, connectivity checks,
the BYM2 scaling factor derived from the graph Laplacian, and global
Moran's I.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Raised for malformed or unusable adjacency structures."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected simple graph over L named nodes.

    Attributes
    ----------
    n_nodes : int
        Number of nodes L.
    edges : ndarray of shape (E, 2)
        Each row (a, b) with a < b, 0-based node indices, no duplicates,
        no self-loops.
    names : tuple of str
        Node identifiers; index order is the area index order and must be
        stable because spatial-effect indices map to it.
    """

    n_nodes: int
    edges: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loop edge: a unit cannot neighbour itself")
        edges = np.sort(edges, axis=1)
        if edges.size and (edges.min() < 0 or edges.max() >= self.n_nodes):
            raise GraphError("edge references unknown node index")
        if len({(int(a), int(b)) for a, b in edges}) != len(edges):
            raise GraphError("duplicate edges")
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        object.__setattr__(self, "edges", edges[order])
        if not self.names:
            object.__setattr__(
                self, "names", tuple(str(i) for i in range(self.n_nodes))
            )
        if len(self.names) != self.n_nodes:
            raise GraphError("names length does not match node count")

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        d = np.bincount(self.edges[:, 0], minlength=self.n_nodes)
        d += np.bincount(self.edges[:, 1], minlength=self.n_nodes)
        return d

    def adjacency_matrix(self) -> np.ndarray:
        """Dense symmetric 0/1 neighbourhood matrix with zero diagonal."""
        w = np.zeros((self.n_nodes, self.n_nodes))
        w[self.edges[:, 0], self.edges[:, 1]] = 1.0
        w[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return w

    def laplacian(self) -> np.ndarray:
        """Graph Laplacian Q = D - W (the ICAR precision at unit scale)."""
        return np.diag(self.degrees.astype(float)) - self.adjacency_matrix()

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise GraphError(f"unknown node id {name!r}") from None


def grid_graph(rows: int, cols: int) -> AdjacencyGraph:
    """4-neighbour lattice with rows*cols nodes.

    Edge count is 2*rows*cols - rows - cols. Node names are "r,c" and the
    index order is row-major.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise GraphError("grid must contain at least 2 nodes")
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    names = tuple(f"{r}-{c}" for r in range(rows) for c in range(cols))
    return AdjacencyGraph(rows * cols, np.array(edges), names)


def load_edge_list(path, roster: list[str] | None = None,
                   delimiter: str = ",") -> AdjacencyGraph:
    """Read an edge list of "idA,idB" lines into an AdjacencyGraph.

    Duplicate edges (in either orientation) collapse to one. If ``roster``
    is given it fixes the node set and index order; otherwise nodes are
    indexed by first appearance.

    Raises
    ------
    GraphError
        On self-loop lines or on ids missing from a declared roster.
    """
    pairs: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if len(parts) != 2 or not all(parts):
                raise GraphError(f"line {lineno}: expected 'idA{delimiter}idB'")
            if parts[0] == parts[1]:
                raise GraphError(f"line {lineno}: self-loop on {parts[0]!r}")
            pairs.append((parts[0], parts[1]))

    if roster is not None:
        names = list(roster)
        index = {n: i for i, n in enumerate(names)}
        for a, b in pairs:
            if a not in index or b not in index:
                missing = a if a not in index else b
                raise GraphError(f"node {missing!r} not on declared roster")
    else:
        names, index = [], {}
        for a, b in pairs:
            for n in (a, b):
                if n not in index:
                    index[n] = len(names)
                    names.append(n)

    seen = set()
    edges = []
    for a, b in pairs:
        key = (min(index[a], index[b]), max(index[a], index[b]))
        if key not in seen:
            seen.add(key)
            edges.append(key)
    edges_arr = np.array(edges, dtype=np.int64) if edges else np.empty((0, 2), dtype=np.int64)
    return AdjacencyGraph(len(names), edges_arr, tuple(names))


def connected_components(graph: AdjacencyGraph) -> list[set[int]]:
    """Exact connected components via breadth-first search."""
    neighbours: list[list[int]] = [[] for _ in range(graph.n_nodes)]
    for a, b in graph.edges:
        neighbours[a].append(int(b))
        neighbours[b].append(int(a))
    seen = np.zeros(graph.n_nodes, dtype=bool)
    components = []
    for start in range(graph.n_nodes):
        if seen[start]:
            continue
        comp = {start}
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.add(v)
                    queue.append(v)
        components.append(comp)
    return components


def require_connected(graph: AdjacencyGraph, context: str = "ICAR") -> None:
    n_comp = len(connected_components(graph))
    if n_comp != 1:
        raise GraphError(
            f"{context} requires a connected graph; found {n_comp} components"
        )


def _laplacian_eigen_inverse_diag(graph: AdjacencyGraph) -> np.ndarray:
    """diag(Q+): generalized inverse of Q = D - W on the sum-to-zero subspace.

    Dense symmetric eigendecomposition; eigenvalues below 1e-9 * lambda_max
    are treated as the null space. Exactly one null direction is expected
    (connected graph), anything else is an error.
    """
    require_connected(graph)
    if graph.n_nodes < 2:
        raise GraphError("need at least 2 nodes")
    lam, vec = np.linalg.eigh(graph.laplacian())
    keep = lam > 1e-9 * lam[-1]
    if int(np.sum(~keep)) != 1:
        raise GraphError("Laplacian null space is not one-dimensional")
    return (vec[:, keep] ** 2 / lam[keep]).sum(axis=1)


def scaling_factor(graph: AdjacencyGraph) -> float:
    """BYM2 scaling factor s for the ICAR effects.

    s = exp(mean(log(diag(Q+)))) where Q+ is the generalized inverse of the
    graph Laplacian restricted to the sum-to-zero subspace, so that the
    geometric mean of the marginal ICAR variances is 1 after dividing by
    sqrt(s).
    """
    diag = _laplacian_eigen_inverse_diag(graph)
    return float(np.exp(np.mean(np.log(diag))))


def morans_i(values, graph: AdjacencyGraph) -> float:
    """Global Moran's I of ``values`` under binary adjacency weights.

    I = (n / sum_ij w_ij) * (sum_ij w_ij z_i z_j / sum_i z_i^2) with z the
    centered values and w the (row-unnormalized) 0/1 adjacency matrix.
    The null expectation under random permutation is -1/(n-1).
    """
    z = np.asarray(values, dtype=float)
    if z.ndim != 1 or z.size != graph.n_nodes:
        raise GraphError("values length must equal the node count")
    if z.size < 2:
        raise GraphError("need at least 2 values")
    if graph.n_edges == 0:
        raise GraphError("graph has no edges")
    z = z - z.mean()
    denom = float(np.sum(z * z))
    if denom == 0.0:
        raise GraphError("constant input: Moran's I undefined (zero variance)")
    cross = float(np.sum(z[graph.edges[:, 0]] * z[graph.edges[:, 1]]))
    # sum_ij w_ij z_i z_j = 2 * cross and sum_ij w_ij = 2 * E
    return z.size * cross / (graph.n_edges * denom)


def morans_i_null_expectation(n: int) -> float:
    return -1.0 / (n - 1)


def morans_i_permutation(values, graph: AdjacencyGraph, n_perm: int = 1000,
                         rng: np.random.Generator | None = None):
    """Permutation null for Moran's I.

    Returns (observed I, null mean, null sd, two-sided p-value) over
    ``n_perm`` random relabelings of the values.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    z = np.asarray(values, dtype=float)
    observed = morans_i(z, graph)
    null = np.empty(n_perm)
    for k in range(n_perm):
        null[k] = morans_i(rng.permutation(z), graph)
    null_mean = float(null.mean())
    null_sd = float(null.std(ddof=1))
    p = float(np.mean(np.abs(null - null_mean) >= abs(observed - null_mean)))
    return observed, null_mean, null_sd, p


def observation_graph(graph: AdjacencyGraph, area_id) -> AdjacencyGraph:
    """Expand an area-level graph to observation level.

    Two observations are adjacent when they live in the same area or in
    neighbouring areas. Used for individual-level Moran's I where the null
    expectation is -1/((n1 + nu) - 1).
    """
    area_id = np.asarray(area_id, dtype=np.int64)
    n = area_id.size
    adjacent = {(int(a), int(b)) for a, b in graph.edges}
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            a, b = area_id[i], area_id[j]
            if a == b or (min(a, b), max(a, b)) in adjacent:
                edges.append((i, j))
    arr = np.array(edges, dtype=np.int64) if edges else np.empty((0, 2), dtype=np.int64)
    return AdjacencyGraph(n, arr)
