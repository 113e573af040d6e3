"""Coupling-graph representation and static topology descriptors.

Every node/edge feature matrix in the project is aligned to the canonical
undirected edge ordering produced here: pairs stored as (min, max) and
sorted lexicographically.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from app.config import logger
from app.errors import TopologyError
from app.services.seeds import rng_for

Edge = Tuple[int, int]

NODE_STATIC_COLUMNS = ("deg_norm", "betweenness", "clustering", "harmonic", "kcore_norm")
EDGE_STATIC_COLUMNS = ("edge_betweenness", "sumdeg_norm", "proddeg_norm", "bridge")

TOPOLOGY_KINDS = ("path", "ring", "grid", "heavyhex-like")


@dataclass(frozen=True)
class CouplingGraph:
    n: int
    edges: Tuple[Edge, ...]
    kind: str = "custom"
    params: Dict[str, Any] = field(default_factory=dict, compare=False)
    seed: Optional[int] = field(default=None, compare=False)

    @cached_property
    def adjacency(self) -> Tuple[Tuple[int, ...], ...]:
        adj: List[List[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def edge_index(self) -> Dict[Edge, int]:
        return {e: i for i, e in enumerate(self.edges)}

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @cached_property
    def edge_array(self) -> np.ndarray:
        return np.array(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edge_index

    def index_of(self, u: int, v: int) -> int:
        try:
            return self.edge_index[(min(u, v), max(u, v))]
        except KeyError:
            raise TopologyError(f"({u},{v}) is not a coupling of this graph") from None

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g


def canonicalize_edges(
    raw: Iterable[Sequence[int]],
    n: int,
    kind: str = "custom",
    params: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
) -> CouplingGraph:
    if n < 1:
        raise TopologyError(f"graph needs at least one qubit, got n={n}")

    pairs = set()
    for pair in raw:
        u, v = int(pair[0]), int(pair[1])
        if u == v:
            raise TopologyError(f"self-loop on qubit {u}")
        if not (0 <= u < n and 0 <= v < n):
            raise TopologyError(f"edge ({u},{v}) has an endpoint outside 0..{n - 1}")
        pairs.add((min(u, v), max(u, v)))

    edges = tuple(sorted(pairs))

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    if not nx.is_connected(g):
        missing = min(set(range(n)) - nx.node_connected_component(g, 0))
        raise TopologyError(f"coupling graph is disconnected: node {missing} unreachable")

    return CouplingGraph(n=n, edges=edges, kind=kind, params=dict(params or {}), seed=seed)


def _heavyhex_edges(n: int, row_length: int, phase: int) -> List[Edge]:
    rows: List[List[int]] = []
    start = 0
    while start < n:
        rows.append(list(range(start, min(start + row_length, n))))
        start += row_length

    edges: List[Edge] = []
    for row in rows:
        edges.extend((row[i], row[i + 1]) for i in range(len(row) - 1))

    # Consecutive row pairs use column classes two apart (mod 4), so no qubit
    # carries couplers both up and down and the max degree stays 3.
    for r in range(len(rows) - 1):
        upper, lower = rows[r], rows[r + 1]
        width = min(len(upper), len(lower))
        cols = [c for c in range(width) if c % 4 == (phase + 2 * r) % 4]
        if not cols:
            cols = [0]
        edges.extend((upper[c], lower[c]) for c in cols)
    return edges


def gen_topology(kind: str, params: Optional[Dict[str, Any]] = None, seed: int = 0) -> CouplingGraph:
    params = dict(params or {})

    if kind == "path":
        n = int(params.get("n", 27))
        raw = [(i, i + 1) for i in range(n - 1)]
    elif kind == "ring":
        n = int(params.get("n", 27))
        raw = [(i, (i + 1) % n) for i in range(n)] if n >= 2 else []
    elif kind == "grid":
        rows, cols = int(params.get("rows", 3)), int(params.get("cols", 3))
        n = rows * cols
        raw = []
        for r in range(rows):
            for c in range(cols):
                q = r * cols + c
                if c + 1 < cols:
                    raw.append((q, q + 1))
                if r + 1 < rows:
                    raw.append((q, q + cols))
    elif kind == "heavyhex-like":
        n = int(params.get("n", 27))
        row_length = int(params.get("row_length", 9))
        if row_length < 1:
            raise TopologyError(f"row_length must be >= 1, got {row_length}")
        phase = int(rng_for(seed, "heavyhex-phase").integers(0, 4))
        raw = _heavyhex_edges(n, row_length, phase) if n >= 2 else []
    else:
        raise TopologyError(f"unknown topology kind '{kind}', expected one of {TOPOLOGY_KINDS}")

    if n < 2:
        raise TopologyError(f"topology parameters yield n={n}, need n >= 2")

    graph = canonicalize_edges(raw, n, kind=kind, params=params, seed=seed)
    logger.debug(f"Generated {kind} topology: n={graph.n}, |E|={graph.n_edges}")
    return graph


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def node_static_features(graph: CouplingGraph) -> np.ndarray:
    """Returns an n x 5 matrix with columns NODE_STATIC_COLUMNS.

    Betweenness is the shortest-path pair count divided by (n-1)(n-2)/2;
    harmonic centrality is the raw sum of inverse distances.
    """
    g = graph.to_networkx()
    deg = graph.degrees.astype(np.float64)
    deg_norm = deg / deg.max() if deg.max() > 0 else np.zeros_like(deg)

    betweenness = nx.betweenness_centrality(g, normalized=True)
    clustering = nx.clustering(g)
    harmonic = nx.harmonic_centrality(g)
    core = nx.core_number(g)
    max_core = max(core.values()) if core else 0

    out = np.zeros((graph.n, len(NODE_STATIC_COLUMNS)), dtype=np.float64)
    for v in range(graph.n):
        out[v, 0] = deg_norm[v]
        out[v, 1] = betweenness[v]
        out[v, 2] = clustering[v]
        out[v, 3] = harmonic[v]
        out[v, 4] = core[v] / max_core if max_core > 0 else 1.0
    return out


def edge_static_features(graph: CouplingGraph) -> np.ndarray:
    """Returns an |E| x 4 matrix with columns EDGE_STATIC_COLUMNS, rows in canonical edge order."""
    g = graph.to_networkx()
    ebc = nx.edge_betweenness_centrality(g, normalized=True)
    bridges = {(min(u, v), max(u, v)) for u, v in nx.bridges(g)}

    deg = graph.degrees.astype(np.float64)
    ends = graph.edge_array
    sumdeg = deg[ends[:, 0]] + deg[ends[:, 1]]
    proddeg = deg[ends[:, 0]] * deg[ends[:, 1]]

    out = np.zeros((graph.n_edges, len(EDGE_STATIC_COLUMNS)), dtype=np.float64)
    for i, (u, v) in enumerate(graph.edges):
        out[i, 0] = ebc[(u, v)] if (u, v) in ebc else ebc[(v, u)]
        out[i, 3] = 1.0 if (u, v) in bridges else 0.0
    out[:, 1] = _minmax(sumdeg)
    out[:, 2] = _minmax(proddeg)
    return out
