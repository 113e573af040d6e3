"""Deterministic noise-aware layout and SWAP routing.

Route weights are w(e) = -ln(1 - p_2q(e)), so a minimum-weight path is
exactly the path of minimum effective failure probability.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from app.config import logger
from app.services.backend import POSITIVITY_FLOOR, BackendSpec
from app.services.circuit import CX, ROT1Q, Circuit, CircuitPool

# Relative slack when comparing path weights that are equal up to rounding.
_TIE_TOL = 1e-12
_MIN_WEIGHT = 1e-12


@dataclass(frozen=True)
class Layout:
    """Injective logical -> physical map over the active logical qubits."""

    mapping: Dict[int, int]

    def __post_init__(self):
        if len(set(self.mapping.values())) != len(self.mapping):
            raise ValueError("layout must be injective")

    def physical(self, logical: int) -> int:
        return self.mapping[logical]


@dataclass(frozen=True)
class PhysicalGate:
    kind: str
    qubits: Tuple[int, ...]
    angles: Tuple[float, ...] = ()
    # False for the CX gates a SWAP decomposes into
    logical: bool = True


@dataclass(frozen=True)
class TranspiledCircuit:
    gates: Tuple[PhysicalGate, ...]
    initial_layout: Dict[int, int]
    final_layout: Dict[int, int]
    swap_count: int
    seed: int = 0
    width: int = 0


@dataclass(frozen=True)
class RouteWeights:
    weights: np.ndarray
    distance: np.ndarray


def path_failure(p_list: Sequence[float]) -> float:
    for p in p_list:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"edge error probability {p} outside [0, 1)")
    return 1.0 - math.prod(1.0 - p for p in p_list)


def _filled(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # Masked-out components fall back to the mean of the known ones
    live = values[mask]
    fill = float(live.mean()) if live.size else 0.0
    return np.where(mask, values, fill)


def route_weights(backend: BackendSpec) -> RouteWeights:
    graph = backend.graph
    p = _filled(backend.errors.y_edges, backend.errors.mask_edges)
    # Strictly positive weights guarantee every hop shortens the remaining distance
    weights = np.maximum(-np.log1p(-np.clip(p, 0.0, 1.0 - 1e-12)), _MIN_WEIGHT)

    ends = graph.edge_array
    adjacency = csr_matrix((weights, (ends[:, 0], ends[:, 1])), shape=(graph.n, graph.n))
    dist = shortest_path(adjacency, method="D", directed=False)
    # exact symmetry; per-source sums may differ in the last bit
    return RouteWeights(weights=weights, distance=np.minimum(dist, dist.T))


def _placement_scores(backend: BackendSpec) -> np.ndarray:
    """Node error plus mean incident edge error, each in units of the backend's median."""
    graph = backend.graph
    nodes = _filled(backend.errors.y_nodes, backend.errors.mask_nodes)
    edges = _filled(backend.errors.y_edges, backend.errors.mask_edges)
    incident = np.zeros(graph.n)
    for i, (u, v) in enumerate(graph.edges):
        incident[u] += edges[i]
        incident[v] += edges[i]
    deg = np.maximum(graph.degrees, 1)
    score = nodes / max(float(np.median(nodes)), POSITIVITY_FLOOR)
    if edges.size:
        score = score + (incident / deg) / max(float(np.median(edges)), POSITIVITY_FLOOR)
    return score


def noise_aware_layout(circ: Circuit, backend: BackendSpec) -> Layout:
    graph = backend.graph
    active = circ.active_qubits()
    if circ.width > graph.n or len(active) > graph.n:
        raise ValueError(f"circuit needs {circ.width} qubits but backend '{backend.id}' has {graph.n}")
    if not active:
        return Layout(mapping={})

    interactions = {q: 0 for q in active}
    for g in circ.gates:
        if g.kind == CX:
            for q in g.qubits:
                interactions[q] += 1
    order = sorted(active, key=lambda q: (-interactions[q], q))

    score = _placement_scores(backend)
    placed: Dict[int, int] = {}
    used = set()
    for logical in order:
        frontier = sorted({nb for p in used for nb in graph.adjacency[p]} - used)
        candidates = frontier or [p for p in range(graph.n) if p not in used]
        best = min(candidates, key=lambda p: (score[p], p))
        placed[logical] = best
        used.add(best)
    return Layout(mapping=placed)


def _next_hop(cur: int, target: int, backend: BackendSpec, rw: RouteWeights) -> int:
    graph = backend.graph
    options = []
    for nb in graph.adjacency[cur]:
        e = graph.index_of(cur, nb)
        cost = rw.weights[e] + (0.0 if nb == target else rw.distance[nb, target])
        options.append((cost, e, nb))
    best_cost = min(c for c, _, _ in options)
    slack = _TIE_TOL * max(best_cost, 1e-300)
    # Smallest edge index among the (numerically) tied minima
    return min((e, nb) for c, e, nb in options if c <= best_cost + slack)[1]


def route(circ: Circuit, layout: Layout, backend: BackendSpec, weights: Optional[RouteWeights] = None) -> TranspiledCircuit:
    graph = backend.graph
    rw = weights or route_weights(backend)
    l2p = dict(layout.mapping)
    p2l = {p: q for q, p in l2p.items()}
    out: List[PhysicalGate] = []
    swaps = 0

    for g in circ.gates:
        if g.kind == ROT1Q:
            out.append(PhysicalGate(ROT1Q, (l2p[g.qubits[0]],), g.angles))
            continue

        control, target = g.qubits
        cur, tgt = l2p[control], l2p[target]
        if not graph.has_edge(cur, tgt):
            while True:
                nb = _next_hop(cur, tgt, backend, rw)
                if nb == tgt:
                    break
                a, b = min(cur, nb), max(cur, nb)
                out.extend(PhysicalGate(CX, (a, b), logical=False) for _ in range(3))
                swaps += 1
                moved = p2l.pop(nb, None)
                p2l[nb] = control
                l2p[control] = nb
                del p2l[cur]
                if moved is not None:
                    p2l[cur] = moved
                    l2p[moved] = cur
                cur = nb
        out.append(PhysicalGate(CX, (cur, tgt)))

    return TranspiledCircuit(
        gates=tuple(out),
        initial_layout=dict(layout.mapping),
        final_layout=l2p,
        swap_count=swaps,
        seed=circ.meta.seed,
        width=graph.n,
    )


def transpile_circuit(circ: Circuit, backend: BackendSpec, weights: Optional[RouteWeights] = None) -> TranspiledCircuit:
    return route(circ, noise_aware_layout(circ, backend), backend, weights)


def transpile_pool(pool: CircuitPool, backend: BackendSpec, threads: int = 1) -> List[TranspiledCircuit]:
    rw = route_weights(backend)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            result = list(ex.map(lambda c: transpile_circuit(c, backend, rw), pool.circuits))
    else:
        result = [transpile_circuit(c, backend, rw) for c in pool.circuits]
    logger.debug(
        f"Transpiled pool {pool.pool_index} on '{backend.id}': "
        f"{sum(t.swap_count for t in result)} swaps over {len(result)} circuits"
    )
    return result
