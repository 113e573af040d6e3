"""Dynamic usage statistics, sample assembly and train-only standardization."""

from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import logger
from app.errors import FeatureError, LeakageError
from app.services.backend import ErrorMap
from app.services.graphcore import (
    EDGE_STATIC_COLUMNS,
    NODE_STATIC_COLUMNS,
    CouplingGraph,
    edge_static_features,
    node_static_features,
)
from app.services.circuit import CX, ROT1Q
from app.services.transpiler import TranspiledCircuit

FEATURE_SCHEMA_VERSION = 1
NODE_DYNAMIC_COLUMNS = ("coverage", "share_1q", "relative_share_1q")
EDGE_DYNAMIC_COLUMNS = ("edge_coverage", "share_2q")
F_V = len(NODE_STATIC_COLUMNS) + len(NODE_DYNAMIC_COLUMNS)
F_E = len(EDGE_STATIC_COLUMNS) + len(EDGE_DYNAMIC_COLUMNS)


@dataclass(frozen=True)
class GraphSample:
    backend_id: str
    pool_index: int
    graph: CouplingGraph
    x_nodes: np.ndarray
    x_edges: np.ndarray
    mask_nodes: np.ndarray
    mask_edges: np.ndarray
    y_nodes: Optional[np.ndarray] = None
    y_edges: Optional[np.ndarray] = None
    standardized: bool = False
    feature_schema_version: int = FEATURE_SCHEMA_VERSION

    @property
    def labeled(self) -> bool:
        return self.y_nodes is not None and self.y_edges is not None

    def with_labels(self, labels: ErrorMap) -> "GraphSample":
        return replace(
            self,
            y_nodes=labels.y_nodes.copy(),
            y_edges=labels.y_edges.copy(),
            mask_nodes=labels.mask_nodes.copy(),
            mask_edges=labels.mask_edges.copy(),
        )

    def without_labels(self) -> "GraphSample":
        return replace(
            self,
            y_nodes=None,
            y_edges=None,
            mask_nodes=np.ones(self.graph.n, dtype=bool),
            mask_edges=np.ones(self.graph.n_edges, dtype=bool),
        )


@dataclass(frozen=True)
class Standardizer:
    node_mean: np.ndarray
    node_scale: np.ndarray
    edge_mean: np.ndarray
    edge_scale: np.ndarray
    backend_ids: Tuple[str, ...] = field(default=())


def _accumulate(rows: Iterable[np.ndarray], shape: Tuple[int, ...]) -> Tuple[np.ndarray, int]:
    # Ascending-index accumulation keeps pool means bit-stable
    acc = np.zeros(shape)
    count = 0
    for row in rows:
        acc += row
        count += 1
    return acc, count


def _node_stats(tc: TranspiledCircuit, n: int) -> np.ndarray:
    g1 = np.zeros(n)
    touched = np.zeros(n, dtype=bool)
    for g in tc.gates:
        touched[list(g.qubits)] = True
        if g.kind == ROT1Q:
            g1[g.qubits[0]] += 1
    G1 = g1.sum()
    mu1 = G1 / touched.sum() if touched.any() else 0.0
    out = np.zeros((n, 3))
    out[:, 0] = touched
    out[:, 1] = g1 / max(1.0, G1)
    out[:, 2] = g1 / max(1.0, mu1)
    return out


def dynamic_node_features(tpool: Sequence[TranspiledCircuit], n: int) -> np.ndarray:
    """Pool-averaged [coverage, share_1q, relative_share_1q] per physical qubit."""
    if len(tpool) == 0:
        raise FeatureError("cannot extract features from an empty pool")
    acc, count = _accumulate((_node_stats(tc, n) for tc in tpool), (n, 3))
    return acc / count


def _edge_stats(tc: TranspiledCircuit, graph: CouplingGraph) -> np.ndarray:
    g2 = np.zeros(graph.n_edges)
    for g in tc.gates:
        if g.kind == CX:
            if not graph.has_edge(*g.qubits):
                raise FeatureError(f"CX on {g.qubits} is not a coupling of the backend graph")
            g2[graph.index_of(*g.qubits)] += 1
    out = np.zeros((graph.n_edges, 2))
    out[:, 0] = g2 > 0
    out[:, 1] = g2 / max(1.0, g2.sum())
    return out


def dynamic_edge_features(tpool: Sequence[TranspiledCircuit], graph: CouplingGraph) -> np.ndarray:
    """Pool-averaged [edge_coverage, share_2q] per canonical edge (SWAP-decomposed CX included)."""
    if len(tpool) == 0:
        raise FeatureError("cannot extract features from an empty pool")
    acc, count = _accumulate((_edge_stats(tc, graph) for tc in tpool), (graph.n_edges, 2))
    return acc / count


def static_features(graph: CouplingGraph) -> Tuple[np.ndarray, np.ndarray]:
    return node_static_features(graph), edge_static_features(graph)


def assemble_sample(
    backend_id: str,
    graph: CouplingGraph,
    pool_index: int,
    dynamic: Tuple[np.ndarray, np.ndarray],
    static: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    labels: Optional[ErrorMap] = None,
) -> GraphSample:
    node_static, edge_static = static if static is not None else static_features(graph)
    node_dyn, edge_dyn = dynamic

    if node_static.shape != (graph.n, len(NODE_STATIC_COLUMNS)) or node_dyn.shape != (graph.n, len(NODE_DYNAMIC_COLUMNS)):
        raise FeatureError(f"node feature blocks {node_static.shape} / {node_dyn.shape} do not match n={graph.n}")
    if edge_static.shape != (graph.n_edges, len(EDGE_STATIC_COLUMNS)) or edge_dyn.shape != (graph.n_edges, len(EDGE_DYNAMIC_COLUMNS)):
        raise FeatureError(f"edge feature blocks {edge_static.shape} / {edge_dyn.shape} do not match |E|={graph.n_edges}")
    if labels is not None and not labels.aligned_to(graph):
        raise FeatureError("labels are not aligned with the backend graph")

    sample = GraphSample(
        backend_id=backend_id,
        pool_index=int(pool_index),
        graph=graph,
        x_nodes=np.hstack([node_static, node_dyn]),
        x_edges=np.hstack([edge_static, edge_dyn]),
        mask_nodes=np.ones(graph.n, dtype=bool),
        mask_edges=np.ones(graph.n_edges, dtype=bool),
    )
    return sample.with_labels(labels) if labels is not None else sample


def _column_stats(blocks: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    stacked = np.vstack(blocks)
    mean = stacked.mean(axis=0)
    scale = stacked.std(axis=0)
    degenerate = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale[degenerate] = 1.0
    return mean, scale


def fit_standardizer(samples: Sequence[GraphSample], holdout_ids: Iterable[str] = ()) -> Standardizer:
    """Per-column z-scoring with population statistics over the training backends."""
    if not samples:
        raise FeatureError("standardizer needs at least one sample")
    holdout = set(holdout_ids)
    leaked = sorted({s.backend_id for s in samples} & holdout)
    if leaked:
        raise LeakageError(f"standardizer fit set contains holdout backend(s) {leaked}")

    node_mean, node_scale = _column_stats([s.x_nodes for s in samples])
    edge_mean, edge_scale = _column_stats([s.x_edges for s in samples])
    ids = tuple(sorted({s.backend_id for s in samples}))
    logger.debug(f"Fitted standardizer on {len(samples)} samples from {ids}")
    return Standardizer(node_mean, node_scale, edge_mean, edge_scale, ids)


def apply_standardizer(std: Standardizer, sample: GraphSample) -> GraphSample:
    if sample.standardized:
        raise FeatureError(f"sample {sample.backend_id}/{sample.pool_index} is already standardized")
    if sample.x_nodes.shape[1] != std.node_mean.shape[0] or sample.x_edges.shape[1] != std.edge_mean.shape[0]:
        raise FeatureError("sample feature widths do not match the standardizer")
    return replace(
        sample,
        x_nodes=(sample.x_nodes - std.node_mean) / std.node_scale,
        x_edges=(sample.x_edges - std.edge_mean) / std.edge_scale,
        standardized=True,
    )
