"""Synthetic backend fabric: error maps, calibration tables, label derivation and drift."""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import logger
from app.errors import CalibrationError
from app.services.graphcore import CouplingGraph
from app.services.seeds import rng_for

POSITIVITY_FLOOR = 1e-9
# Sampled rates are capped below one so -ln(1 - p) stays finite.
MAX_ERROR = 0.5


@dataclass(frozen=True)
class ErrorMap:
    """Per-qubit and per-coupling error rates; masked-out entries hold NaN."""

    y_nodes: np.ndarray
    y_edges: np.ndarray
    mask_nodes: np.ndarray
    mask_edges: np.ndarray

    @classmethod
    def from_values(cls, y_nodes, y_edges, mask_nodes=None, mask_edges=None) -> "ErrorMap":
        y_nodes = np.asarray(y_nodes, dtype=np.float64)
        y_edges = np.asarray(y_edges, dtype=np.float64)
        mask_nodes = np.ones(y_nodes.shape, dtype=bool) if mask_nodes is None else np.asarray(mask_nodes, dtype=bool)
        mask_edges = np.ones(y_edges.shape, dtype=bool) if mask_edges is None else np.asarray(mask_edges, dtype=bool)
        em = cls(
            y_nodes=np.where(mask_nodes, y_nodes, np.nan),
            y_edges=np.where(mask_edges, y_edges, np.nan),
            mask_nodes=mask_nodes,
            mask_edges=mask_edges,
        )
        em.validate()
        return em

    def validate(self) -> None:
        if self.y_nodes.shape != self.mask_nodes.shape or self.y_edges.shape != self.mask_edges.shape:
            raise CalibrationError("error map values and masks are misaligned")
        for name, values, mask in (
            ("node", self.y_nodes, self.mask_nodes),
            ("edge", self.y_edges, self.mask_edges),
        ):
            live = values[mask]
            if not np.all(np.isfinite(live)) or np.any(live < 0):
                raise CalibrationError(f"masked-in {name} errors must be finite and >= 0")

    def aligned_to(self, graph: CouplingGraph) -> bool:
        return self.y_nodes.shape == (graph.n,) and self.y_edges.shape == (graph.n_edges,)


@dataclass(frozen=True)
class NoiseConfig:
    median_1q: float = 2e-4
    sigma_1q: float = 0.6
    median_2q: float = 1e-2
    sigma_2q: float = 0.5
    spatial_smoothing: float = 0.5

    @classmethod
    def from_dict(cls, conf: Dict[str, Any]) -> "NoiseConfig":
        return cls(**{k: float(v) for k, v in conf.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class BackendSpec:
    id: str
    graph: CouplingGraph
    errors: ErrorMap
    gen: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CalibrationRow:
    kind: str
    operands: Tuple[int, ...]
    gate_name: str
    error: Optional[float]


@dataclass(frozen=True)
class CalibrationTable:
    rows: Tuple[CalibrationRow, ...]


def _neighborhood_mean(values: np.ndarray, neighbors: Sequence[Sequence[int]]) -> np.ndarray:
    out = values.copy()
    for i, nbrs in enumerate(neighbors):
        if nbrs:
            out[i] = float(np.mean(values[list(nbrs)]))
    return out


def _edge_neighbors(graph: CouplingGraph) -> List[List[int]]:
    incident: List[List[int]] = [[] for _ in range(graph.n)]
    for i, (u, v) in enumerate(graph.edges):
        incident[u].append(i)
        incident[v].append(i)
    out = []
    for i, (u, v) in enumerate(graph.edges):
        out.append(sorted({j for j in incident[u] + incident[v] if j != i}))
    return out


def sample_backend(graph: CouplingGraph, seed: int, cfg: Optional[NoiseConfig] = None, backend_id: Optional[str] = None) -> BackendSpec:
    cfg = cfg or NoiseConfig()
    if cfg.median_1q <= 0 or cfg.median_2q <= 0:
        raise ValueError("error medians must be positive")
    if cfg.sigma_1q < 0 or cfg.sigma_2q < 0:
        raise ValueError("error sigmas must be non-negative")
    if not 0.0 <= cfg.spatial_smoothing <= 1.0:
        raise ValueError("spatial_smoothing must lie in [0, 1]")

    rng = rng_for(seed, "sample-backend")
    raw_nodes = cfg.median_1q * np.exp(cfg.sigma_1q * rng.standard_normal(graph.n))
    raw_edges = cfg.median_2q * np.exp(cfg.sigma_2q * rng.standard_normal(graph.n_edges))

    s = cfg.spatial_smoothing
    if s > 0:
        raw_nodes = (1 - s) * raw_nodes + s * _neighborhood_mean(raw_nodes, graph.adjacency)
        raw_edges = (1 - s) * raw_edges + s * _neighborhood_mean(raw_edges, _edge_neighbors(graph))

    errors = ErrorMap.from_values(
        np.clip(raw_nodes, POSITIVITY_FLOOR, MAX_ERROR),
        np.clip(raw_edges, POSITIVITY_FLOOR, MAX_ERROR),
    )
    backend_id = backend_id or f"synthetic-{seed}"
    gen = {"seed": int(seed), "noise": cfg.__dict__.copy()}
    logger.debug(
        f"Sampled backend {backend_id}: median 1q={np.median(errors.y_nodes):.3e}, "
        f"median 2q={np.median(errors.y_edges):.3e}"
    )
    return BackendSpec(id=backend_id, graph=graph, errors=errors, gen=gen)


def export_calibration(
    spec: BackendSpec,
    seed: int = 0,
    gates_1q: Sequence[str] = ("sx", "x"),
    gate_2q: str = "cx",
    jitter: float = 0.0,
    drop_fraction: float = 0.0,
) -> CalibrationTable:
    """Renders a backend as a vendor-style calibration table.

    Each 1q gate is reported per qubit and the 2q gate in both directions of
    every coupling. `jitter` scales entries by exp(jitter * N(0,1)); with
    `drop_fraction` > 0 entries are reported as missing.
    """
    rng = rng_for(seed, "export-calibration", spec.id)
    rows: List[CalibrationRow] = []

    def reported(value: float) -> Optional[float]:
        draw = rng.random()
        noise = rng.standard_normal()
        if not np.isfinite(value) or draw < drop_fraction:
            return None
        return float(min(1.0, value * np.exp(jitter * noise))) if jitter > 0 else float(value)

    for q in range(spec.graph.n):
        for gate in gates_1q:
            rows.append(CalibrationRow("1q", (q,), gate, reported(spec.errors.y_nodes[q])))
    for i, (u, v) in enumerate(spec.graph.edges):
        for operands in ((u, v), (v, u)):
            rows.append(CalibrationRow("2q", operands, gate_2q, reported(spec.errors.y_edges[i])))
    return CalibrationTable(rows=tuple(rows))


def derive_labels(table: Union[CalibrationTable, Sequence[CalibrationRow]], graph: CouplingGraph) -> ErrorMap:
    rows = table.rows if isinstance(table, CalibrationTable) else tuple(table)
    node_sum = np.zeros(graph.n)
    node_cnt = np.zeros(graph.n, dtype=np.int64)
    edge_sum = np.zeros(graph.n_edges)
    edge_cnt = np.zeros(graph.n_edges, dtype=np.int64)

    for idx, row in enumerate(rows):
        if row.error is not None:
            err = float(row.error)
            if not np.isfinite(err) or not 0.0 <= err <= 1.0:
                raise CalibrationError(f"row {idx}: error {row.error!r} outside [0, 1]")
        if row.kind == "1q":
            if len(row.operands) != 1 or not 0 <= row.operands[0] < graph.n:
                raise CalibrationError(f"row {idx}: invalid 1q operands {row.operands}")
            if row.error is not None:
                node_sum[row.operands[0]] += row.error
                node_cnt[row.operands[0]] += 1
        elif row.kind == "2q":
            if len(row.operands) != 2 or not graph.has_edge(*row.operands):
                raise CalibrationError(f"row {idx}: operands {row.operands} are not a coupling")
            if row.error is not None:
                e = graph.index_of(*row.operands)
                edge_sum[e] += row.error
                edge_cnt[e] += 1
        else:
            raise CalibrationError(f"row {idx}: unknown kind '{row.kind}'")

    mask_nodes = node_cnt > 0
    mask_edges = edge_cnt > 0
    y_nodes = np.divide(node_sum, node_cnt, out=np.zeros(graph.n), where=mask_nodes)
    y_edges = np.divide(edge_sum, edge_cnt, out=np.zeros(graph.n_edges), where=mask_edges)

    missing = int((~mask_nodes).sum() + (~mask_edges).sum())
    if missing:
        logger.info(f"Calibration table leaves {missing} components without labels; masking them")
    return ErrorMap.from_values(y_nodes, y_edges, mask_nodes, mask_edges)


def apply_drift(errors: ErrorMap, seed: int, scale_nodes: float = 1e-4, scale_edges: float = 1e-2) -> ErrorMap:
    """Adds uniform[-2s, 2s] perturbations (mean |delta| = s) to masked-in entries, floored at 1e-9."""
    if scale_nodes < 0 or scale_edges < 0:
        raise ValueError("drift scales must be non-negative")
    if scale_nodes == 0 and scale_edges == 0:
        return replace(errors)

    rng = rng_for(seed, "drift")
    d_nodes = rng.uniform(-2 * scale_nodes, 2 * scale_nodes, errors.y_nodes.shape)
    d_edges = rng.uniform(-2 * scale_edges, 2 * scale_edges, errors.y_edges.shape)

    y_nodes = np.where(errors.mask_nodes, np.maximum(errors.y_nodes + d_nodes, POSITIVITY_FLOOR), np.nan)
    y_edges = np.where(errors.mask_edges, np.maximum(errors.y_edges + d_edges, POSITIVITY_FLOOR), np.nan)
    return ErrorMap(
        y_nodes=y_nodes,
        y_edges=y_edges,
        mask_nodes=errors.mask_nodes.copy(),
        mask_edges=errors.mask_edges.copy(),
    )
