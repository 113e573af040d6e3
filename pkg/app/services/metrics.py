"""Evaluation metrics for reconstructed error maps, plus the audit view."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy.stats import rankdata, spearmanr

from app.errors import MetricError
from app.services.backend import POSITIVITY_FLOOR, ErrorMap

NODES = "nodes"
EDGES = "edges"


@dataclass(frozen=True)
class ComponentReport:
    count: int
    percent_diff: float
    spearman: float
    top_k: int
    top_k_overlap: int
    log_ratio_mismatch: float
    rmse: float


@dataclass(frozen=True)
class EvalReport:
    nodes: ComponentReport
    edges: ComponentReport

    def to_dict(self) -> Dict[str, Any]:
        return {NODES: asdict(self.nodes), EDGES: asdict(self.edges)}

    def rows(self) -> List[Tuple[str, str, float]]:
        """One (component class, metric, value) row per metric, for flat exports."""
        out = []
        for cls, rep in ((NODES, self.nodes), (EDGES, self.edges)):
            for metric, value in asdict(rep).items():
                out.append((cls, metric, value))
        return out


def spearman_rho(pred: np.ndarray, truth: np.ndarray) -> float:
    """Spearman correlation with average ranks for ties."""
    if pred.size < 2:
        return 1.0 if np.array_equal(pred, truth) else 0.0
    if np.array_equal(rankdata(pred), rankdata(truth)):
        return 1.0
    rho, _ = spearmanr(pred, truth)
    # constant vectors leave rho undefined
    return 0.0 if np.isnan(rho) else float(rho)


def weakest(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, descending, ties broken by lower index."""
    order = np.lexsort((np.arange(values.size), -values))
    return order[: min(k, values.size)]


def log_ratio(pred: np.ndarray, truth: np.ndarray, floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    return np.abs(np.log(np.maximum(pred, floor) / truth))


def _component(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, top_k: int, name: str) -> ComponentReport:
    if pred.shape != truth.shape:
        raise MetricError(f"{name}: prediction has {pred.size} components, truth has {truth.size}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError(f"{name}: no masked-in components to evaluate")
    p, y = pred[mask], truth[mask]
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise MetricError(f"{name}: masked-in truth values must be positive")
    if np.any(~np.isfinite(p)):
        raise MetricError(f"{name}: predictions must be finite")

    k = min(top_k, p.size)
    overlap = len(set(weakest(p, k).tolist()) & set(weakest(y, k).tolist()))
    return ComponentReport(
        count=int(p.size),
        percent_diff=float(np.mean(np.abs(p - y) / y) * 100.0),
        spearman=spearman_rho(p, y),
        top_k=int(k),
        top_k_overlap=int(overlap),
        log_ratio_mismatch=float(np.mean(log_ratio(p, y))),
        rmse=float(np.sqrt(np.mean((p - y) ** 2))),
    )


def evaluate(pred: ErrorMap, truth: ErrorMap, top_k: int = 10) -> EvalReport:
    """Truth masks select the components compared in both maps."""
    return EvalReport(
        nodes=_component(pred.y_nodes, truth.y_nodes, truth.mask_nodes, top_k, NODES),
        edges=_component(pred.y_edges, truth.y_edges, truth.mask_edges, top_k, EDGES),
    )


def scatter_rows(pred: ErrorMap, truth: ErrorMap) -> List[Tuple[str, int, float, float]]:
    rows = []
    for cls, p, y, m in (
        (NODES, pred.y_nodes, truth.y_nodes, truth.mask_nodes),
        (EDGES, pred.y_edges, truth.y_edges, truth.mask_edges),
    ):
        for i in np.flatnonzero(m):
            rows.append((cls, int(i), float(p[i]), float(y[i])))
    return rows


@dataclass(frozen=True)
class AuditFinding:
    component: str
    index: int
    reported: float
    reconstructed: float
    log_ratio: float


@dataclass(frozen=True)
class AuditReport:
    threshold: float
    findings: Tuple[AuditFinding, ...]
    weakest_nodes: Tuple[int, ...]
    weakest_edges: Tuple[int, ...]

    @property
    def flagged(self) -> bool:
        return bool(self.findings)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "flagged": self.flagged,
            "findings": [asdict(f) for f in self.findings],
            "weakest_nodes": list(self.weakest_nodes),
            "weakest_edges": list(self.weakest_edges),
        }


def audit(reported: ErrorMap, reconstructed: ErrorMap, threshold: float = math.log(2.0), top_k: int = 10) -> AuditReport:
    """Flags reported components that deviate from the reconstruction by more than threshold in log-ratio."""
    if threshold <= 0:
        raise MetricError(f"audit threshold must be > 0, got {threshold}")
    findings = []
    for cls, rep, rec, mask in (
        (NODES, reported.y_nodes, reconstructed.y_nodes, reported.mask_nodes),
        (EDGES, reported.y_edges, reconstructed.y_edges, reported.mask_edges),
    ):
        if rep.shape != rec.shape:
            raise MetricError(f"{cls}: reported and reconstructed maps are misaligned")
        for i in np.flatnonzero(mask):
            m = float(abs(math.log(max(rec[i], POSITIVITY_FLOOR) / max(rep[i], POSITIVITY_FLOOR))))
            if m > threshold:
                findings.append(AuditFinding(cls, int(i), float(rep[i]), float(rec[i]), m))
    return AuditReport(
        threshold=float(threshold),
        findings=tuple(findings),
        weakest_nodes=tuple(int(i) for i in weakest(reconstructed.y_nodes, top_k)),
        weakest_edges=tuple(int(i) for i in weakest(reconstructed.y_edges, top_k)),
    )
