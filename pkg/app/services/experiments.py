"""Holdout study orchestration: fleet synthesis, dataset building, pool/backend
ablations and the static-vs-drift comparison.

The holdout backend is wrapped in a SealedBackend. Its transpiler runs on the
vendor side (it needs the hardware errors), but the analyst side only receives
transpiled circuits; `reveal()` is the single read path and is counted.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import CONFIG, logger
from app.errors import LeakageError
from app.services.backend import BackendSpec, CalibrationTable, ErrorMap, NoiseConfig, apply_drift, derive_labels, export_calibration, sample_backend
from app.services.circuit import CircuitConfig, CircuitPool, gen_pool
from app.services.features import GraphSample, assemble_sample, dynamic_edge_features, dynamic_node_features, static_features
from app.services.gnnmodel import EDGE, NODE, RegressorConfig
from app.services.graphcore import CouplingGraph, gen_topology
from app.services.metrics import EvalReport, evaluate
from app.services.pipeline import Checkpoint, TrainConfig, infer_holdout, train
from app.services.seeds import derive_seed, rng_for
from app.services.transpiler import TranspiledCircuit, transpile_pool


@dataclass(frozen=True)
class StudyConfig:
    n_backends: int = 5
    qubits: int = 27
    topology: str = "heavyhex-like"
    topology_params: Dict[str, Any] = field(default_factory=dict)
    pools: int = 20
    circuits: int = 100
    top_k: int = 10
    pool_counts: Tuple[int, ...] = (1, 5, 20)
    backend_counts: Tuple[int, ...] = (1, 4)
    seeds: Tuple[int, ...] = (0, 1, 2)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    depth_cap: int = 64
    budget_factor: int = 2
    node_regressor: RegressorConfig = field(default_factory=lambda: RegressorConfig.for_kind(NODE))
    edge_regressor: RegressorConfig = field(default_factory=lambda: RegressorConfig.for_kind(EDGE))
    train: TrainConfig = field(default_factory=TrainConfig)
    threads: int = 1

    def __post_init__(self):
        if self.n_backends < 2:
            raise ValueError(f"a holdout study needs >= 2 backends, got {self.n_backends}")
        if self.pools < 1 or self.circuits < 1:
            raise ValueError("pools and circuits must both be >= 1")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")

    @classmethod
    def from_config(cls, conf: Optional[Dict[str, Any]] = None, **overrides) -> "StudyConfig":
        conf = conf or CONFIG
        study = conf["STUDY"]
        built = cls(
            n_backends=int(study.get("backends", 5)),
            qubits=int(study.get("qubits", 27)),
            topology=str(study.get("topology", "heavyhex-like")),
            topology_params=dict(study.get("topology_params") or {}),
            pools=int(study.get("pools", 20)),
            circuits=int(study.get("circuits", 100)),
            top_k=int(study.get("top_k", 10)),
            pool_counts=tuple(int(p) for p in study.get("pool_counts", (1, 5, 20))),
            backend_counts=tuple(int(k) for k in study.get("backend_counts", (1, 4))),
            seeds=tuple(int(s) for s in study.get("seeds", (0, 1, 2))),
            noise=NoiseConfig.from_dict(conf["BACKEND"]),
            depth_cap=int(conf["CIRCUIT"].get("depth_cap", 64)),
            budget_factor=int(conf["CIRCUIT"].get("budget_factor", 2)),
            node_regressor=RegressorConfig.for_kind(NODE, conf["REGRESSOR"]),
            edge_regressor=RegressorConfig.for_kind(EDGE, conf["REGRESSOR"]),
            train=TrainConfig.from_config(conf["TRAIN"], conf["DRIFT"]),
            threads=int(conf.get("THREADS", 1)),
        )
        return replace(built, **overrides) if overrides else built

    @property
    def drift_scales(self) -> Tuple[float, float]:
        return self.train.drift.scale_nodes, self.train.drift.scale_edges

    def circuit_config(self, graph: CouplingGraph) -> CircuitConfig:
        return CircuitConfig(depth_cap=self.depth_cap, budget_max=self.budget_factor * graph.n_edges)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_backends": self.n_backends,
            "qubits": self.qubits,
            "topology": self.topology,
            "topology_params": dict(self.topology_params),
            "pools": self.pools,
            "circuits": self.circuits,
            "top_k": self.top_k,
            "pool_counts": list(self.pool_counts),
            "backend_counts": list(self.backend_counts),
            "noise": self.noise.__dict__.copy(),
            "depth_cap": self.depth_cap,
            "budget_factor": self.budget_factor,
            "node_regressor": self.node_regressor.to_dict(),
            "edge_regressor": self.edge_regressor.to_dict(),
            "train": self.train.to_dict(),
        }


class SealedBackend:
    """A backend whose error map the analyst can only obtain through reveal()."""

    def __init__(self, spec: BackendSpec):
        self._spec = spec
        self.reads = 0

    @property
    def id(self) -> str:
        return self._spec.id

    @property
    def graph(self) -> CouplingGraph:
        return self._spec.graph

    def transpile(self, pool: CircuitPool, threads: int = 1, drift: Optional[Tuple[int, float, float]] = None) -> List[TranspiledCircuit]:
        """Vendor-side transpilation; `drift` is (seed, scale_nodes, scale_edges) for a per-pool drifted snapshot."""
        spec = self._spec
        if drift is not None:
            seed, s_nodes, s_edges = drift
            spec = replace(spec, errors=apply_drift(spec.errors, seed, s_nodes, s_edges))
        return transpile_pool(pool, spec, threads)

    def reveal(self) -> ErrorMap:
        self.reads += 1
        return self._spec.errors


def synthesize_fleet(
    count: int,
    topology: str,
    params: Dict[str, Any],
    noise: NoiseConfig,
    seed: int,
) -> List[BackendSpec]:
    """`count` synthetic backends sharing one topology, each with its own error map."""
    if count < 1:
        raise ValueError(f"backend count must be >= 1, got {count}")
    graph = gen_topology(topology, params, derive_seed(seed, "topology"))
    return [
        sample_backend(graph, derive_seed(seed, "backend", i), noise, backend_id=f"backend-{i}")
        for i in range(count)
    ]


def build_fleet(cfg: StudyConfig, seed: int) -> List[BackendSpec]:
    return synthesize_fleet(cfg.n_backends, cfg.topology, {"n": cfg.qubits, **cfg.topology_params}, cfg.noise, seed)


def pool_master_seed(seed: int, backend_id: str) -> int:
    return derive_seed(seed, "pools", backend_id)


def pools_for(cfg: StudyConfig, seed: int, backend_id: str, graph: CouplingGraph, count: int) -> List[CircuitPool]:
    master = pool_master_seed(seed, backend_id)
    circuit_cfg = cfg.circuit_config(graph)
    return [gen_pool(graph.n, cfg.circuits, master, p, circuit_cfg, backend_id) for p in range(count)]


def featurize(
    backend_id: str,
    graph: CouplingGraph,
    pool_index: int,
    tpool: Sequence[TranspiledCircuit],
    static: Tuple[np.ndarray, np.ndarray],
    labels: Optional[ErrorMap] = None,
) -> GraphSample:
    dynamic = (dynamic_node_features(tpool, graph.n), dynamic_edge_features(tpool, graph))
    return assemble_sample(backend_id, graph, pool_index, dynamic, static, labels)


def calibration_table(spec: BackendSpec, seed: int) -> CalibrationTable:
    return export_calibration(spec, derive_seed(seed, "calibration", spec.id))


def training_labels(spec: BackendSpec, seed: int) -> ErrorMap:
    """Labels come from the backend's exported calibration table, as an analyst would receive it."""
    return derive_labels(calibration_table(spec, seed), spec.graph)


@dataclass
class StudyData:
    """Everything the analyst side holds before any model is fitted."""

    seed: int
    cfg: StudyConfig
    drift: bool
    train_backends: List[BackendSpec]
    holdout: SealedBackend
    train_samples: Dict[str, List[GraphSample]]
    train_pools: Dict[str, List[CircuitPool]]
    holdout_samples: List[GraphSample]

    @property
    def train_ids(self) -> List[str]:
        return [b.id for b in self.train_backends]


def prepare_study(cfg: StudyConfig, seed: int, drift: bool = False) -> StudyData:
    fleet = build_fleet(cfg, seed)
    order = [int(i) for i in rng_for(seed, "fleet-order").permutation(len(fleet))]
    holdout = SealedBackend(fleet[order[0]])
    train_backends = [fleet[i] for i in order[1:]]
    graph = holdout.graph
    static = static_features(graph)
    logger.info(
        f"Study seed {seed}: holdout {holdout.id}, training on {[b.id for b in train_backends]}, "
        f"{cfg.pools} pools x {cfg.circuits} circuits, drift {'on' if drift else 'off'}"
    )

    train_samples: Dict[str, List[GraphSample]] = {}
    train_pools: Dict[str, List[CircuitPool]] = {}
    for spec in train_backends:
        labels = training_labels(spec, seed)
        pools = pools_for(cfg, seed, spec.id, spec.graph, cfg.pools)
        train_pools[spec.id] = pools
        train_samples[spec.id] = [
            featurize(spec.id, spec.graph, p.pool_index, transpile_pool(p, spec, cfg.threads), static, labels)
            for p in pools
        ]

    s_nodes, s_edges = cfg.drift_scales
    holdout_samples = []
    for p in pools_for(cfg, seed, holdout.id, graph, cfg.pools):
        # drift at inference time: one fresh snapshot per pool
        snapshot = (derive_seed(seed, "inference-drift", p.pool_index), s_nodes, s_edges) if drift else None
        tpool = holdout.transpile(p, cfg.threads, snapshot)
        holdout_samples.append(featurize(holdout.id, graph, p.pool_index, tpool, static))
    return StudyData(seed, cfg, drift, train_backends, holdout, train_samples, train_pools, holdout_samples)


def _resampler(data: StudyData):
    """Re-transpiles a training pool against a drifted error map."""
    specs = {b.id: b for b in data.train_backends}
    static = static_features(data.holdout.graph)
    pools = {bid: {p.pool_index: p for p in ps} for bid, ps in data.train_pools.items()}

    def resample(backend_id: str, errors: ErrorMap, pool_index: int) -> GraphSample:
        spec = replace(specs[backend_id], errors=errors)
        tpool = transpile_pool(pools[backend_id][pool_index], spec, data.cfg.threads)
        return featurize(backend_id, spec.graph, pool_index, tpool, static)

    return resample


@dataclass
class StudyResult:
    seed: int
    holdout_id: str
    train_ids: List[str]
    report: EvalReport
    prediction: ErrorMap
    truth: ErrorMap
    node: Checkpoint
    edge: Checkpoint
    data: StudyData = field(repr=False)
    reads_before_eval: int = 0

    def manifest(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "holdout_id": self.holdout_id,
            "train_ids": list(self.train_ids),
            "drift": self.node.manifest["train_config"]["drift"],
            "study": self.data.cfg.to_dict(),
            "node_best_epoch": self.node.manifest["best_epoch"],
            "edge_best_epoch": self.edge.manifest["best_epoch"],
        }


def fit_models(data: StudyData, train_ids: Sequence[str]) -> Tuple[Checkpoint, Checkpoint]:
    cfg = data.cfg
    samples = [s for bid in train_ids for s in data.train_samples[bid]]
    train_cfg = replace(cfg.train, seed=derive_seed(data.seed, "train"), drift=replace(cfg.train.drift, enabled=data.drift))
    resampler = _resampler(data) if data.drift and train_cfg.drift.retranspile else None
    holdout = [data.holdout.id]
    node = train(NODE, samples, train_cfg, cfg.node_regressor, holdout, resampler).checkpoint
    edge = train(EDGE, samples, train_cfg, cfg.edge_regressor, holdout, resampler).checkpoint
    return node, edge


def score(data: StudyData, node: Checkpoint, edge: Checkpoint, pool_count: Optional[int] = None) -> Tuple[ErrorMap, ErrorMap, EvalReport, int]:
    """Infers the holdout map from the first pool_count pools, then reveals the truth and evaluates."""
    pools = data.holdout_samples if pool_count is None else data.holdout_samples[:pool_count]
    prediction = infer_holdout(node, edge, pools)
    reads = data.holdout.reads
    truth = data.holdout.reveal()
    return prediction, truth, evaluate(prediction, truth, data.cfg.top_k), reads


def run_study(cfg: StudyConfig, seed: int, drift: bool = False, data: Optional[StudyData] = None) -> StudyResult:
    """Train on every non-holdout backend, reconstruct the holdout map, evaluate."""
    data = data or prepare_study(cfg, seed, drift)
    node, edge = fit_models(data, data.train_ids)
    prediction, truth, report, reads = score(data, node, edge)
    if reads:
        raise LeakageError(f"holdout error map of {data.holdout.id} was read {reads} time(s) before evaluation")
    logger.info(
        f"Study seed {seed}: rho nodes {report.nodes.spearman:.3f} edges {report.edges.spearman:.3f}, "
        f"percent diff nodes {report.nodes.percent_diff:.1f}% edges {report.edges.percent_diff:.1f}%"
    )
    return StudyResult(seed, data.holdout.id, data.train_ids, report, prediction, truth, node, edge, data, reads)


AblationRow = Tuple[int, float, float]


def ablate_pools(study: StudyResult, counts: Sequence[int]) -> List[AblationRow]:
    """(P, M_nodes, M_edges) per pool count, reusing the trained models."""
    available = len(study.data.holdout_samples)
    for p in counts:
        if p < 1 or p > available:
            raise ValueError(f"pool count {p} outside [1, {available}]")
    rows = []
    for p in counts:
        _, _, report, _ = score(study.data, study.node, study.edge, p)
        rows.append((int(p), report.nodes.log_ratio_mismatch, report.edges.log_ratio_mismatch))
        logger.info(f"Pool ablation P={p}: M_nodes {rows[-1][1]:.4f}, M_edges {rows[-1][2]:.4f}")
    return rows


def ablate_backends(cfg: StudyConfig, seed: int, ks: Sequence[int], data: Optional[StudyData] = None) -> List[AblationRow]:
    """(k, M_nodes, M_edges) per training-backend count; backends join in seeded order."""
    data = data or prepare_study(cfg, seed)
    available = len(data.train_backends)
    for k in ks:
        if k < 1 or k > available:
            raise ValueError(f"training backend count {k} outside [1, {available}]")
    cache: Dict[int, AblationRow] = {}
    for k in ks:
        if k not in cache:
            node, edge = fit_models(data, data.train_ids[:k])
            _, _, report, _ = score(data, node, edge)
            cache[k] = (int(k), report.nodes.log_ratio_mismatch, report.edges.log_ratio_mismatch)
            logger.info(f"Backend ablation k={k}: M_nodes {cache[k][1]:.4f}, M_edges {cache[k][2]:.4f}")
    return [cache[k] for k in ks]


@dataclass
class DriftComparison:
    static: StudyResult
    drifted: StudyResult

    def rows(self) -> List[Tuple[str, str, str, float]]:
        out = []
        for label, result in (("static", self.static), ("drift", self.drifted)):
            out.extend((label, cls, metric, value) for cls, metric, value in result.report.rows())
        return out


def drift_experiment(cfg: StudyConfig, seed: int) -> DriftComparison:
    return DriftComparison(static=run_study(cfg, seed, drift=False), drifted=run_study(cfg, seed, drift=True))


def study_rows(results: Sequence[StudyResult]) -> List[Tuple[int, str, str, float]]:
    """One (seed, component class, metric, value) row per metric, in seed order."""
    return [
        (r.seed, cls, metric, value)
        for r in sorted(results, key=lambda r: r.seed)
        for cls, metric, value in r.report.rows()
    ]
