"""File schemas for every stage boundary and the experiment manifest.

Structured documents are JSON with sorted keys; pool files are JSON Lines
with a header record. Masked-out error values are written as null.
"""

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app import __version__
from app.config import logger
from app.errors import SchemaError
from app.services.backend import BackendSpec, CalibrationRow, CalibrationTable, ErrorMap, derive_labels
from app.services.circuit import CX, ROT1Q, Circuit, CircuitMeta, CircuitPool, Gate
from app.services.features import GraphSample, Standardizer
from app.services.gnnmodel import RegressorConfig, TargetScale, regressor_class
from app.services.graphcore import CouplingGraph, canonicalize_edges
from app.services.pipeline import Checkpoint, LinearCalibration
from app.services.transpiler import PhysicalGate, TranspiledCircuit

PathLike = Union[str, Path]

SCHEMA_VERSIONS = {
    "topology": 1,
    "backend": 1,
    "calibration": 1,
    "circuit_pool": 1,
    "transpiled_pool": 1,
    "sample": 1,
    "error_map": 1,
    "checkpoint": 1,
    "report": 1,
    "manifest": 1,
}

SWAP_CX = "swap_cx"


# --- low level --------------------------------------------------------------


def dumps(doc: Dict[str, Any]) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _stamp(kind: str, doc: Dict[str, Any]) -> Dict[str, Any]:
    return {"schema": kind, "schema_version": SCHEMA_VERSIONS[kind], **doc}


def _check(kind: str, doc: Dict[str, Any], source: str) -> Dict[str, Any]:
    if not isinstance(doc, dict) or doc.get("schema") != kind:
        raise SchemaError(f"{source}: expected a '{kind}' document, found '{doc.get('schema') if isinstance(doc, dict) else type(doc).__name__}'")
    if doc.get("schema_version") != SCHEMA_VERSIONS[kind]:
        raise SchemaError(f"{source}: unsupported {kind} schema version {doc.get('schema_version')}")
    return doc


def write_json(path: PathLike, kind: str, doc: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(_stamp(kind, doc)))
    return path


def read_json(path: PathLike, kind: str) -> Dict[str, Any]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from e
    return _check(kind, doc, str(path))


def _nullable(values: np.ndarray) -> List[Optional[float]]:
    return [None if not np.isfinite(v) else float(v) for v in values]


def _from_nullable(values: Sequence[Optional[float]]) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


# --- topology / backend / calibration ---------------------------------------


def topology_to_doc(g: CouplingGraph) -> Dict[str, Any]:
    return {"n": g.n, "edges": [list(e) for e in g.edges], "kind": g.kind, "params": g.params, "seed": g.seed}


def topology_from_doc(doc: Dict[str, Any]) -> CouplingGraph:
    try:
        return canonicalize_edges(doc["edges"], int(doc["n"]), doc.get("kind", "custom"), doc.get("params"), doc.get("seed"))
    except KeyError as e:
        raise SchemaError(f"topology document missing field {e}") from e


def error_map_to_doc(em: ErrorMap) -> Dict[str, Any]:
    return {
        "y_nodes": _nullable(em.y_nodes),
        "y_edges": _nullable(em.y_edges),
        "mask_nodes": [int(m) for m in em.mask_nodes],
        "mask_edges": [int(m) for m in em.mask_edges],
    }


def error_map_from_doc(doc: Dict[str, Any]) -> ErrorMap:
    try:
        return ErrorMap.from_values(
            _from_nullable(doc["y_nodes"]),
            _from_nullable(doc["y_edges"]),
            np.array(doc["mask_nodes"], dtype=bool),
            np.array(doc["mask_edges"], dtype=bool),
        )
    except KeyError as e:
        raise SchemaError(f"error map document missing field {e}") from e


def backend_to_doc(spec: BackendSpec) -> Dict[str, Any]:
    return {"id": spec.id, "topology": topology_to_doc(spec.graph), "gen": spec.gen, **error_map_to_doc(spec.errors)}


def backend_from_doc(doc: Dict[str, Any]) -> BackendSpec:
    graph = topology_from_doc(doc["topology"])
    errors = error_map_from_doc(doc)
    if not errors.aligned_to(graph):
        raise SchemaError(f"backend '{doc.get('id')}': error map does not match its topology")
    return BackendSpec(id=doc["id"], graph=graph, errors=errors, gen=doc.get("gen", {}))


def write_topology(path: PathLike, g: CouplingGraph) -> Path:
    return write_json(path, "topology", topology_to_doc(g))


def read_topology(path: PathLike) -> CouplingGraph:
    doc = read_json(path, "topology")
    return topology_from_doc(doc)


def write_backend(path: PathLike, spec: BackendSpec) -> Path:
    return write_json(path, "backend", backend_to_doc(spec))


def read_backend(path: PathLike) -> BackendSpec:
    return backend_from_doc(read_json(path, "backend"))


def write_error_map(path: PathLike, em: ErrorMap, extra: Optional[Dict[str, Any]] = None) -> Path:
    return write_json(path, "error_map", {**error_map_to_doc(em), **(extra or {})})


def read_error_map(path: PathLike) -> ErrorMap:
    return error_map_from_doc(read_json(path, "error_map"))


def read_reference_map(path: PathLike, graph: Optional[CouplingGraph] = None) -> ErrorMap:
    """Loads an error map from an error map, backend or calibration document.

    Calibration tables need the topology to resolve couplings.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from e
    kind = doc.get("schema") if isinstance(doc, dict) else None
    if kind == "backend":
        return backend_from_doc(_check(kind, doc, str(path))).errors
    if kind == "error_map":
        return error_map_from_doc(_check(kind, doc, str(path)))
    if kind == "calibration":
        if graph is None:
            raise SchemaError(f"{path}: a calibration table needs a topology to resolve couplings")
        return derive_labels(read_calibration(path), graph)
    raise SchemaError(f"{path}: expected an error map, backend or calibration document, found '{kind}'")


def write_calibration(path: PathLike, table: CalibrationTable) -> Path:
    rows = [{"kind": r.kind, "operands": list(r.operands), "gate": r.gate_name, "error": r.error} for r in table.rows]
    return write_json(path, "calibration", {"rows": rows})


def read_calibration(path: PathLike) -> CalibrationTable:
    doc = read_json(path, "calibration")
    rows = []
    for i, r in enumerate(doc.get("rows", [])):
        try:
            rows.append(CalibrationRow(r["kind"], tuple(int(q) for q in r["operands"]), r.get("gate", ""), r.get("error")))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: calibration row {i} is malformed ({e})") from e
    return CalibrationTable(rows=tuple(rows))


# --- pools ------------------------------------------------------------------


def _write_lines(path: PathLike, header: Dict[str, Any], records: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    for rec in records:
        buf.write(json.dumps(rec, sort_keys=True) + "\n")
    path.write_text(buf.getvalue())
    return path


def _read_lines(path: PathLike, kind: str) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty {kind} file")
    try:
        header = _check(kind, json.loads(lines[0]), str(path))
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed record ({e})") from e
    if len(records) != header.get("count", len(records)):
        raise SchemaError(f"{path}: header declares {header.get('count')} records, found {len(records)}")
    return header, records


def _gate_record(g: Gate) -> List[Any]:
    if g.kind == ROT1Q:
        return [ROT1Q, g.qubits[0], list(g.angles)]
    return [CX, g.qubits[0], g.qubits[1]]


def _gate_from_record(rec: List[Any]) -> Gate:
    if rec[0] == ROT1Q:
        return Gate.rot(rec[1], tuple(rec[2]))
    if rec[0] == CX:
        return Gate.cx(rec[1], rec[2])
    raise SchemaError(f"unknown gate record {rec!r}")


def write_pool(path: PathLike, pool: CircuitPool) -> Path:
    header = _stamp(
        "circuit_pool",
        {"backend_id": pool.backend_id, "pool_index": pool.pool_index, "master_seed": pool.master_seed, "count": len(pool)},
    )
    records = (
        {
            "seed": c.meta.seed,
            "width": c.width,
            "w": c.meta.active_width,
            "cx_budget": c.meta.cx_budget,
            "gates": [_gate_record(g) for g in c.gates],
        }
        for c in pool.circuits
    )
    return _write_lines(path, header, records)


def read_pool(path: PathLike) -> CircuitPool:
    header, records = _read_lines(path, "circuit_pool")
    circuits = tuple(
        Circuit(
            width=r["width"],
            gates=tuple(_gate_from_record(g) for g in r["gates"]),
            meta=CircuitMeta(seed=r["seed"], active_width=r["w"], cx_budget=r["cx_budget"]),
        )
        for r in records
    )
    return CircuitPool(circuits, header["backend_id"], header["pool_index"], header["master_seed"])


def _physical_record(g: PhysicalGate) -> List[Any]:
    if g.kind == ROT1Q:
        return [ROT1Q, g.qubits[0], list(g.angles)]
    return [CX if g.logical else SWAP_CX, g.qubits[0], g.qubits[1]]


def _physical_from_record(rec: List[Any]) -> PhysicalGate:
    if rec[0] == ROT1Q:
        return PhysicalGate(ROT1Q, (int(rec[1]),), tuple(rec[2]))
    if rec[0] in (CX, SWAP_CX):
        return PhysicalGate(CX, (int(rec[1]), int(rec[2])), logical=rec[0] == CX)
    raise SchemaError(f"unknown physical gate record {rec!r}")


def _layout_doc(layout: Dict[int, int]) -> Dict[str, int]:
    return {str(k): int(v) for k, v in sorted(layout.items())}


def write_transpiled_pool(path: PathLike, tpool: Sequence[TranspiledCircuit], backend_id: str, pool_index: int, master_seed: int) -> Path:
    header = _stamp(
        "transpiled_pool",
        {"backend_id": backend_id, "pool_index": pool_index, "master_seed": master_seed, "count": len(tpool)},
    )
    records = (
        {
            "seed": t.seed,
            "width": t.width,
            "swap_count": t.swap_count,
            "initial_layout": _layout_doc(t.initial_layout),
            "final_layout": _layout_doc(t.final_layout),
            "gates": [_physical_record(g) for g in t.gates],
        }
        for t in tpool
    )
    return _write_lines(path, header, records)


def read_transpiled_pool(path: PathLike) -> Tuple[Dict[str, Any], List[TranspiledCircuit]]:
    header, records = _read_lines(path, "transpiled_pool")
    tpool = [
        TranspiledCircuit(
            gates=tuple(_physical_from_record(g) for g in r["gates"]),
            initial_layout={int(k): v for k, v in r["initial_layout"].items()},
            final_layout={int(k): v for k, v in r["final_layout"].items()},
            swap_count=r["swap_count"],
            seed=r["seed"],
            width=r["width"],
        )
        for r in records
    ]
    return header, tpool


# --- samples ----------------------------------------------------------------


def sample_to_doc(s: GraphSample) -> Dict[str, Any]:
    doc = {
        "backend_id": s.backend_id,
        "pool_index": s.pool_index,
        "topology": topology_to_doc(s.graph),
        "X_nodes": s.x_nodes.tolist(),
        "X_edges": s.x_edges.tolist(),
        "mask_nodes": [int(m) for m in s.mask_nodes],
        "mask_edges": [int(m) for m in s.mask_edges],
        "feature_schema_version": s.feature_schema_version,
        "standardized": s.standardized,
    }
    if s.labeled:
        doc["y_nodes"] = _nullable(s.y_nodes)
        doc["y_edges"] = _nullable(s.y_edges)
    return doc


def sample_from_doc(doc: Dict[str, Any]) -> GraphSample:
    graph = topology_from_doc(doc["topology"])
    x_nodes = np.array(doc["X_nodes"], dtype=np.float64)
    x_edges = np.array(doc["X_edges"], dtype=np.float64)
    if x_nodes.shape[0] != graph.n or x_edges.shape[0] != graph.n_edges:
        raise SchemaError(f"sample {doc.get('backend_id')}/{doc.get('pool_index')}: feature rows do not match topology")
    labeled = "y_nodes" in doc and "y_edges" in doc
    return GraphSample(
        backend_id=doc["backend_id"],
        pool_index=int(doc["pool_index"]),
        graph=graph,
        x_nodes=x_nodes,
        x_edges=x_edges.reshape(graph.n_edges, -1),
        mask_nodes=np.array(doc["mask_nodes"], dtype=bool),
        mask_edges=np.array(doc["mask_edges"], dtype=bool),
        y_nodes=_from_nullable(doc["y_nodes"]) if labeled else None,
        y_edges=_from_nullable(doc["y_edges"]) if labeled else None,
        standardized=bool(doc.get("standardized", False)),
        feature_schema_version=int(doc["feature_schema_version"]),
    )


def write_sample(path: PathLike, s: GraphSample) -> Path:
    return write_json(path, "sample", sample_to_doc(s))


def read_sample(path: PathLike) -> GraphSample:
    return sample_from_doc(read_json(path, "sample"))


def read_samples(dirs: Iterable[PathLike]) -> List[GraphSample]:
    samples = []
    for d in dirs:
        files = sorted(Path(d).glob("sample-*.json"))
        if not files:
            logger.warning(f"No sample files found in {d}")
        samples.extend(read_sample(f) for f in files)
    return samples


# --- checkpoints ------------------------------------------------------------


def _standardizer_doc(std: Standardizer) -> Dict[str, Any]:
    return {
        "node_mean": std.node_mean.tolist(),
        "node_scale": std.node_scale.tolist(),
        "edge_mean": std.edge_mean.tolist(),
        "edge_scale": std.edge_scale.tolist(),
        "backend_ids": list(std.backend_ids),
    }


def _standardizer_from(doc: Dict[str, Any]) -> Standardizer:
    return Standardizer(
        node_mean=np.array(doc["node_mean"], dtype=np.float64),
        node_scale=np.array(doc["node_scale"], dtype=np.float64),
        edge_mean=np.array(doc["edge_mean"], dtype=np.float64),
        edge_scale=np.array(doc["edge_scale"], dtype=np.float64),
        backend_ids=tuple(doc.get("backend_ids", ())),
    )


def checkpoint_to_doc(ckpt: Checkpoint) -> Dict[str, Any]:
    return {
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "node_in": ckpt.model.node_in,
        "edge_in": ckpt.model.edge_in,
        "params": {k: v.tolist() for k, v in sorted(ckpt.model.params.items())},
        "target": ckpt.model.target.to_dict(),
        "standardizer": _standardizer_doc(ckpt.standardizer),
        "calibration": asdict(ckpt.calibration),
        "manifest": ckpt.manifest,
    }


def checkpoint_from_doc(doc: Dict[str, Any]) -> Checkpoint:
    config = RegressorConfig(**doc["config"])
    model = regressor_class(doc["kind"])(
        config,
        {k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()},
        int(doc["node_in"]),
        int(doc["edge_in"]),
        TargetScale(**doc.get("target", {})),
    )
    expected = set(model.init(config, 0, model.node_in, model.edge_in).params)
    if set(model.params) != expected:
        raise SchemaError(f"checkpoint parameter blocks {sorted(set(model.params) ^ expected)} do not match its config")
    cal = doc["calibration"]
    return Checkpoint(
        kind=doc["kind"],
        model=model,
        standardizer=_standardizer_from(doc["standardizer"]),
        calibration=LinearCalibration(cal["a"], cal["b"], cal.get("n_points", 0), tuple(cal.get("val_ids", ()))),
        manifest=doc.get("manifest", {}),
    )


def write_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    return write_json(path, "checkpoint", checkpoint_to_doc(ckpt))


def read_checkpoint(path: PathLike) -> Checkpoint:
    return checkpoint_from_doc(read_json(path, "checkpoint"))


# --- reports ----------------------------------------------------------------


def write_report(path: PathLike, doc: Dict[str, Any]) -> Path:
    return write_json(path, "report", doc)


def write_table(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())
    return path


# --- manifest ---------------------------------------------------------------


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


@dataclass
class ExperimentManifest:
    command: str
    master_seed: Optional[int]
    configs: Dict[str, Any] = field(default_factory=dict)
    sub_seeds: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    timing: Optional[Dict[str, float]] = None
    tool_version: str = __version__
    schema_versions: Dict[str, int] = field(default_factory=lambda: dict(SCHEMA_VERSIONS))
    started: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path: PathLike) -> None:
        self.inputs[str(path)] = file_digest(path)

    def to_doc(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc.pop("started")
        if doc["timing"] is None:
            doc.pop("timing")
        return doc


def _is_manifest(p: Path) -> bool:
    return p.name == MANIFEST_NAME or p.name.endswith("." + MANIFEST_NAME)


def write_manifest(
    out_dir: PathLike,
    manifest: ExperimentManifest,
    record_timing: bool = False,
    files: Optional[Sequence[PathLike]] = None,
    name: str = MANIFEST_NAME,
) -> Path:
    """Digests the output files and writes the manifest next to them.

    Without `files`, every file under out_dir except manifests is digested.
    """
    out_dir = Path(out_dir)
    paths = sorted(out_dir.rglob("*")) if files is None else sorted(Path(f) for f in files)
    manifest.outputs = {
        str(p.relative_to(out_dir)): file_digest(p)
        for p in paths
        if p.is_file() and not _is_manifest(p)
    }
    if record_timing:
        manifest.timing = {"wall_seconds": round(time.perf_counter() - manifest.started, 3)}
    return write_json(out_dir / name, "manifest", manifest.to_doc())


def verify_manifest(out_dir: PathLike, name: str = MANIFEST_NAME) -> List[str]:
    """Returns the relative paths whose digests no longer match (empty when all verify)."""
    out_dir = Path(out_dir)
    doc = read_json(out_dir / name, "manifest")
    bad = []
    for rel, digest in sorted(doc.get("outputs", {}).items()):
        p = out_dir / rel
        if not p.is_file() or file_digest(p) != digest:
            bad.append(rel)
    return bad


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
