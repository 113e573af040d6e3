"""One handler per CLI subcommand. Handlers turn parsed flags into service calls
and write every output, plus a manifest, into the requested location."""

from argparse import Namespace
from pathlib import Path
from typing import Any, Dict, List

from app.config import logger
from app.errors import FeatureError, LeakageError
from app.services.backend import NoiseConfig, derive_labels
from app.services.circuit import CircuitConfig, gen_pool
from app.services.experiments import (
    StudyConfig,
    ablate_backends,
    ablate_pools,
    calibration_table,
    drift_experiment,
    featurize,
    pool_master_seed,
    prepare_study,
    run_study,
    study_rows,
    synthesize_fleet,
)
from app.services.features import static_features
from app.services.gnnmodel import RegressorConfig
from app.services.metrics import audit as audit_maps
from app.services.metrics import evaluate as evaluate_maps
from app.services.metrics import scatter_rows
from app.services.pipeline import TrainConfig, infer_holdout, train
from app.services.seeds import derive_seed
from app.services.storage import (
    MANIFEST_NAME,
    ExperimentManifest,
    ensure_dir,
    error_map_to_doc,
    read_backend,
    read_checkpoint,
    read_error_map,
    read_reference_map,
    read_samples,
    read_topology,
    read_transpiled_pool,
    write_backend,
    write_calibration,
    write_checkpoint,
    write_error_map,
    write_manifest,
    write_pool,
    write_report,
    write_sample,
    write_table,
    write_topology,
    write_transpiled_pool,
)
from app.services.transpiler import transpile_pool

METRIC_HEADER = ("component", "metric", "value")
SCATTER_HEADER = ("component", "index", "predicted", "actual")


def _finish(out_dir: Path, manifest: ExperimentManifest, conf: Dict[str, Any]) -> None:
    write_manifest(out_dir, manifest, conf["RECORD_TIMING"])
    logger.info(f"{manifest.command}: outputs and manifest written to {out_dir}")


def _finish_file(out: Path, manifest: ExperimentManifest, conf: Dict[str, Any]) -> None:
    """Single-file outputs get a sibling `<stem>.manifest.json`."""
    write_manifest(out.parent, manifest, conf["RECORD_TIMING"], files=[out], name=f"{out.stem}.{MANIFEST_NAME}")
    logger.info(f"{manifest.command}: wrote {out}")


def _study_config(args: Namespace, conf: Dict[str, Any]) -> StudyConfig:
    overrides = {"threads": args.threads}
    for flag, name in (("backends", "n_backends"), ("qubits", "qubits"), ("pools", "pools"), ("circuits", "circuits")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    return StudyConfig.from_config(conf, **overrides)


# --- dataset stages ---------------------------------------------------------


def gen_backends(args: Namespace, conf: Dict[str, Any]) -> None:
    if args.count < 1:
        raise ValueError(f"--count must be >= 1, got {args.count}")
    params = {"n": args.qubits, **(conf["STUDY"].get("topology_params") or {})}
    noise = NoiseConfig.from_dict(conf["BACKEND"])
    fleet = synthesize_fleet(args.count, args.topology, params, noise, args.seed)

    out = ensure_dir(args.out)
    write_topology(out / "topology.json", fleet[0].graph)
    for spec in fleet:
        write_backend(out / f"{spec.id}.json", spec)

    manifest = ExperimentManifest(
        "gen-backends",
        args.seed,
        configs={"count": args.count, "topology": args.topology, "params": params, "noise": noise.__dict__.copy()},
        sub_seeds={
            "topology": derive_seed(args.seed, "topology"),
            "backends": {spec.id: spec.gen["seed"] for spec in fleet},
        },
    )
    _finish(out, manifest, conf)


def gen_dataset(args: Namespace, conf: Dict[str, Any]) -> None:
    if args.pools < 1 or args.circuits < 1:
        raise ValueError("--pools and --circuits must both be >= 1")
    spec = read_backend(args.backend)
    graph = spec.graph
    circuit = conf["CIRCUIT"]
    cfg = CircuitConfig(depth_cap=int(circuit["depth_cap"]), budget_max=int(circuit["budget_factor"]) * graph.n_edges)
    master = pool_master_seed(args.seed, spec.id)
    static = static_features(graph)
    out = ensure_dir(args.out)

    labels = None
    if not args.unlabeled:
        table = calibration_table(spec, args.seed)
        write_calibration(out / "calibration.json", table)
        labels = derive_labels(table, graph)

    for p in range(args.pools):
        pool = gen_pool(graph.n, args.circuits, master, p, cfg, spec.id)
        tpool = transpile_pool(pool, spec, args.threads)
        write_pool(out / f"pool-{p:03d}.jsonl", pool)
        write_transpiled_pool(out / f"transpiled-{p:03d}.jsonl", tpool, spec.id, p, master)
        write_sample(out / f"sample-{p:03d}.json", featurize(spec.id, graph, p, tpool, static, labels))
        logger.info(f"gen-dataset: pool {p + 1}/{args.pools} for {spec.id} done")

    manifest = ExperimentManifest(
        "gen-dataset",
        args.seed,
        configs={"pools": args.pools, "circuits": args.circuits, "depth_cap": cfg.depth_cap, "budget_max": cfg.budget_max, "labeled": not args.unlabeled},
        sub_seeds={"pools": master, "calibration": derive_seed(args.seed, "calibration", spec.id)},
    )
    manifest.add_input(args.backend)
    _finish(out, manifest, conf)


def train_model(args: Namespace, conf: Dict[str, Any]) -> None:
    samples = read_samples(args.data)
    if not samples:
        raise FeatureError(f"no samples found in {args.data}")
    kept = [s for s in samples if s.backend_id != args.holdout]
    if not kept:
        raise LeakageError(f"every sample belongs to the holdout backend '{args.holdout}'")
    if len(kept) < len(samples):
        logger.warning(f"Excluded {len(samples) - len(kept)} sample(s) of holdout backend '{args.holdout}'")

    cfg = TrainConfig.from_config(conf["TRAIN"], conf["DRIFT"], args.seed)
    if cfg.drift.enabled and cfg.drift.retranspile:
        logger.warning("Re-transpile on drift needs circuit pools; file-based training drifts labels only")
    regressor = RegressorConfig.for_kind(args.kind, conf["REGRESSOR"])
    result = train(args.kind, kept, cfg, regressor, [args.holdout])

    out = Path(args.out)
    write_checkpoint(out, result.checkpoint)
    manifest = ExperimentManifest(
        f"train-{args.kind}",
        args.seed,
        configs={"train": cfg.to_dict(), "regressor": regressor.to_dict(), "holdout": args.holdout},
        sub_seeds={"model": derive_seed(cfg.seed, "model", args.kind)},
    )
    for d in args.data:
        for f in sorted(Path(d).glob("sample-*.json")):
            manifest.add_input(f)
    _finish_file(out, manifest, conf)


def infer(args: Namespace, conf: Dict[str, Any]) -> None:
    node = read_checkpoint(args.node)
    edge = read_checkpoint(args.edge)
    graph = read_topology(args.topology)
    static = static_features(graph)

    files = sorted(Path(args.pools).glob("transpiled-*.jsonl"))
    if not files:
        raise FeatureError(f"no transpiled pools found in {args.pools}")
    samples = []
    for f in files:
        header, tpool = read_transpiled_pool(f)
        samples.append(featurize(header["backend_id"], graph, header["pool_index"], tpool, static))
    prediction = infer_holdout(node, edge, samples)

    out = Path(args.out)
    target = samples[0].backend_id
    write_error_map(out, prediction, {"backend_id": target, "pools": len(samples)})
    manifest = ExperimentManifest("infer", None, configs={"target": target, "pools": len(samples)})
    for f in [args.node, args.edge, args.topology, *files]:
        manifest.add_input(f)
    _finish_file(out, manifest, conf)


# --- reports ----------------------------------------------------------------


def evaluate(args: Namespace, conf: Dict[str, Any]) -> None:
    prediction = read_error_map(args.pred)
    graph = read_topology(args.topology) if args.topology else None
    truth = read_reference_map(args.truth, graph)
    report = evaluate_maps(prediction, truth, args.top_k)

    out = ensure_dir(args.out)
    write_report(out / "report.json", {"command": "evaluate", "top_k": args.top_k, "report": report.to_dict()})
    write_table(out / "metrics.csv", METRIC_HEADER, report.rows())
    write_table(out / "scatter.csv", SCATTER_HEADER, scatter_rows(prediction, truth))
    logger.info(f"evaluate: rho nodes {report.nodes.spearman:.4f}, edges {report.edges.spearman:.4f}")

    manifest = ExperimentManifest("evaluate", None, configs={"top_k": args.top_k})
    manifest.add_input(args.pred)
    manifest.add_input(args.truth)
    _finish(out, manifest, conf)


def audit(args: Namespace, conf: Dict[str, Any]) -> None:
    graph = read_topology(args.topology) if args.topology else None
    reported = read_reference_map(args.reported, graph)
    reconstructed = read_error_map(args.reconstructed)
    result = audit_maps(reported, reconstructed, args.threshold, args.top_k)

    out = ensure_dir(args.out)
    write_report(out / "audit.json", {"command": "audit", "audit": result.to_dict()})
    write_table(
        out / "findings.csv",
        ("component", "index", "reported", "reconstructed", "log_ratio"),
        [(f.component, f.index, f.reported, f.reconstructed, f.log_ratio) for f in result.findings],
    )
    if result.flagged:
        logger.warning(f"audit: {len(result.findings)} component(s) deviate beyond log-ratio {args.threshold:.4f}")

    manifest = ExperimentManifest("audit", None, configs={"threshold": args.threshold, "top_k": args.top_k})
    manifest.add_input(args.reported)
    manifest.add_input(args.reconstructed)
    _finish(out, manifest, conf)


def _ablation_table(rows, first: str) -> List[Dict[str, Any]]:
    return [{first: r[0], "M_nodes": r[1], "M_edges": r[2]} for r in rows]


def ablate_pools_cmd(args: Namespace, conf: Dict[str, Any]) -> None:
    cfg = _study_config(args, conf)
    counts = list(args.counts or cfg.pool_counts)
    study = run_study(cfg, args.seed)
    rows = ablate_pools(study, counts)

    out = ensure_dir(args.out)
    write_report(out / "report.json", {"command": "ablate-pools", "rows": _ablation_table(rows, "P"), "study": study.manifest()})
    write_table(out / "ablate_pools.csv", ("P", "M_nodes", "M_edges"), rows)
    _finish(out, ExperimentManifest("ablate-pools", args.seed, configs={"counts": counts, "study": cfg.to_dict()}), conf)


def ablate_backends_cmd(args: Namespace, conf: Dict[str, Any]) -> None:
    cfg = _study_config(args, conf)
    ks = list(args.ks or cfg.backend_counts)
    data = prepare_study(cfg, args.seed)
    rows = ablate_backends(cfg, args.seed, ks, data)

    out = ensure_dir(args.out)
    doc = {"command": "ablate-backends", "rows": _ablation_table(rows, "k"), "holdout_id": data.holdout.id, "train_order": data.train_ids}
    write_report(out / "report.json", doc)
    write_table(out / "ablate_backends.csv", ("k", "M_nodes", "M_edges"), rows)
    _finish(out, ExperimentManifest("ablate-backends", args.seed, configs={"ks": ks, "study": cfg.to_dict()}), conf)


def drift(args: Namespace, conf: Dict[str, Any]) -> None:
    cfg = _study_config(args, conf)
    comparison = drift_experiment(cfg, args.seed)

    out = ensure_dir(args.out)
    doc = {
        "command": "drift",
        "static": {"report": comparison.static.report.to_dict(), "manifest": comparison.static.manifest()},
        "drift": {"report": comparison.drifted.report.to_dict(), "manifest": comparison.drifted.manifest()},
    }
    write_report(out / "report.json", doc)
    write_table(out / "drift.csv", ("run",) + METRIC_HEADER, comparison.rows())
    _finish(out, ExperimentManifest("drift", args.seed, configs={"study": cfg.to_dict()}), conf)


def study(args: Namespace, conf: Dict[str, Any]) -> None:
    cfg = _study_config(args, conf)
    seeds = list(args.seeds or cfg.seeds)
    out = ensure_dir(args.out)

    results = []
    for seed in seeds:
        result = run_study(cfg, seed)
        results.append(result)
        write_error_map(out / f"seed-{seed}" / "prediction.json", result.prediction, {"backend_id": result.holdout_id})
        write_table(out / f"seed-{seed}" / "scatter.csv", SCATTER_HEADER, scatter_rows(result.prediction, result.truth))

    doc = {
        "command": "study",
        "seeds": {str(r.seed): {"report": r.report.to_dict(), "manifest": r.manifest(), "truth": error_map_to_doc(r.truth)} for r in results},
    }
    write_report(out / "report.json", doc)
    write_table(out / "study.csv", ("seed",) + METRIC_HEADER, study_rows(results))
    manifest = ExperimentManifest(
        "study",
        seeds[0] if len(seeds) == 1 else None,
        configs={"seeds": seeds, "study": cfg.to_dict()},
        sub_seeds={str(s): {"train": derive_seed(s, "train"), "topology": derive_seed(s, "topology")} for s in seeds},
    )
    _finish(out, manifest, conf)
