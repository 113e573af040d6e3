"""Training with early stopping and drift injection, linear calibration, holdout inference."""

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import logger
from app.errors import CalibrationError, FeatureError, LeakageError, SchemaError
from app.services.backend import POSITIVITY_FLOOR, ErrorMap, apply_drift
from app.services.features import (
    FEATURE_SCHEMA_VERSION,
    GraphSample,
    Standardizer,
    apply_standardizer,
    fit_standardizer,
)
from app.services.gnnmodel import EDGE, NODE, MessagePassingRegressor, RegressorConfig, fit_target_scale, regressor_class
from app.services.neural import TRAIN, AdamState, adam_step
from app.services.seeds import derive_seed, rng_for

# (backend_id, drifted error map, pool_index) -> sample with re-extracted dynamic features
FeatureResampler = Callable[[str, ErrorMap, int], GraphSample]


@dataclass(frozen=True)
class DriftSchedule:
    enabled: bool = False
    resample_every: int = 3
    scale_nodes: float = 1e-4
    scale_edges: float = 1e-2
    retranspile: bool = False


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    calibrate_node: bool = True
    drift: DriftSchedule = field(default_factory=DriftSchedule)
    reference_epochs: Dict[str, int] = field(default_factory=lambda: {NODE: 22, EDGE: 33})

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")

    @classmethod
    def from_config(cls, train: Dict[str, Any], drift: Dict[str, Any], seed: int = 0) -> "TrainConfig":
        return cls(
            max_epochs=int(train.get("max_epochs", 100)),
            patience=int(train.get("patience", 5)),
            val_fraction=float(train.get("val_fraction", 0.2)),
            seed=int(seed),
            lr=float(train.get("lr", 1e-3)),
            beta1=float(train.get("beta1", 0.9)),
            beta2=float(train.get("beta2", 0.999)),
            eps=float(train.get("eps", 1e-8)),
            calibrate_node=bool(train.get("calibrate_node", True)),
            drift=DriftSchedule(
                enabled=bool(train.get("drift_enabled", False)),
                resample_every=int(train.get("drift_every", 3)),
                scale_nodes=float(drift.get("scale_nodes", 1e-4)),
                scale_edges=float(drift.get("scale_edges", 1e-2)),
                retranspile=bool(train.get("retranspile_on_drift", False)),
            ),
            reference_epochs=dict(train.get("reference_epochs", {NODE: 22, EDGE: 33})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LinearCalibration:
    a: float = 1.0
    b: float = 0.0
    n_points: int = 0
    val_ids: Tuple[str, ...] = ()

    def apply(self, y: np.ndarray) -> np.ndarray:
        return self.a * y + self.b


@dataclass
class Checkpoint:
    kind: str
    model: MessagePassingRegressor
    standardizer: Standardizer
    calibration: LinearCalibration
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> RegressorConfig:
        return self.model.config


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    val_predictions: List[np.ndarray]
    val_labels: List[np.ndarray]
    val_masks: List[np.ndarray]
    history: List[float]
    best_epoch: int
    stopped_epoch: int


def fit_linear_calibration(
    val_preds: Sequence[np.ndarray],
    val_labels: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    val_ids: Iterable[str] = (),
) -> LinearCalibration:
    """Ordinary least squares of labels on predictions over masked-in components."""
    p = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in val_preds]) if len(val_preds) else np.zeros(0)
    y = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in val_labels]) if len(val_labels) else np.zeros(0)
    m = np.concatenate([np.asarray(x, dtype=bool).ravel() for x in masks]) if len(masks) else np.zeros(0, dtype=bool)
    p, y = p[m], y[m]
    if p.size < 2:
        raise CalibrationError(f"linear calibration needs >= 2 valid points, got {p.size}")

    pm, ym = p.mean(), y.mean()
    var = float(np.mean((p - pm) ** 2))
    if var <= 1e-300:
        a, b = 1.0, float(ym - pm)
    else:
        a = float(np.mean((p - pm) * (y - ym)) / var)
        b = float(ym - a * pm)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise CalibrationError(f"linear calibration produced non-finite coefficients a={a}, b={b}")
    return LinearCalibration(a=a, b=b, n_points=int(p.size), val_ids=tuple(sorted(set(val_ids))))


def split_pools(samples: Sequence[GraphSample], val_fraction: float, seed: int) -> Tuple[List[GraphSample], List[GraphSample]]:
    """Seeded per-backend shuffle of pools into train / validation."""
    by_backend: Dict[str, List[GraphSample]] = {}
    for s in samples:
        by_backend.setdefault(s.backend_id, []).append(s)

    train: List[GraphSample] = []
    val: List[GraphSample] = []
    for bid in sorted(by_backend):
        pools = sorted(by_backend[bid], key=lambda s: s.pool_index)
        order = rng_for(seed, "split", bid).permutation(len(pools))
        n_val = int(round(val_fraction * len(pools))) if len(pools) >= 2 else 0
        n_val = min(max(n_val, 1 if len(pools) >= 2 else 0), len(pools) - 1)
        val.extend(pools[i] for i in sorted(order[:n_val]))
        train.extend(pools[i] for i in sorted(order[n_val:]))
    return train, val


def _labels_for(kind: str, sample: GraphSample) -> Tuple[np.ndarray, np.ndarray]:
    if kind == NODE:
        return sample.y_nodes, sample.mask_nodes
    return sample.y_edges, sample.mask_edges


def _rmse(model: MessagePassingRegressor, samples: Sequence[GraphSample]) -> float:
    sq, count = 0.0, 0
    for s in samples:
        y, mask = _labels_for(model.kind, s)
        pred = model.predict(s)
        sq += float(np.sum((pred[mask] - y[mask]) ** 2))
        count += int(mask.sum())
    return float(np.sqrt(sq / count)) if count else float("inf")


def _drifted_samples(
    samples: Sequence[GraphSample],
    originals: Dict[str, ErrorMap],
    cfg: TrainConfig,
    resample_index: int,
    resampler: Optional[FeatureResampler],
    std: Standardizer,
) -> List[GraphSample]:
    drifted = {
        bid: apply_drift(
            em,
            derive_seed(cfg.seed, "train-drift", resample_index, bid),
            cfg.drift.scale_nodes,
            cfg.drift.scale_edges,
        )
        for bid, em in originals.items()
    }
    out = []
    for s in samples:
        em = drifted[s.backend_id]
        if cfg.drift.retranspile and resampler is not None:
            fresh = resampler(s.backend_id, em, s.pool_index)
            out.append(apply_standardizer(std, fresh.with_labels(em)))
        else:
            out.append(s.with_labels(em))
    return out


def _error_map_of(sample: GraphSample) -> ErrorMap:
    return ErrorMap(
        y_nodes=sample.y_nodes.copy(),
        y_edges=sample.y_edges.copy(),
        mask_nodes=sample.mask_nodes.copy(),
        mask_edges=sample.mask_edges.copy(),
    )


def train(
    kind: str,
    samples: Sequence[GraphSample],
    cfg: TrainConfig,
    regressor: Optional[RegressorConfig] = None,
    holdout_ids: Iterable[str] = (),
    resampler: Optional[FeatureResampler] = None,
) -> TrainResult:
    regressor = regressor or RegressorConfig.for_kind(kind)
    holdout = set(holdout_ids)
    if not samples:
        raise FeatureError("training set is empty")
    leaked = sorted({s.backend_id for s in samples} & holdout)
    if leaked:
        raise LeakageError(f"training data contains holdout backend(s) {leaked}")
    if any(not s.labeled for s in samples):
        raise FeatureError("every training sample needs labels")
    if all(not _labels_for(kind, s)[1].any() for s in samples):
        raise FeatureError(f"all {kind} labels are masked out")

    backend_ids = sorted({s.backend_id for s in samples})
    if len(backend_ids) < 2:
        logger.warning(f"Training the {kind} regressor on a single backend ({backend_ids[0]})")

    std = fit_standardizer(samples, holdout)
    train_raw, val_raw = split_pools(samples, cfg.val_fraction, cfg.seed)
    if not val_raw:
        logger.warning("No validation pools available; validating on the training pools")
        val_raw = list(train_raw)
    train_set = [apply_standardizer(std, s) for s in train_raw]
    val_set = [apply_standardizer(std, s) for s in val_raw]
    if all(not _labels_for(kind, s)[1].any() for s in val_set):
        raise FeatureError(f"validation pools carry no {kind} labels; early stopping has nothing to track")
    originals = {s.backend_id: _error_map_of(s) for s in train_raw}

    target = fit_target_scale(kind, *zip(*(_labels_for(kind, s) for s in train_set)))
    model = regressor_class(kind).init(regressor, derive_seed(cfg.seed, "model", kind), target=target)
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    logger.info(
        f"Training {kind} regressor: {len(train_set)} train / {len(val_set)} val pools "
        f"from {backend_ids}, H={regressor.hidden}, lr={cfg.lr}"
    )

    best_rmse = float("inf")
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch, since_best, epoch = 0, 0, 0
    history: List[float] = []
    active = train_set

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.drift.enabled and (epoch - 1) % cfg.drift.resample_every == 0:
            resample_index = (epoch - 1) // cfg.drift.resample_every
            active = _drifted_samples(train_set, originals, cfg, resample_index, resampler, std)
            logger.debug(f"Epoch {epoch}: resampled drift (index {resample_index})")

        order = rng_for(cfg.seed, "epoch-order", kind, epoch).permutation(len(active))
        for step, i in enumerate(order):
            sample = active[i]
            leaves = model.leaves()
            loss = model.loss(sample, TRAIN, derive_seed(cfg.seed, "dropout", kind, epoch, step), leaves)
            loss.backward()
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            adam_step(adam, model.params, grads)

        rmse = _rmse(model, val_set)
        history.append(rmse)
        logger.debug(f"{kind} epoch {epoch}: val RMSE {rmse:.6e}")
        if rmse < best_rmse:
            best_rmse, best_epoch, since_best = rmse, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            since_best += 1
            if since_best >= cfg.patience:
                logger.info(f"Early stop for {kind} at epoch {epoch}; best epoch {best_epoch}")
                break

    model.params = best_params
    val_preds = [model.predict(s) for s in val_set]
    val_labels = [_labels_for(kind, s)[0] for s in val_set]
    val_masks = [_labels_for(kind, s)[1] for s in val_set]
    val_ids = [s.backend_id for s in val_set]

    if kind == NODE and not cfg.calibrate_node:
        calibration = LinearCalibration(val_ids=tuple(sorted(set(val_ids))))
    else:
        calibration = fit_linear_calibration(val_preds, val_labels, val_masks, val_ids)

    manifest = {
        "kind": kind,
        "train_config": cfg.to_dict(),
        "regressor_config": regressor.to_dict(),
        "train_pools": [[s.backend_id, s.pool_index] for s in train_set],
        "val_pools": [[s.backend_id, s.pool_index] for s in val_set],
        "holdout_ids": sorted(holdout),
        "best_epoch": best_epoch,
        "stopped_epoch": epoch,
        "best_val_rmse": best_rmse,
        "target_scale": target.to_dict(),
        "history": history,
        "feature_schema_version": FEATURE_SCHEMA_VERSION,
    }
    logger.info(
        f"Trained {kind} regressor: best epoch {best_epoch}, val RMSE {best_rmse:.4e}, "
        f"calibration a={calibration.a:.4f} b={calibration.b:.4e}"
    )
    return TrainResult(
        checkpoint=Checkpoint(kind, model, std, calibration, manifest),
        val_predictions=val_preds,
        val_labels=val_labels,
        val_masks=val_masks,
        history=history,
        best_epoch=best_epoch,
        stopped_epoch=epoch,
    )


def _pool_mean(ckpt: Checkpoint, samples: Sequence[GraphSample]) -> np.ndarray:
    acc = None
    for s in sorted(samples, key=lambda s: s.pool_index):
        pred = ckpt.model.predict(apply_standardizer(ckpt.standardizer, s))
        acc = pred.copy() if acc is None else acc + pred
    return acc / len(samples)


def check_compatible(ckpt: Checkpoint, sample: GraphSample) -> None:
    schema = ckpt.manifest.get("feature_schema_version", FEATURE_SCHEMA_VERSION)
    if sample.feature_schema_version != schema:
        raise SchemaError(f"sample feature schema v{sample.feature_schema_version} does not match checkpoint v{schema}")
    if sample.x_nodes.shape[1] != ckpt.model.node_in or sample.x_edges.shape[1] != ckpt.model.edge_in:
        raise SchemaError("sample feature widths do not match the checkpoint")


def infer_holdout(
    node_ckpt: Checkpoint,
    edge_ckpt: Checkpoint,
    samples: Sequence[GraphSample],
    floor: float = POSITIVITY_FLOOR,
) -> ErrorMap:
    """Pool-averaged, calibrated, clamped error map for a backend never seen in training."""
    if not samples:
        raise FeatureError("holdout inference needs at least one pool")
    graphs = {s.graph for s in samples}
    if len(graphs) != 1:
        raise FeatureError("holdout pools must share a single topology")
    target_ids = {s.backend_id for s in samples}
    for ckpt in (node_ckpt, edge_ckpt):
        trained_on = set(ckpt.standardizer.backend_ids)
        if trained_on & target_ids:
            raise LeakageError(f"checkpoint was fitted on the inference target {sorted(trained_on & target_ids)}")
    clean = []
    for s in samples:
        check_compatible(node_ckpt, s)
        check_compatible(edge_ckpt, s)
        # the target's labels are never read on this path
        clean.append(s.without_labels() if s.labeled else s)

    y_nodes = node_ckpt.calibration.apply(_pool_mean(node_ckpt, clean))
    y_edges = edge_ckpt.calibration.apply(_pool_mean(edge_ckpt, clean))
    return ErrorMap.from_values(np.maximum(y_nodes, floor), np.maximum(y_edges, floor))
