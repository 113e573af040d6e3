import json
from dataclasses import replace

import numpy as np
import pytest

from app.errors import CalibrationError, FeatureError, LeakageError, SchemaError
from app.services.backend import POSITIVITY_FLOOR, ErrorMap
from app.services.features import apply_standardizer
from app.services.gnnmodel import EDGE, NODE
from app.services.pipeline import (
    DriftSchedule,
    LinearCalibration,
    TrainConfig,
    fit_linear_calibration,
    infer_holdout,
    split_pools,
    train,
)


@pytest.fixture
def checkpoints(labeled_samples, tiny_regressors, tiny_train_config):
    node_cfg, edge_cfg = tiny_regressors
    node = train(NODE, labeled_samples, tiny_train_config, node_cfg, holdout_ids=["backend-2"]).checkpoint
    edge = train(EDGE, labeled_samples, tiny_train_config, edge_cfg, holdout_ids=["backend-2"]).checkpoint
    return node, edge


# 1. Linear calibration
def test_calibration_recovers_an_exact_line():
    cal = fit_linear_calibration([np.array([1.0, 2.0, 3.0])], [np.array([2.5, 4.5, 6.5])], [np.ones(3, dtype=bool)])
    assert cal.a == pytest.approx(2.0)
    assert cal.b == pytest.approx(0.5)
    assert cal.n_points == 3


def test_calibration_skips_masked_points():
    preds = [np.array([1.0, 2.0, 100.0])]
    labels = [np.array([1.0, 2.0, np.nan])]
    cal = fit_linear_calibration(preds, labels, [np.array([True, True, False])])
    assert cal.a == pytest.approx(1.0)
    assert cal.b == pytest.approx(0.0, abs=1e-12)


def test_constant_predictions_fall_back_to_a_shift():
    cal = fit_linear_calibration([np.full(4, 2.0)], [np.array([1.0, 2.0, 3.0, 4.0])], [np.ones(4, dtype=bool)])
    assert cal.a == 1.0
    assert cal.b == pytest.approx(0.5)


def test_calibration_needs_two_points():
    with pytest.raises(CalibrationError):
        fit_linear_calibration([np.array([1.0])], [np.array([1.0])], [np.array([True])])


# 2. Splitting and training
def test_split_keeps_validation_pools_per_backend(labeled_samples):
    train_set, val_set = split_pools(labeled_samples, 0.2, seed=1)

    assert len(val_set) == 2
    assert {s.backend_id for s in val_set} == {"backend-0", "backend-1"}
    keys = {(s.backend_id, s.pool_index) for s in train_set}
    assert keys.isdisjoint({(s.backend_id, s.pool_index) for s in val_set})
    again = split_pools(labeled_samples, 0.2, seed=1)
    assert [(s.backend_id, s.pool_index) for s in again[1]] == [(s.backend_id, s.pool_index) for s in val_set]


def test_early_stopping_restores_the_best_epoch(mocker, labeled_samples, tiny_regressors):
    seen = []
    curve = iter([1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.5])

    def fake_rmse(model, samples):
        seen.append({k: v.copy() for k, v in model.params.items()})
        return next(curve)

    mocker.patch("app.services.pipeline._rmse", side_effect=fake_rmse)
    cfg = TrainConfig(max_epochs=20, patience=5, seed=2)

    result = train(NODE, labeled_samples, cfg, tiny_regressors[0])

    assert result.stopped_epoch == 6
    assert result.best_epoch == 1
    assert result.history == [1.0, 2.0, 2.0, 2.0, 2.0, 2.0]
    model = result.checkpoint.model
    for k, v in seen[0].items():
        np.testing.assert_array_equal(model.params[k], v)


def test_training_is_deterministic(labeled_samples, tiny_regressors, tiny_train_config):
    a = train(EDGE, labeled_samples, tiny_train_config, tiny_regressors[1])
    b = train(EDGE, labeled_samples, tiny_train_config, tiny_regressors[1])

    assert a.history == b.history
    for k in a.checkpoint.model.params:
        np.testing.assert_array_equal(a.checkpoint.model.params[k], b.checkpoint.model.params[k])
    assert a.checkpoint.calibration == b.checkpoint.calibration


def test_training_with_drift_stays_finite(labeled_samples, tiny_regressors):
    cfg = TrainConfig(max_epochs=4, patience=4, seed=1, drift=DriftSchedule(enabled=True, resample_every=2))

    result = train(NODE, labeled_samples, cfg, tiny_regressors[0])

    assert len(result.history) == result.stopped_epoch
    assert all(np.isfinite(result.history))
    assert result.checkpoint.manifest["train_config"]["drift"]["enabled"] is True


def test_training_manifest(labeled_samples, tiny_regressors, tiny_train_config):
    result = train(NODE, labeled_samples, tiny_train_config, tiny_regressors[0], holdout_ids=["backend-2"])
    manifest = result.checkpoint.manifest

    assert manifest["holdout_ids"] == ["backend-2"]
    assert manifest["feature_schema_version"] == 1
    assert len(manifest["train_pools"]) + len(manifest["val_pools"]) == len(labeled_samples)
    assert result.checkpoint.standardizer.backend_ids == ("backend-0", "backend-1")


def test_training_refuses_holdout_samples(labeled_samples, tiny_train_config):
    with pytest.raises(LeakageError):
        train(NODE, labeled_samples, tiny_train_config, holdout_ids=["backend-0"])


def test_training_needs_labeled_samples(labeled_samples, holdout_samples, tiny_train_config):
    with pytest.raises(FeatureError):
        train(NODE, [], tiny_train_config)
    with pytest.raises(FeatureError):
        train(NODE, labeled_samples + holdout_samples, tiny_train_config)


def test_training_rejects_fully_masked_labels(labeled_samples, tiny_train_config):
    g = labeled_samples[0].graph
    nothing = ErrorMap.from_values(
        np.zeros(g.n), np.zeros(g.n_edges), np.zeros(g.n, dtype=bool), np.zeros(g.n_edges, dtype=bool)
    )
    masked = [s.with_labels(nothing) for s in labeled_samples]
    with pytest.raises(FeatureError):
        train(EDGE, masked, tiny_train_config)


def test_training_needs_labeled_validation_pools(labeled_samples, tiny_train_config):
    _, val_set = split_pools(labeled_samples, tiny_train_config.val_fraction, tiny_train_config.seed)
    val_keys = {(s.backend_id, s.pool_index) for s in val_set}
    g = labeled_samples[0].graph
    nothing = ErrorMap.from_values(
        np.zeros(g.n), np.zeros(g.n_edges), np.zeros(g.n, dtype=bool), np.zeros(g.n_edges, dtype=bool)
    )
    samples = [s.with_labels(nothing) if (s.backend_id, s.pool_index) in val_keys else s for s in labeled_samples]

    with pytest.raises(FeatureError, match="validation"):
        train(NODE, samples, tiny_train_config)


def test_training_manifest_is_strict_json(labeled_samples, tiny_regressors, tiny_train_config):
    manifest = train(EDGE, labeled_samples, tiny_train_config, tiny_regressors[1]).checkpoint.manifest

    assert np.isfinite(manifest["best_val_rmse"])
    assert json.loads(json.dumps(manifest, allow_nan=False))["target_scale"] == manifest["target_scale"]


# 3. Holdout inference
def test_single_pool_inference_is_the_calibrated_prediction(checkpoints, holdout_samples):
    node, edge = checkpoints
    sample = holdout_samples[0]

    em = infer_holdout(node, edge, [sample])

    expected_nodes = node.calibration.apply(node.model.predict(apply_standardizer(node.standardizer, sample)))
    expected_edges = edge.calibration.apply(edge.model.predict(apply_standardizer(edge.standardizer, sample)))
    np.testing.assert_allclose(em.y_nodes, np.maximum(expected_nodes, POSITIVITY_FLOOR), rtol=1e-12)
    np.testing.assert_allclose(em.y_edges, np.maximum(expected_edges, POSITIVITY_FLOOR), rtol=1e-12)


def test_inference_ignores_pool_order_and_duplicates(checkpoints, holdout_samples):
    node, edge = checkpoints
    forward = infer_holdout(node, edge, holdout_samples)
    backward = infer_holdout(node, edge, holdout_samples[::-1])
    np.testing.assert_array_equal(forward.y_nodes, backward.y_nodes)
    np.testing.assert_array_equal(forward.y_edges, backward.y_edges)

    single = infer_holdout(node, edge, holdout_samples[:1])
    doubled = infer_holdout(node, edge, holdout_samples[:1] * 2)
    np.testing.assert_array_equal(single.y_nodes, doubled.y_nodes)


def test_inference_clamps_to_the_floor(checkpoints, holdout_samples):
    node, edge = checkpoints
    sunk = replace(node, calibration=LinearCalibration(a=1.0, b=-1e6))

    em = infer_holdout(sunk, edge, holdout_samples)

    np.testing.assert_array_equal(em.y_nodes, np.full(em.y_nodes.shape, POSITIVITY_FLOOR))
    assert np.all(em.y_edges >= POSITIVITY_FLOOR)


def test_inference_refuses_a_training_backend(checkpoints, labeled_samples):
    node, edge = checkpoints
    with pytest.raises(LeakageError):
        infer_holdout(node, edge, labeled_samples[:3])


def test_inference_rejects_schema_mismatch(checkpoints, holdout_samples):
    node, edge = checkpoints
    stale = [replace(s, feature_schema_version=2) for s in holdout_samples]
    with pytest.raises(SchemaError):
        infer_holdout(node, edge, stale)


def test_inference_never_reads_target_labels(checkpoints, holdout_samples, small_heavyhex):
    node, edge = checkpoints
    junk = ErrorMap.from_values(np.full(small_heavyhex.n, 0.4), np.full(small_heavyhex.n_edges, 0.4))

    plain = infer_holdout(node, edge, holdout_samples)
    labeled = infer_holdout(node, edge, [s.with_labels(junk) for s in holdout_samples])

    np.testing.assert_array_equal(plain.y_nodes, labeled.y_nodes)
    np.testing.assert_array_equal(plain.y_edges, labeled.y_edges)


def test_inference_needs_pools(checkpoints):
    with pytest.raises(FeatureError):
        infer_holdout(*checkpoints, [])
