import json

import numpy as np
import pytest

from app.errors import SchemaError
from app.services.backend import ErrorMap, export_calibration
from app.services.circuit import CircuitConfig, gen_pool
from app.services.features import apply_standardizer
from app.services.gnnmodel import NODE
from app.services.pipeline import train
from app.services.storage import (
    SWAP_CX,
    ExperimentManifest,
    dumps,
    read_backend,
    read_checkpoint,
    read_error_map,
    read_pool,
    read_reference_map,
    read_samples,
    read_transpiled_pool,
    verify_manifest,
    write_backend,
    write_calibration,
    write_checkpoint,
    write_error_map,
    write_manifest,
    write_pool,
    write_sample,
    write_table,
    write_topology,
    write_transpiled_pool,
)
from app.services.transpiler import transpile_pool


def test_json_is_sorted_and_newline_terminated():
    text = dumps({"b": 1, "a": [1.5, None]})
    assert text.endswith("}\n")
    assert text.index('"a"') < text.index('"b"')
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_backend_files_are_byte_stable(tmp_path, small_backend):
    a = write_backend(tmp_path / "a.json", small_backend).read_bytes()
    b = write_backend(tmp_path / "b.json", small_backend).read_bytes()
    assert a == b

    back = read_backend(tmp_path / "a.json")
    assert back.id == small_backend.id
    assert back.graph == small_backend.graph
    np.testing.assert_array_equal(back.errors.y_edges, small_backend.errors.y_edges)


def test_masked_values_are_written_as_null(tmp_path):
    em = ErrorMap.from_values([1e-3, 2e-3], [1e-2], mask_nodes=[True, False])
    path = write_error_map(tmp_path / "em.json", em, extra={"backend_id": "x"})

    doc = json.loads(path.read_text())
    assert doc["y_nodes"] == [1e-3, None]
    assert doc["mask_nodes"] == [1, 0]
    assert doc["backend_id"] == "x"
    back = read_error_map(path)
    assert np.isnan(back.y_nodes[1])
    assert not back.mask_nodes[1]


def test_reading_the_wrong_document_kind(tmp_path, small_heavyhex):
    path = write_topology(tmp_path / "topology.json", small_heavyhex)
    with pytest.raises(SchemaError, match="expected a 'backend' document"):
        read_backend(path)


def test_unsupported_schema_version(tmp_path, small_backend):
    path = write_backend(tmp_path / "b.json", small_backend)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="version"):
        read_backend(path)


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    with pytest.raises(SchemaError):
        read_error_map(path)


def test_reference_map_from_each_document_kind(tmp_path, small_backend):
    graph = small_backend.graph
    write_backend(tmp_path / "backend.json", small_backend)
    write_error_map(tmp_path / "em.json", small_backend.errors)
    write_calibration(tmp_path / "cal.json", export_calibration(small_backend))

    for name in ("backend.json", "em.json"):
        np.testing.assert_array_equal(read_reference_map(tmp_path / name).y_nodes, small_backend.errors.y_nodes)
    from_cal = read_reference_map(tmp_path / "cal.json", graph)
    np.testing.assert_array_equal(from_cal.y_edges, small_backend.errors.y_edges)
    with pytest.raises(SchemaError, match="topology"):
        read_reference_map(tmp_path / "cal.json")


def test_pool_files(tmp_path, small_backend):
    pool = gen_pool(small_backend.graph.n, 4, master_seed=1, pool_index=2, cfg=CircuitConfig(depth_cap=16, budget_max=14))
    write_pool(tmp_path / "pool.jsonl", pool)
    assert read_pool(tmp_path / "pool.jsonl") == pool

    tpool = transpile_pool(pool, small_backend)
    path = write_transpiled_pool(tmp_path / "t.jsonl", tpool, small_backend.id, 2, 1)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    assert json.loads(lines[0])["count"] == 4

    header, back = read_transpiled_pool(path)
    assert header["backend_id"] == small_backend.id
    assert back == tpool
    if any(t.swap_count for t in tpool):
        assert SWAP_CX in path.read_text()


def test_truncated_pool_is_rejected(tmp_path):
    pool = gen_pool(4, 3, master_seed=0, pool_index=0)
    path = write_pool(tmp_path / "pool.jsonl", pool)
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(SchemaError, match="declares 3"):
        read_pool(path)


def test_samples_keep_labels_only_when_present(tmp_path, labeled_samples, holdout_samples):
    write_sample(tmp_path / "lab" / "sample-000.json", labeled_samples[0])
    write_sample(tmp_path / "hold" / "sample-000.json", holdout_samples[0])

    labeled = read_samples([tmp_path / "lab"])[0]
    unlabeled = read_samples([tmp_path / "hold"])[0]

    assert labeled.labeled and not unlabeled.labeled
    assert "y_nodes" not in json.loads((tmp_path / "hold" / "sample-000.json").read_text())
    np.testing.assert_array_equal(labeled.x_nodes, labeled_samples[0].x_nodes)
    assert read_samples([tmp_path / "empty"]) == []


def test_checkpoint_preserves_predictions(tmp_path, labeled_samples, tiny_regressors, tiny_train_config):
    ckpt = train(NODE, labeled_samples, tiny_train_config, tiny_regressors[0]).checkpoint
    path = write_checkpoint(tmp_path / "node.json", ckpt)

    back = read_checkpoint(path)

    sample = apply_standardizer(back.standardizer, labeled_samples[0])
    np.testing.assert_array_equal(back.model.predict(sample), ckpt.model.predict(sample))
    assert back.calibration == ckpt.calibration
    assert back.standardizer.backend_ids == ckpt.standardizer.backend_ids
    assert back.model.target == ckpt.model.target
    assert not back.model.target.is_identity


def test_checkpoint_with_missing_blocks_is_rejected(tmp_path, labeled_samples, tiny_regressors, tiny_train_config):
    ckpt = train(NODE, labeled_samples, tiny_train_config, tiny_regressors[0]).checkpoint
    path = write_checkpoint(tmp_path / "node.json", ckpt)
    doc = json.loads(path.read_text())
    del doc["params"]["g_v.W0"]
    path.write_text(json.dumps(doc))

    with pytest.raises(SchemaError):
        read_checkpoint(path)


def test_tables_write_exact_floats(tmp_path):
    path = write_table(tmp_path / "t.csv", ["metric", "value"], [("rmse", 0.1 + 0.2), ("count", 3)])
    assert path.read_text() == "metric,value\nrmse,0.30000000000000004\ncount,3\n"


def test_manifest_verifies_and_detects_tampering(tmp_path):
    (tmp_path / "a.json").write_text("{}\n")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.csv").write_text("x\n")
    manifest = ExperimentManifest(command="test", master_seed=3, sub_seeds={"pools": 7})

    path = write_manifest(tmp_path, manifest)

    doc = json.loads(path.read_text())
    assert sorted(doc["outputs"]) == ["a.json", "sub/b.csv"]
    assert "timing" not in doc
    assert "started" not in doc
    assert doc["master_seed"] == 3
    assert verify_manifest(tmp_path) == []

    (tmp_path / "sub" / "b.csv").write_text("y\n")
    assert verify_manifest(tmp_path) == ["sub/b.csv"]


def test_manifest_records_timing_on_request(tmp_path):
    path = write_manifest(tmp_path, ExperimentManifest(command="t", master_seed=0), record_timing=True)
    assert "wall_seconds" in json.loads(path.read_text())["timing"]


def test_manifest_for_selected_files(tmp_path):
    (tmp_path / "node.json").write_text("{}\n")
    (tmp_path / "other.json").write_text("{}\n")

    write_manifest(tmp_path, ExperimentManifest(command="train", master_seed=0), files=[tmp_path / "node.json"], name="node.manifest.json")

    assert list(json.loads((tmp_path / "node.manifest.json").read_text())["outputs"]) == ["node.json"]
    assert verify_manifest(tmp_path, "node.manifest.json") == []
