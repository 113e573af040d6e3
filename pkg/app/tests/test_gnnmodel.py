from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import FeatureError
from app.services.backend import ErrorMap
from app.services.features import F_E, F_V, GraphSample, apply_standardizer, fit_standardizer
from app.services.gnnmodel import (
    EDGE,
    NODE,
    EdgeRegressor,
    NodeRegressor,
    RegressorConfig,
    TargetScale,
    fit_target_scale,
    regressor_class,
)
from app.services.graphcore import canonicalize_edges, gen_topology
from app.services.neural import EVAL, TRAIN, grad_check


@pytest.fixture
def standardized(labeled_samples):
    std = fit_standardizer(labeled_samples)
    return [apply_standardizer(std, s) for s in labeled_samples]


def _config(kind, **extra):
    delta_key = "huber_delta_node" if kind == NODE else "huber_delta_edge"
    return RegressorConfig.for_kind(kind, {"hidden": 4, "dropout": 0.0, delta_key: 10.0, **extra})


@pytest.mark.parametrize("cls", [NodeRegressor, EdgeRegressor])
def test_loss_gradients_match_finite_differences(cls, standardized):
    model = cls.init(_config(cls.kind), seed=3)
    sample = standardized[0]

    err = grad_check(lambda p: model.loss(sample, EVAL, None, p), model.params, max_entries=6)

    assert err < 1e-4


def test_edge_head_on_h1_also_checks_out(standardized):
    model = EdgeRegressor.init(_config(EDGE, edge_head_input="h1"), seed=3)
    err = grad_check(lambda p: model.loss(standardized[1], EVAL, None, p), model.params, max_entries=6)
    assert err < 1e-4


def test_output_shapes_and_positivity(standardized):
    sample = standardized[0]
    node = NodeRegressor.init(_config(NODE), seed=0)
    edge = EdgeRegressor.init(_config(EDGE), seed=0)

    assert node.forward(sample).shape == (sample.graph.n, 1)
    assert node.predict(sample).shape == (sample.graph.n,)
    y_edges = edge.predict(sample)
    assert y_edges.shape == (sample.graph.n_edges,)
    assert np.all(y_edges > 0)


def test_init_is_seeded(standardized):
    a = NodeRegressor.init(_config(NODE), seed=4)
    b = NodeRegressor.init(_config(NODE), seed=4)
    c = NodeRegressor.init(_config(NODE), seed=5)

    assert a.params.keys() == b.params.keys()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["phi_v.W0"], c.params["phi_v.W0"])
    np.testing.assert_array_equal(a.predict(standardized[0]), b.predict(standardized[0]))


def test_train_mode_dropout_is_seeded(standardized):
    model = NodeRegressor.init(RegressorConfig.for_kind(NODE, {"hidden": 8, "dropout": 0.5}), seed=0)
    sample = standardized[0]

    a = model.forward(sample, TRAIN, dropout_seed=1).value
    b = model.forward(sample, TRAIN, dropout_seed=1).value

    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, model.forward(sample, EVAL).value)


def test_unstandardized_sample_rejected(labeled_samples):
    model = NodeRegressor.init(_config(NODE), seed=0)
    with pytest.raises(FeatureError):
        model.predict(labeled_samples[0])


def test_feature_width_mismatch_rejected(standardized):
    model = NodeRegressor.init(_config(NODE), seed=0, node_in=3)
    with pytest.raises(FeatureError):
        model.predict(standardized[0])


def test_masked_out_labels_are_ignored(standardized):
    sample = standardized[0]
    n, m = sample.graph.n, sample.graph.n_edges
    mask_nodes = np.ones(n, dtype=bool)
    mask_nodes[0] = False
    labels = ErrorMap.from_values(np.full(n, 1e-3), np.full(m, 1e-2), mask_nodes=mask_nodes)
    partial = sample.with_labels(labels)
    assert np.isnan(partial.y_nodes[0])

    model = NodeRegressor.init(_config(NODE), seed=0)
    loss = model.loss(partial)

    assert np.isfinite(float(loss.value))


def test_edge_head_on_h0_skips_message_passing(standardized):
    model = EdgeRegressor.init(_config(EDGE), seed=0)
    leaves = model.leaves()
    model.loss(standardized[0], EVAL, None, leaves).backward()

    assert leaves["phi_m0.W0"].grad is None
    assert leaves["g_e.W0"].grad is not None


def test_regressor_config_validation():
    with pytest.raises(ValueError):
        RegressorConfig(hidden=0)
    with pytest.raises(ValueError):
        RegressorConfig(edge_head_input="h2")
    assert RegressorConfig.for_kind(EDGE).target == "softplus-edge"
    with pytest.raises(ValueError):
        regressor_class("graph")


# Relabelling and symmetry
def _random_sample(graph, rng):
    return GraphSample(
        backend_id="b",
        pool_index=0,
        graph=graph,
        x_nodes=rng.standard_normal((graph.n, F_V)),
        x_edges=rng.standard_normal((graph.n_edges, F_E)),
        mask_nodes=np.ones(graph.n, dtype=bool),
        mask_edges=np.ones(graph.n_edges, dtype=bool),
        standardized=True,
    )


def _relabelled(sample, perm):
    g = sample.graph
    h = canonicalize_edges([(perm[u], perm[v]) for u, v in g.edges], g.n)
    rows = [h.index_of(perm[u], perm[v]) for u, v in g.edges]
    x_nodes = np.empty_like(sample.x_nodes)
    x_nodes[perm] = sample.x_nodes
    x_edges = np.empty_like(sample.x_edges)
    x_edges[rows] = sample.x_edges
    return replace(sample, graph=h, x_nodes=x_nodes, x_edges=x_edges), rows


TOPOLOGIES = [("ring", {"n": 5}), ("grid", {"rows": 2, "cols": 3}), ("heavyhex-like", {"n": 8, "row_length": 4})]


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(TOPOLOGIES), st.sampled_from(["h0", "h1"]), st.integers(0, 2**16), st.data())
def test_relabelling_qubits_permutes_predictions(topology, head_input, seed, data):
    graph = gen_topology(*topology)
    perm = data.draw(st.permutations(range(graph.n)))
    sample = _random_sample(graph, np.random.default_rng(seed))
    moved, rows = _relabelled(sample, perm)
    node = NodeRegressor.init(_config(NODE), seed=1)
    edge = EdgeRegressor.init(_config(EDGE, edge_head_input=head_input), seed=1)

    np.testing.assert_allclose(node.predict(moved)[perm], node.predict(sample), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(edge.predict(moved)[rows], edge.predict(sample), rtol=1e-9, atol=1e-12)


def test_mirror_image_qubits_get_equal_predictions(path3):
    rng = np.random.default_rng(0)
    sample = _random_sample(path3, rng)
    x_nodes = sample.x_nodes.copy()
    x_nodes[2] = x_nodes[0]
    x_edges = np.vstack([sample.x_edges[0], sample.x_edges[0]])
    sample = replace(sample, x_nodes=x_nodes, x_edges=x_edges)

    y_nodes = NodeRegressor.init(_config(NODE), seed=2).predict(sample)
    y_edges = EdgeRegressor.init(_config(EDGE, edge_head_input="h1"), seed=2).predict(sample)

    assert y_nodes[0] == pytest.approx(y_nodes[2], rel=1e-12)
    assert y_edges[0] == pytest.approx(y_edges[1], rel=1e-12)


# Target scale
def test_all_zero_edge_model_predicts_ln2(standardized):
    model = EdgeRegressor.init(_config(EDGE), seed=0).zeroed()

    np.testing.assert_allclose(model.predict(standardized[0]), np.log(2.0), rtol=1e-15)


def test_target_scale_fits_the_label_spread():
    labels = [np.array([1e-4, 3e-4, np.nan]), np.array([2e-4])]
    masks = [np.array([True, True, False]), np.array([True])]

    node = fit_target_scale(NODE, labels, masks)
    t = np.log1p([1e-4, 3e-4, 2e-4])
    assert node.shift == pytest.approx(t.mean())
    assert node.scale == pytest.approx(t.std())
    assert node.loss_scale == node.scale

    edge = fit_target_scale(EDGE, [np.array([1e-2, 2e-2])], [np.array([True, True])])
    assert edge.shift == pytest.approx(np.mean(np.log(np.expm1([1e-2, 2e-2]))))
    assert edge.loss_scale == pytest.approx(5e-3)

    flat = fit_target_scale(NODE, [np.full(3, 2e-4)], [np.ones(3, dtype=bool)])
    assert flat.scale == 1.0
    with pytest.raises(FeatureError):
        fit_target_scale(EDGE, [np.array([1e-2])], [np.array([False])])


def test_scaled_heads_map_zero_output_to_the_shift(standardized):
    sample = standardized[0]
    target = TargetScale(shift=float(np.log1p(2e-4)), scale=1e-4, loss_scale=1e-4)
    node = NodeRegressor.init(_config(NODE), seed=0, target=target).zeroed()

    np.testing.assert_allclose(node.predict(sample), 2e-4, rtol=1e-9)
    assert node.copy().target == target


@pytest.mark.parametrize(
    "cls, target",
    [
        (NodeRegressor, TargetScale(shift=2e-4, scale=1e-4, loss_scale=1e-4)),
        (EdgeRegressor, TargetScale(shift=-4.6, scale=0.4, loss_scale=5e-3)),
    ],
)
def test_scaled_objective_gradients_match_finite_differences(cls, target, standardized):
    model = cls.init(_config(cls.kind), seed=3, target=target)
    sample = standardized[0]

    err = grad_check(lambda p: model.loss(sample, EVAL, None, p), model.params, max_entries=6)

    assert err < 1e-4
    unscaled = cls(model.config, model.params, target=replace(target, loss_scale=1.0))
    ratio = float(model.loss(sample).value) / float(unscaled.loss(sample).value)
    assert ratio == pytest.approx(1.0 / target.loss_scale**2, rel=1e-9)
