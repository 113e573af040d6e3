import hypothesis
import numpy as np
import pytest

from app.services.backend import BackendSpec, ErrorMap, sample_backend
from app.services.circuit import CircuitConfig, gen_pool
from app.services.experiments import StudyConfig, featurize, training_labels
from app.services.features import static_features
from app.services.gnnmodel import EDGE, NODE, RegressorConfig
from app.services.graphcore import canonicalize_edges, gen_topology
from app.services.pipeline import TrainConfig
from app.services.transpiler import transpile_pool

hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.load_profile("ci")


# 1. Desk-scale runs are opt-in
def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run desk-scale acceptance studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs, enabled with --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# 2. Graphs and backends
@pytest.fixture
def path3():
    return canonicalize_edges([(0, 1), (1, 2)], 3, kind="path")


@pytest.fixture
def ring4():
    return gen_topology("ring", {"n": 4})


@pytest.fixture
def small_heavyhex():
    return gen_topology("heavyhex-like", {"n": 8, "row_length": 4}, seed=0)


@pytest.fixture
def make_backend():
    """Builds a BackendSpec from explicit node/edge error lists."""

    def _make(graph, nodes, edges, backend_id="test-backend"):
        return BackendSpec(id=backend_id, graph=graph, errors=ErrorMap.from_values(nodes, edges))

    return _make


@pytest.fixture
def small_backend(small_heavyhex):
    return sample_backend(small_heavyhex, seed=11, backend_id="small")


# 3. Tiny datasets and study configuration
def _samples_for(spec, seed, pools=3, circuits=5):
    cfg = CircuitConfig(depth_cap=16, budget_max=2 * spec.graph.n_edges)
    static = static_features(spec.graph)
    labels = training_labels(spec, seed)
    out = []
    for p in range(pools):
        pool = gen_pool(spec.graph.n, circuits, seed, p, cfg, spec.id)
        out.append(featurize(spec.id, spec.graph, p, transpile_pool(pool, spec), static, labels))
    return out


@pytest.fixture
def tiny_fleet(small_heavyhex):
    return [sample_backend(small_heavyhex, seed=100 + i, backend_id=f"backend-{i}") for i in range(3)]


@pytest.fixture
def labeled_samples(tiny_fleet):
    """Three labeled pools for each of the first two backends."""
    return [s for spec in tiny_fleet[:2] for s in _samples_for(spec, seed=7)]


@pytest.fixture
def holdout_samples(tiny_fleet):
    spec = tiny_fleet[2]
    return [s.without_labels() for s in _samples_for(spec, seed=7)]


@pytest.fixture
def tiny_regressors():
    return (
        RegressorConfig.for_kind(NODE, {"hidden": 6, "dropout": 0.0}),
        RegressorConfig.for_kind(EDGE, {"hidden": 6, "dropout": 0.0}),
    )


@pytest.fixture
def tiny_train_config():
    return TrainConfig(max_epochs=3, patience=2, seed=5)


@pytest.fixture
def tiny_study(tiny_regressors, tiny_train_config):
    node, edge = tiny_regressors
    return StudyConfig(
        n_backends=3,
        qubits=8,
        topology="heavyhex-like",
        topology_params={"row_length": 4},
        pools=3,
        circuits=5,
        top_k=3,
        pool_counts=(1, 3),
        backend_counts=(1, 2),
        seeds=(0,),
        depth_cap=16,
        node_regressor=node,
        edge_regressor=edge,
        train=tiny_train_config,
    )


@pytest.fixture
def tiny_config_file(tmp_path):
    """YAML config that keeps CLI study runs small."""
    path = tmp_path / "tiny.yaml"
    path.write_text(
        "log_level: warning\n"
        "regressor:\n"
        "  hidden: 6\n"
        "  dropout: 0.0\n"
        "train:\n"
        "  max_epochs: 2\n"
        "  patience: 1\n"
        "circuit:\n"
        "  depth_cap: 16\n"
        "study:\n"
        "  top_k: 3\n"
        "  topology_params:\n"
        "    row_length: 4\n"
    )
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
