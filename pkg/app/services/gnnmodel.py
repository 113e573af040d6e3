"""Edge-aware message-passing regressors for per-qubit and per-coupling error rates.

    h0_v = phi_V(X_v)            e_e = phi_E(X_e)
    m_uv = phi_M([h_u | h_v | e_uv])          for each directed arc u -> v
    a_v  = mean of incoming m_uv              (divisor max(1, deg v))
    h1_v = phi_U([h0_v | a_v])
    node:  z_v = g_V(h1_v),  y_v = exp(z_v) - 1        (trained in log1p space)
    edge:  y_e = softplus(g_E(h0_u, h0_v, e_e)),  g_E averaged over both endpoint orders

Both heads emit standardized units: a frozen TargetScale (shift, scale) fitted
on the training labels maps the head output g to shift + scale * g before the
inverse transform. The identity scale leaves the formulas above untouched.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from app.errors import FeatureError
from app.services.features import F_E, F_V, GraphSample
from app.services.neural import (
    EVAL,
    TRAIN,
    MlpSpec,
    Tensor,
    add,
    add_bias,
    concat,
    const,
    gather,
    init_mlp,
    leaf,
    masked_huber_mean,
    mlp_apply,
    scale,
    segment_mean,
    softplus_op,
)
from app.services.seeds import rng_for

NODE = "node"
EDGE = "edge"
KINDS = (NODE, EDGE)


@dataclass(frozen=True)
class RegressorConfig:
    hidden: int = 64
    rounds: int = 1
    block_depth: int = 2
    dropout: float = 0.1
    huber_delta: float = 1e-4
    target: str = "log1p-node"
    edge_head_input: str = "h0"

    def __post_init__(self):
        if self.hidden < 1 or self.rounds < 1 or self.block_depth < 1:
            raise ValueError("hidden, rounds and block_depth must all be >= 1")
        if self.huber_delta <= 0:
            raise ValueError(f"huber delta must be > 0, got {self.huber_delta}")
        if self.target not in ("log1p-node", "softplus-edge"):
            raise ValueError(f"unknown target transform '{self.target}'")
        if self.edge_head_input not in ("h0", "h1"):
            raise ValueError(f"edge_head_input must be 'h0' or 'h1', got '{self.edge_head_input}'")

    @classmethod
    def for_kind(cls, kind: str, conf: Optional[Dict[str, Any]] = None) -> "RegressorConfig":
        conf = dict(conf or {})
        delta_key = "huber_delta_node" if kind == NODE else "huber_delta_edge"
        return cls(
            hidden=int(conf.get("hidden", 64)),
            rounds=int(conf.get("rounds", 1)),
            block_depth=int(conf.get("block_depth", 2)),
            dropout=float(conf.get("dropout", 0.1)),
            huber_delta=float(conf.get(delta_key, 1e-4 if kind == NODE else 1e-3)),
            target="log1p-node" if kind == NODE else "softplus-edge",
            edge_head_input=str(conf.get("edge_head_input", "h0")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TargetScale:
    """Frozen affine map from head output to target space, plus the loss normalizer.

    shift/scale live in the head's pre-transform space (log1p for nodes,
    inverse softplus for edges); loss_scale is the spread of the labels in the
    space the loss compares them in. The training objective is the masked
    Huber loss divided by loss_scale**2, which leaves its minimizers unchanged.
    """

    shift: float = 0.0
    scale: float = 1.0
    loss_scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.shift) and self.scale > 0 and self.loss_scale > 0):
            raise ValueError(f"invalid target scale {self}")

    @property
    def is_identity(self) -> bool:
        return self.shift == 0.0 and self.scale == 1.0 and self.loss_scale == 1.0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _spread(values: np.ndarray) -> float:
    sd = float(np.std(values))
    return sd if sd > 1e-12 * max(1.0, float(np.max(np.abs(values)))) else 1.0


def fit_target_scale(kind: str, labels: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> TargetScale:
    """Mean/std of the masked-in training labels in the head's pre-transform space."""
    y = np.concatenate([np.asarray(v, dtype=np.float64)[np.asarray(m, dtype=bool)] for v, m in zip(labels, masks)])
    if y.size == 0:
        raise FeatureError(f"no {kind} labels to fit a target scale on")
    if kind == NODE:
        t = np.log1p(y)
        return TargetScale(shift=float(t.mean()), scale=_spread(t), loss_scale=_spread(t))
    # inverse softplus; labels are floored well above zero
    t = np.log(np.expm1(np.maximum(y, 1e-12)))
    return TargetScale(shift=float(t.mean()), scale=_spread(t), loss_scale=_spread(y))


def _to_target(g: Tensor, target: TargetScale) -> Tensor:
    return add_bias(scale(g, target.scale), const(np.array([target.shift])))


def _block(cfg: RegressorConfig, fan_in: int, fan_out: int) -> MlpSpec:
    return MlpSpec(widths=(fan_in,) + (cfg.hidden,) * (cfg.block_depth - 1) + (fan_out,), dropout=cfg.dropout)


class MessagePassingRegressor:
    """Shared encoder / message / update stack; subclasses pick the head."""

    kind = ""

    def __init__(
        self,
        config: RegressorConfig,
        params: Dict[str, np.ndarray],
        node_in: int = F_V,
        edge_in: int = F_E,
        target: Optional[TargetScale] = None,
    ):
        self.config = config
        self.params = params
        self.node_in = node_in
        self.edge_in = edge_in
        self.target = target or TargetScale()

    # block layout --------------------------------------------------------

    def blocks(self) -> Dict[str, MlpSpec]:
        cfg, H = self.config, self.config.hidden
        specs = {
            "phi_v": _block(cfg, self.node_in, H),
            "phi_e": _block(cfg, self.edge_in, H),
        }
        for r in range(cfg.rounds):
            specs[f"phi_m{r}"] = _block(cfg, 3 * H, H)
            specs[f"phi_u{r}"] = _block(cfg, 2 * H, H)
        specs.update(self.head_blocks())
        return specs

    def head_blocks(self) -> Dict[str, MlpSpec]:
        raise NotImplementedError

    @classmethod
    def init(
        cls,
        config: RegressorConfig,
        seed: int,
        node_in: int = F_V,
        edge_in: int = F_E,
        target: Optional[TargetScale] = None,
    ) -> "MessagePassingRegressor":
        model = cls(config, {}, node_in, edge_in, target)
        for name, spec in model.blocks().items():
            model.params.update(init_mlp(spec, rng_for(seed, "init", cls.kind, name), name))
        return model

    def zeroed(self) -> "MessagePassingRegressor":
        return type(self)(
            self.config, {k: np.zeros_like(v) for k, v in self.params.items()}, self.node_in, self.edge_in, self.target
        )

    def copy(self) -> "MessagePassingRegressor":
        return type(self)(self.config, {k: v.copy() for k, v in self.params.items()}, self.node_in, self.edge_in, self.target)

    def objective(self, loss: Tensor) -> Tensor:
        """Huber loss rescaled to unit label spread; this is what the optimizer descends."""
        return loss if self.target.is_identity else scale(loss, 1.0 / self.target.loss_scale**2)

    # forward ---------------------------------------------------------------

    def embed(
        self,
        sample: GraphSample,
        params: Dict[str, Tensor],
        mode: str,
        dropout_seed: Optional[int],
        propagate: bool = True,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """Returns (h0, h_final, edge embedding); h_final is h0 when propagate is False."""
        if not sample.standardized:
            raise FeatureError(f"sample {sample.backend_id}/{sample.pool_index} has not been standardized")
        if sample.x_nodes.shape[1] != self.node_in or sample.x_edges.shape[1] != self.edge_in:
            raise FeatureError(
                f"feature widths {sample.x_nodes.shape[1]}/{sample.x_edges.shape[1]} "
                f"do not match model widths {self.node_in}/{self.edge_in}"
            )
        specs = self.blocks()
        rng = rng_for(dropout_seed, "dropout") if mode == TRAIN and dropout_seed is not None else None

        def run(name: str, x: Tensor) -> Tensor:
            return mlp_apply(specs[name], params, x, name, mode, rng)

        graph = sample.graph
        ends = graph.edge_array
        src = np.concatenate([ends[:, 0], ends[:, 1]])
        dst = np.concatenate([ends[:, 1], ends[:, 0]])
        arc_edge = np.concatenate([np.arange(graph.n_edges)] * 2)

        h0 = run("phi_v", const(sample.x_nodes))
        e = run("phi_e", const(sample.x_edges))
        h = h0
        for r in range(self.config.rounds if propagate else 0):
            msg = run(f"phi_m{r}", concat([gather(h, src), gather(h, dst), gather(e, arc_edge)]))
            agg = segment_mean(msg, dst, graph.n)
            h = run(f"phi_u{r}", concat([h, agg]))
        return h0, h, e

    def forward(self, sample: GraphSample, mode: str = EVAL, dropout_seed: Optional[int] = None, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        raise NotImplementedError

    def loss(self, sample: GraphSample, mode: str = EVAL, dropout_seed: Optional[int] = None, params: Optional[Dict[str, Tensor]] = None, labels: Optional[np.ndarray] = None) -> Tensor:
        raise NotImplementedError

    def predict(self, sample: GraphSample) -> np.ndarray:
        """Eval-mode prediction in error-rate space."""
        raise NotImplementedError

    def _tensors(self, params: Optional[Dict[str, Tensor]]) -> Dict[str, Tensor]:
        return params if params is not None else {k: const(v) for k, v in self.params.items()}

    def leaves(self) -> Dict[str, Tensor]:
        return {k: leaf(v, k) for k, v in self.params.items()}


class NodeRegressor(MessagePassingRegressor):
    kind = NODE

    def head_blocks(self) -> Dict[str, MlpSpec]:
        return {"g_v": MlpSpec(widths=(self.config.hidden, 1), dropout=0.0)}

    def forward(self, sample, mode=EVAL, dropout_seed=None, params=None) -> Tensor:
        return forward_node(self, sample, mode, dropout_seed, params)

    def loss(self, sample, mode=EVAL, dropout_seed=None, params=None, labels=None) -> Tensor:
        z = self.forward(sample, mode, dropout_seed, params)
        y = sample.y_nodes if labels is None else labels
        return self.objective(loss_node(z, y, sample.mask_nodes, self.config.huber_delta))

    def predict(self, sample: GraphSample) -> np.ndarray:
        return np.expm1(self.forward(sample, EVAL).value[:, 0])


class EdgeRegressor(MessagePassingRegressor):
    kind = EDGE

    def head_blocks(self) -> Dict[str, MlpSpec]:
        return {"g_e": _block(self.config, 3 * self.config.hidden, 1)}

    def forward(self, sample, mode=EVAL, dropout_seed=None, params=None) -> Tensor:
        return forward_edge(self, sample, mode, dropout_seed, params)

    def loss(self, sample, mode=EVAL, dropout_seed=None, params=None, labels=None) -> Tensor:
        y_hat = self.forward(sample, mode, dropout_seed, params)
        y = sample.y_edges if labels is None else labels
        return self.objective(loss_edge(y_hat, y, sample.mask_edges, self.config.huber_delta))

    def predict(self, sample: GraphSample) -> np.ndarray:
        return self.forward(sample, EVAL).value[:, 0]


def forward_node(model: NodeRegressor, sample: GraphSample, mode: str = EVAL, dropout_seed=None, params=None) -> Tensor:
    """Log-space prediction z per node, shape (n, 1)."""
    tensors = model._tensors(params)
    _, h, _ = model.embed(sample, tensors, mode, dropout_seed)
    return _to_target(mlp_apply(model.blocks()["g_v"], tensors, h, "g_v", mode), model.target)


def forward_edge(model: EdgeRegressor, sample: GraphSample, mode: str = EVAL, dropout_seed=None, params=None) -> Tensor:
    """Strictly positive prediction per canonical edge, shape (|E|, 1)."""
    tensors = model._tensors(params)
    use_h1 = model.config.edge_head_input == "h1"
    h0, h, e = model.embed(sample, tensors, mode, dropout_seed, propagate=use_h1)
    nodes = h if use_h1 else h0
    ends = sample.graph.edge_array
    rng = rng_for(dropout_seed, "dropout-head") if mode == TRAIN and dropout_seed is not None else None
    spec = model.blocks()["g_e"]
    # symmetric in the endpoint order
    fwd = mlp_apply(spec, tensors, concat([gather(nodes, ends[:, 0]), gather(nodes, ends[:, 1]), e]), "g_e", mode, rng)
    rev = mlp_apply(spec, tensors, concat([gather(nodes, ends[:, 1]), gather(nodes, ends[:, 0]), e]), "g_e", mode, rng)
    return softplus_op(_to_target(scale(add(fwd, rev), 0.5), model.target))


def loss_node(z_hat: Tensor, labels: np.ndarray, mask: np.ndarray, delta: float) -> Tensor:
    """Masked Huber loss on z_hat - log(1 + y)."""
    labels = np.asarray(labels, dtype=np.float64)
    target = np.log1p(np.where(mask, labels, 0.0))
    return masked_huber_mean(z_hat, target, mask, delta)


def loss_edge(y_hat: Tensor, labels: np.ndarray, mask: np.ndarray, delta: float) -> Tensor:
    """Masked Huber loss on raw-space residuals."""
    return masked_huber_mean(y_hat, labels, mask, delta)


def regressor_class(kind: str):
    if kind == NODE:
        return NodeRegressor
    if kind == EDGE:
        return EdgeRegressor
    raise ValueError(f"unknown regressor kind '{kind}', expected one of {KINDS}")
