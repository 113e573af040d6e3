"""Minimal numerical core: a reverse-mode tape over float64 numpy arrays,
multilayer perceptrons, Huber / softplus primitives and the Adam optimizer.

Only the operators the message-passing regressors need are implemented.
Every op checks its forward value for NaN/Inf and raises NumericalError.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.errors import NumericalError

TRAIN = "train"
EVAL = "eval"


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, value, parents: Tuple["Tensor", ...] = (), backward=None, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise NumericalError(f"non-finite value produced by {name or 'tensor op'}")
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def backward(self) -> None:
        """Accumulates d(self)/d(leaf) into .grad of every tensor on the tape."""
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")

        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient flowing into {parent.name or 'tensor'}")
                parent.grad = g if parent.grad is None else parent.grad + g


def leaf(value, name: Optional[str] = None) -> Tensor:
    return Tensor(value, name=name)


def const(value) -> Tensor:
    return Tensor(value, name="const")


# --- primitives -------------------------------------------------------------


def huber(residual, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and derivative (clamped to +/- delta)."""
    if delta <= 0:
        raise ValueError(f"huber delta must be > 0, got {delta}")
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    loss = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.clip(r, -delta, delta)
    return loss, grad


def softplus(x) -> Tuple[np.ndarray, np.ndarray]:
    """ln(1 + e^x) without overflow, and its derivative (the logistic function)."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x), expit(x)


# --- tape ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        "matmul",
    )


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    return Tensor(a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g), "add")


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return Tensor(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def scale(a: Tensor, factor: np.ndarray) -> Tensor:
    return Tensor(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def concat(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor(np.hstack([p.value for p in parts]), tuple(parts), back, "concat")


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Row gather a[index]; the backward pass scatters-adds into the source rows."""
    rows = a.value.shape[0]

    def back(g):
        out = np.zeros((rows,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return Tensor(a.value[index], (a,), back, "gather")


def segment_mean(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of rows grouped by segment id; empty segments give a zero row (divisor max(1, count))."""
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    divisor = np.maximum(counts, 1.0)[:, None]
    total = np.zeros((n_segments,) + a.value.shape[1:])
    np.add.at(total, segments, a.value)
    return Tensor(total / divisor, (a,), lambda g: ((g / divisor)[segments],), "segment_mean")


def softplus_op(a: Tensor) -> Tensor:
    value, deriv = softplus(a.value)
    return Tensor(value, (a,), lambda g: (g * deriv,), "softplus")


def log1p_op(a: Tensor) -> Tensor:
    if np.any(a.value <= -1):
        raise NumericalError("log1p argument must exceed -1")
    return Tensor(np.log1p(a.value), (a,), lambda g: (g / (1.0 + a.value),), "log1p")


def masked_huber_mean(pred: Tensor, target: np.ndarray, mask: np.ndarray, delta: float) -> Tensor:
    """Mean Huber loss over masked-in components; masked-out targets never enter the sum."""
    mask = np.asarray(mask, dtype=bool).reshape(pred.value.shape)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no components")
    safe_target = np.where(mask, np.asarray(target, dtype=np.float64).reshape(pred.value.shape), 0.0)
    residual = np.where(mask, pred.value - safe_target, 0.0)
    loss, grad = huber(residual, delta)
    total = float(loss[mask].sum()) / count
    return Tensor(total, (pred,), lambda g: (g * np.where(mask, grad, 0.0) / count,), "huber")


# --- MLP --------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    widths: Tuple[int, ...]
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"MLP widths must be >= 1 with at least in/out, got {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> Dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W{i}"] = rng.uniform(-limit, limit, (fan_in, fan_out))
        params[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return params


def mlp_apply(
    spec: MlpSpec,
    params: Dict[str, Tensor],
    x: Tensor,
    prefix: str,
    mode: str = EVAL,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """affine -> ReLU (-> dropout in train mode) on hidden layers, identity on the output layer."""
    if x.value.shape[1] != spec.widths[0]:
        raise ValueError(f"MLP '{prefix}' expects width {spec.widths[0]}, got {x.value.shape[1]}")
    h = x
    for i in range(spec.n_layers):
        h = add_bias(matmul(h, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < spec.n_layers - 1:
            h = relu(h)
            if mode == TRAIN and spec.dropout > 0:
                if dropout_rng is None:
                    raise ValueError("train mode with dropout needs a dropout rng")
                keep = dropout_rng.random(h.value.shape) >= spec.dropout
                h = scale(h, keep / (1.0 - spec.dropout))
    return h


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update; params are updated in place and returned."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- gradient verification --------------------------------------------------

Forward = Callable[[Dict[str, Tensor]], Tensor]

_REL_FLOOR = 1e-8


def gradients(forward: Forward, params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    tensors = {k: leaf(v, k) for k, v in params.items()}
    out = forward(tensors)
    out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}
    return float(out.value), grads


def grad_check(
    forward: Forward,
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    analytic: Optional[Dict[str, np.ndarray]] = None,
) -> float:
    """Max over checked entries of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|), central differences.

    `max_entries` samples that many entries per parameter block; `analytic`
    overrides the reverse-mode gradients.
    """
    _, ad = gradients(forward, params)
    if analytic is not None:
        ad = analytic
    rng = np.random.default_rng(seed)

    def evaluate(p):
        return float(forward({k: const(v) for k, v in p.items()}).value)

    worst = 0.0
    for name, value in params.items():
        g_ad = ad[name]
        if not np.all(np.isfinite(g_ad)):
            raise NumericalError(f"non-finite gradient for '{name}'")
        flat = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        for idx in flat:
            shifted = {k: v.copy() for k, v in params.items()}
            shifted[name].flat[idx] += step
            up = evaluate(shifted)
            shifted[name].flat[idx] -= 2 * step
            down = evaluate(shifted)
            g_fd = (up - down) / (2 * step)
            if not np.isfinite(g_fd):
                raise NumericalError(f"non-finite finite difference for '{name}'")
            a = float(g_ad.flat[idx])
            worst = max(worst, abs(a - g_fd) / max(_REL_FLOOR, abs(a) + abs(g_fd)))
    return worst
