"""Random logical-circuit generator and the circuit / pool data model."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.config import logger
from app.services.seeds import derive_seed

ROT1Q = "rot1q"
CX = "cx"


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: Tuple[int, ...]
    angles: Tuple[float, ...] = ()

    @classmethod
    def rot(cls, qubit: int, angles: Tuple[float, float, float]) -> "Gate":
        return cls(ROT1Q, (int(qubit),), tuple(float(a) for a in angles))

    @classmethod
    def cx(cls, control: int, target: int) -> "Gate":
        if control == target:
            raise ValueError(f"CX control and target must differ, got {control}")
        return cls(CX, (int(control), int(target)))


@dataclass(frozen=True)
class CircuitMeta:
    seed: int
    active_width: int
    cx_budget: int


@dataclass(frozen=True)
class Circuit:
    width: int
    gates: Tuple[Gate, ...]
    meta: CircuitMeta

    def __post_init__(self):
        for g in self.gates:
            if any(not 0 <= q < self.width for q in g.qubits):
                raise ValueError(f"gate {g.kind}{g.qubits} exceeds circuit width {self.width}")
        if self.cx_count > self.meta.cx_budget:
            raise ValueError(f"circuit has {self.cx_count} CX gates, budget is {self.meta.cx_budget}")

    @property
    def cx_count(self) -> int:
        return sum(1 for g in self.gates if g.kind == CX)

    def active_qubits(self) -> Tuple[int, ...]:
        return tuple(sorted({q for g in self.gates for q in g.qubits}))


@dataclass(frozen=True)
class CircuitPool:
    circuits: Tuple[Circuit, ...]
    backend_id: str
    pool_index: int
    master_seed: int

    def __len__(self):
        return len(self.circuits)


@dataclass(frozen=True)
class CircuitConfig:
    depth_cap: int = 64
    # None means "2 * |E| of the target backend", resolved by the caller
    budget_max: Optional[int] = None


def gen_circuit(n_qubits: int, seed: int, cfg: Optional[CircuitConfig] = None) -> Circuit:
    """Alternates rotation layers on an active subset with CX layers on random matchings.

    The final matching is truncated so the CX count hits cx_budget exactly,
    unless depth_cap layers are exhausted first.
    """
    cfg = cfg or CircuitConfig()
    if n_qubits < 1:
        raise ValueError(f"n_qubits must be >= 1, got {n_qubits}")
    if cfg.depth_cap < 1:
        raise ValueError(f"depth_cap must be >= 1, got {cfg.depth_cap}")
    budget_max = cfg.budget_max if cfg.budget_max is not None else 2 * n_qubits

    rng = np.random.default_rng(seed)
    w = int(rng.integers(1, n_qubits + 1))
    cx_budget = int(rng.integers(0, budget_max + 1))
    active = np.sort(rng.choice(n_qubits, size=w, replace=False))

    gates = []
    remaining = cx_budget
    layers = 0
    while True:
        for q in active:
            gates.append(Gate.rot(int(q), tuple(rng.uniform(0.0, 2 * np.pi, 3))))
        layers += 1

        if remaining > 0 and w >= 2:
            order = rng.permutation(active)
            pairs = [(int(order[i]), int(order[i + 1])) for i in range(0, w - 1, 2)]
            for control, target in pairs[:remaining]:
                gates.append(Gate.cx(control, target))
            remaining -= min(remaining, len(pairs))

        if remaining == 0 or w < 2 or layers >= cfg.depth_cap:
            break

    return Circuit(
        width=n_qubits,
        gates=tuple(gates),
        meta=CircuitMeta(seed=int(seed), active_width=w, cx_budget=cx_budget),
    )


def circuit_seed(master_seed: int, pool_index: int, circuit_index: int) -> int:
    return derive_seed(master_seed, pool_index, circuit_index)


def gen_pool(
    n_qubits: int,
    M: int,
    master_seed: int,
    pool_index: int,
    cfg: Optional[CircuitConfig] = None,
    backend_id: str = "",
) -> CircuitPool:
    if M < 1:
        raise ValueError(f"a pool needs at least one circuit, got M={M}")
    circuits = tuple(
        gen_circuit(n_qubits, circuit_seed(master_seed, pool_index, i), cfg) for i in range(M)
    )
    logger.debug(f"Generated pool {pool_index} for '{backend_id}' with {M} circuits")
    return CircuitPool(circuits=circuits, backend_id=backend_id, pool_index=pool_index, master_seed=int(master_seed))
