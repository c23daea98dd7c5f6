"""SGD and LAMB over a dict of named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import Matrix, NonFiniteError

# Parameters exempt from weight decay.
NO_DECAY = frozenset({"log_tau"})


class OptimizerKind(str, Enum):
    SGD = "sgd"
    LAMB = "lamb"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.LAMB
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, Matrix] = field(default_factory=dict)
    exp_avg_sq: dict[str, Matrix] = field(default_factory=dict)


def _decay(name: str, config: OptimizerConfig) -> float:
    return 0.0 if name in NO_DECAY else config.weight_decay


def optimizer_step(params: dict[str, Matrix], grads: dict[str, Matrix], config: OptimizerConfig,
                   state: OptimizerState | None = None) -> dict[str, Matrix]:
    """Return updated parameters; ``state`` (LAMB moments) is updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient {name} has non-finite entries")
    lr = config.learning_rate
    if config.kind is OptimizerKind.SGD:
        return {name: p - lr * (grads[name] + _decay(name, config) * p) for name, p in params.items()}

    if state is None:
        state = OptimizerState()
    beta1, beta2 = config.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg.get(name, np.zeros_like(p))
        v = state.exp_avg_sq.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps) + _decay(name, config) * p
        w_norm = float(np.sqrt((p * p).sum()))
        u_norm = float(np.sqrt((update * update).sum()))
        trust = w_norm / u_norm if w_norm > 0 and u_norm > 0 else 1.0
        out[name] = p - lr * trust * update
    return out
