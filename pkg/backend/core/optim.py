"""
Adam optimizer for ArtiField parameters
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Set

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments and step counts, one entry per parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_groups: Dict[str, float] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        """Learning rate of the longest matching group prefix, else the default."""
        best = None
        for prefix in self.lr_groups:
            if name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        return self.lr if best is None else self.lr_groups[best]

    @property
    def step_count(self) -> int:
        return max(self.steps.values(), default=0)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Mapping[str, Tensor]:
    """Apply one bias-corrected Adam update in place.

    Only parameters present in ``grads`` move; each keeps its own step count,
    so a latent code that sat out a step is not dragged along by stale moments.
    """
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")

        t = state.steps.get(name, 0) + 1
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param.data = param.data - state.lr_for(name) * m_hat / (np.sqrt(v_hat) + state.eps)

        state.steps[name] = t
        state.m[name] = m
        state.v[name] = v
    return params


class Adam:
    """Adam over a named parameter set with prefix learning-rate groups and freezing."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_groups: Optional[Mapping[str, float]] = None):
        self.params: Dict[str, Tensor] = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               lr_groups=dict(lr_groups or {}))
        self.frozen: Set[str] = set()

    def add_params(self, params: Mapping[str, Tensor]) -> None:
        self.params.update(params)

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen.update(names)

    def unfreeze(self, names: Iterable[str]) -> None:
        self.frozen.difference_update(names)

    def trainable(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if name not in self.frozen}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        active = {name: g for name, g in grads.items() if name not in self.frozen}
        adam_step(self.params, active, self.state)
