import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from models.errors import ContractError, ParameterError
from services.autodiff import Tensor

# Set up logger
logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState):
    """Bias-corrected Adam update applied in place to ``params``."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        logger.error(f"Adam step with {len(missing)} parameters lacking gradients")
        raise ContractError(f"parameters at positions {missing[:5]} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
            raise ParameterError(f"invalid Adam settings lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
