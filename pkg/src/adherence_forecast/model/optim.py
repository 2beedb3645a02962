"""AdamW with decoupled weight decay (weights only; biases and norm params exempt)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import ModelParameters


def decays(name: str) -> bool:
    return name.endswith(".weight")


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def for_params(cls, params: ModelParameters, lr: float, **kw) -> "OptimizerState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls(lr=lr, m=zeros, v={k: z.copy() for k, z in zeros.items()}, **kw)


def adamw_step(params: ModelParameters, grads: dict[str, np.ndarray],
               state: OptimizerState) -> tuple[ModelParameters, OptimizerState]:
    """One bias-corrected AdamW update; returns new parameters and state."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if decays(name) and state.weight_decay:
            p = p * (1.0 - state.lr * state.weight_decay)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_arrays[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(state.lr, state.weight_decay, b1, b2, state.eps, step,
                               new_m, new_v)
    return ModelParameters(params.hp, new_arrays), new_state
