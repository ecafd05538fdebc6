"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingAbort


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. Pure: returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingAbort(f"non-finite gradient for parameter {name!r}", {"parameter": name})
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper that writes updates back into the live parameter arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, grads):
        new, self.state = adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for name, p in self.params.items():
            p[...] = new[name]
