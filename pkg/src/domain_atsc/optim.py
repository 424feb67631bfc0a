from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(model: torch.nn.Module, grads: dict[str, torch.Tensor],
              state: AdamState) -> tuple[torch.nn.Module, AdamState]:
    """Bias-corrected Adam update applied in place; moments are created lazily on the first step."""
    params = dict(model.named_parameters())
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient {name} does not match a parameter")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))
    return model, state
