"""Central finite-difference check of analytic gradients, one relative error per parameter tensor."""
from __future__ import annotations

from typing import Callable

import torch

from .model import EncoderModel, backward


GRAD_FLOOR = 1e-6


def finite_difference_check(model: EncoderModel, loss_fn: Callable[[EncoderModel], torch.Tensor],
                            step: float = 1e-4, max_entries: int = 24, seed: int = 0) -> dict[str, float]:
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6) per parameter.

    The floor keeps tensors whose true gradient is zero (key biases, for instance, cancel inside
    the softmax) from turning finite-difference noise into a relative error of 1.

    `model` should be in float64.  Tensors with more than `max_entries` entries are checked on a
    seeded sample, half drawn from entries with nonzero analytic gradient and half uniformly.
    """
    analytic = backward(model, loss_fn(model))
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name, param in model.named_parameters():
        grad = analytic[name].reshape(-1)
        flat = param.data.view(-1)
        if flat.numel() <= max_entries:
            idx = torch.arange(flat.numel())
        else:
            nonzero = torch.nonzero(grad).reshape(-1)
            half = max_entries // 2
            picks = nonzero[torch.randperm(nonzero.numel(), generator=gen)[:half]]
            rest = torch.randint(flat.numel(), (max_entries - picks.numel(),), generator=gen)
            idx = torch.unique(torch.cat([picks, rest]))
        numeric = torch.empty(idx.numel(), dtype=torch.float64)
        with torch.no_grad():
            for k, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn(model).item()
                flat[i] = orig - step
                down = loss_fn(model).item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * step)
        a = grad[idx].to(torch.float64)
        scale = max(a.norm().item(), numeric.norm().item(), GRAD_FLOOR)
        errors[name] = (a - numeric).norm().item() / scale
    return errors
