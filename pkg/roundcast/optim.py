"""
Loss and optimizer for the sequence classifiers.

`bce_with_logits` returns the mean loss together with its gradient on the
logits, so a training step is forward, loss, backward, `adam_step`.
`AdamState` holds the moment estimates keyed by dotted parameter name and
is created once per model; checkpoints do not store it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import LabelError, NumericError, ParameterError
from .nn import ParamSet
from .tensor import Tensor, as_tensor, sigmoid

logger = logging.getLogger(__name__)

def bce_with_logits(logits: Tensor, targets: Tensor) -> Tuple[float, Tensor]:
    """
    Mean binary cross-entropy on raw logits and its gradient w.r.t. the logits.

    Uses max(z, 0) - z*y + log(1 + exp(-|z|)), which stays finite for any
    finite logit.
    """
    z = as_tensor(logits)
    y = as_tensor(targets)
    if z.shape != y.shape:
        raise LabelError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if z.size == 0:
        raise LabelError("cannot compute a loss over zero samples")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("targets must be 0 or 1")
    per_sample = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_sample.mean())
    grad = (sigmoid(z) - y) / z.size
    return loss, grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs: float) -> "AdamState":
        state = cls(**kwargs)  # type: ignore[arg-type]
        for name, param in params:
            state.m[name] = np.zeros_like(param.value)
            state.v[name] = np.zeros_like(param.value)
        return state


def adam_step(
    params: ParamSet, state: AdamState, lr: float, weight_decay: float = 1e-4
) -> None:
    """
    One Adam update with L2 coupled into the gradient, in place.

    Gradients are zeroed afterwards. A non-finite gradient aborts the step
    before any parameter moves.
    """
    if lr < 0 or weight_decay < 0:
        raise ParameterError(
            f"lr and weight_decay must be non-negative, got {lr}, {weight_decay}"
        )
    for name, param in params:
        if not np.all(np.isfinite(param.grad)):
            logger.error(
                "Adam step %d aborted: %s has a non-finite gradient", state.t + 1, name
            )
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.value)
            state.v[name] = np.zeros_like(param.value)

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params:
        grad = param.grad + weight_decay * param.value
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.zero_grad()
