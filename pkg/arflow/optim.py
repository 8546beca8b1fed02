"""Module implementing the Adam optimizer used to train every model."""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from arflow.tensor import Tensor


@dataclass
class AdamState:
    """State of the Adam optimizer.

    Args:
        lr (float, optional): Learning rate.
        beta1 (float, optional): Decay rate of the first moment.
        beta2 (float, optional): Decay rate of the second moment.
        eps (float, optional): Term added to the denominator.
        step (int, optional): Number of updates applied so far.
        m (Dict[str, np.ndarray], optional): First moments, per parameter name.
        v (Dict[str, np.ndarray], optional): Second moments, per parameter name.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update, in place, to the given
    parameters, then reset their gradients to zero.

    Args:
        params (Dict[str, Tensor]): Parameters to update, by name. Their
            gradients must be populated.
        state (AdamState): Optimizer state, updated in place.

    Raises:
        ValueError: If a parameter has no gradient.

    Returns:
        The updated state.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"Parameter `{name}` has no gradient, can't apply the Adam update")

    state.step += 1
    c1 = 1 - state.beta1**state.step
    c2 = 1 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
        p.zero_grad()
    return state


def clip_grad_norm(params: Dict[str, Tensor], max_norm: Optional[float]) -> float:
    """Rescale the gradients so their global L2 norm is at most `max_norm`.

    Args:
        params (Dict[str, Tensor]): Parameters with populated gradients.
        max_norm (Optional[float]): Maximum norm. If `None`, gradients are
            left untouched.

    Returns:
        The global norm before clipping.
    """
    grads = [p for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in grads:
            p.grad = p.grad * np.asarray(scale, dtype=p.dtype)
    return norm


class Adam:
    """Adam optimizer bound to a fixed set of named parameters.

    Args:
        params (Dict[str, Tensor]): Parameters to optimize, by name.
        lr (float, optional): Learning rate.
        max_grad_norm (Optional[float], optional): If given, gradients are
            clipped to this global norm before each update.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, max_grad_norm: Optional[float] = None):
        self.params = params
        self.state = AdamState(lr=lr)
        self.max_grad_norm = max_grad_norm

    def zero_grad(self):
        """Reset the gradients of all parameters to zero."""
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> AdamState:
        """Apply one update with the current gradients.

        Returns:
            The updated optimizer state.
        """
        if self.max_grad_norm is not None:
            clip_grad_norm(self.params, self.max_grad_norm)
        return adam_step(self.params, self.state)
