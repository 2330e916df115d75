"""Adam with bias correction, the optimiser used to train the branched CNN."""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ShapeError(f"Adam {name} must be positive")


def adam_step(
    params: Sequence[Tensor],
    grads: Optional[Sequence[Optional[np.ndarray]]],
    state: AdamState,
) -> Tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero so that frozen branches still advance the step counter consistently.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.first_moment[i].shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self):
        adam_step(self.params, None, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
