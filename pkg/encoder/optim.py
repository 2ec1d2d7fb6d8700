"""
Adam with linear warmup and cosine decay.

The moments live in a ``torch.optim.Adam`` bound to the model; the schedule
is applied by setting the group learning rate before every step.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from medsearch import constants
from medsearch.exceptions import ConfigurationError, ShapeMismatchError


logger = logging.getLogger(__name__)


def learning_rate_at(base_lr: float, step: int, warmup_steps: int, total_steps: int) -> float:
    """
    ``base * min(step / warmup, cosine(step))``; cosine decays from 1 at the
    end of warmup to 0 at ``total_steps``.
    """
    warm = step / warmup_steps if warmup_steps > 0 else 1.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    progress = min(1.0, max(0.0, progress))
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr * min(warm, cosine)


@dataclass
class OptimizerState:
    learning_rate: float = constants.DEFAULT_LEARNING_RATE
    epsilon: float = constants.ADAM_EPSILON
    warmup_steps: int = 0
    total_steps: int = 0
    betas: Tuple[float, float] = constants.ADAM_BETAS
    step: int = 0
    optimizer: Optional[torch.optim.Adam] = field(default=None, repr=False)
    names: Dict[int, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ConfigurationError(
                message="Learning rate must be >= 0 and epsilon > 0",
                context={'learning_rate': self.learning_rate, 'epsilon': self.epsilon}
            )
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ConfigurationError(
                message="Step counts must be non-negative",
                context={'warmup_steps': self.warmup_steps, 'total_steps': self.total_steps}
            )

    def bind(self, model: nn.Module) -> None:
        if self.optimizer is not None:
            return
        params = list(model.parameters())
        self.names = {id(p): name for name, p in model.named_parameters()}
        self.optimizer = torch.optim.Adam(
            params, lr=self.learning_rate, betas=self.betas, eps=self.epsilon,
            weight_decay=0.0, foreach=False
        )

    @property
    def current_lr(self) -> float:
        return learning_rate_at(self.learning_rate, self.step, self.warmup_steps, self.total_steps)

    def moments(self, model: nn.Module) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        """Per-parameter (first, second) moments; zeros before the first step."""
        result = {}
        for name, param in model.named_parameters():
            state = self.optimizer.state.get(param, {}) if self.optimizer else {}
            first = state.get('exp_avg', torch.zeros_like(param))
            second = state.get('exp_avg_sq', torch.zeros_like(param))
            result[name] = (first, second)
        return result


def adam_step(model: nn.Module, grads: Dict[str, torch.Tensor], state: OptimizerState) -> nn.Module:
    """
    One scheduled Adam update of ``model`` in place.

    Raises:
        ShapeMismatchError: a gradient is missing or shaped unlike its parameter
    """
    params = dict(model.named_parameters())
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or grad.shape != param.shape:
            raise ShapeMismatchError(
                message=f"Gradient for {name} does not match parameter shape",
                context={
                    'parameter': name,
                    'expected': list(param.shape),
                    'got': None if grad is None else list(grad.shape),
                }
            )
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise ShapeMismatchError(
            message=f"Gradients for unknown parameters: {', '.join(unknown)}",
            context={'unknown': unknown}
        )

    state.bind(model)
    state.step += 1
    lr = state.current_lr
    for group in state.optimizer.param_groups:
        group['lr'] = lr
    for name, param in params.items():
        param.grad = grads[name].detach().to(param.dtype).clone()
    state.optimizer.step()
    model.zero_grad(set_to_none=True)
    return model
