"""
Central finite-difference gradient checking in 64-bit.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch
from torch import nn

from medsearch import constants

from .services import backward


logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_parameter: str
    entries_checked: int

    def passed(self, tolerance: float = constants.GRADCHECK_TOLERANCE) -> bool:
        return self.max_relative_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = constants.GRADCHECK_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def max_relative_error(model: nn.Module, loss_fn: Callable[[], torch.Tensor],
                       step: float = constants.GRADCHECK_STEP,
                       max_entries_per_tensor: Optional[int] = None) -> GradCheckResult:
    """
    Compare autograd gradients of ``loss_fn()`` with central differences
    over every parameter entry. ``model`` must already be in float64.

    ``max_entries_per_tensor`` limits the entries perturbed per tensor
    (the first ones in flat order); None checks all of them.
    """
    analytic: Dict[str, torch.Tensor] = backward(model, loss_fn())
    worst, worst_name, checked = 0.0, '', 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            grad = analytic[name].view(-1)
            limit = flat.numel() if max_entries_per_tensor is None else min(flat.numel(), max_entries_per_tensor)
            for index in range(limit):
                original = flat[index].item()
                flat[index] = original + step
                plus = loss_fn().item()
                flat[index] = original - step
                minus = loss_fn().item()
                flat[index] = original
                numeric = (plus - minus) / (2 * step)
                error = relative_error(grad[index].item(), numeric)
                checked += 1
                if error > worst:
                    worst, worst_name = error, f"{name}[{index}]"
    logger.info(f"Gradient check: {checked} entries, max relative error {worst:.3e} at {worst_name or '-'}")
    return GradCheckResult(worst, worst_name, checked)
