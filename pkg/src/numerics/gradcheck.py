import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .ops import backward, zero_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    """Worst relative error between autograd and central differences.

    The error of one tensor is ``max|analytic - numeric| / max(max|numeric|, max|analytic|, floor)``
    so near-zero gradient entries do not blow up the ratio.
    """

    max_rel_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    denom = max(numeric.abs().max().item(), analytic.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / denom


def _central_difference(
    closure: Callable[[], torch.Tensor], target: torch.Tensor, h: float
) -> torch.Tensor:
    numeric = torch.zeros_like(target)
    flat = target.data.view(-1)
    out = numeric.view(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            plus = closure().item()
            flat[idx] = orig - h
            minus = closure().item()
            flat[idx] = orig
            out[idx] = (plus - minus) / (2 * h)
    return numeric


def _compare(
    closure: Callable[[], torch.Tensor],
    named: Sequence[Tuple[str, torch.Tensor]],
    h: float,
) -> GradCheckResult:
    zero_grad([t for _, t in named])
    backward(closure())
    analytic = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for name, t in named
    }

    per_tensor = {}
    for name, t in named:
        numeric = _central_difference(closure, t, h)
        per_tensor[name] = _relative_error(analytic[name], numeric)

    worst = max(per_tensor.values()) if per_tensor else 0.0
    logger.debug("gradient check: worst=%.3e over %d tensors", worst, len(per_tensor))
    return GradCheckResult(max_rel_error=worst, per_tensor=per_tensor)


def check_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Check d fn / d inputs against central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes to the checked gradient.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    projection: Optional[torch.Tensor] = None

    def closure() -> torch.Tensor:
        nonlocal projection
        out = fn(*leaves)
        if out.numel() == 1:
            return out.reshape(())
        if projection is None:
            projection = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * projection).sum()

    return _compare(closure, [(f"input{i}", x) for i, x in enumerate(leaves)], h)


def check_module_gradients(
    module: nn.Module,
    closure: Callable[[], torch.Tensor],
    h: float = 1e-5,
    only: Optional[Iterable[str]] = None,
) -> GradCheckResult:
    """Check every trainable parameter of ``module`` for the scalar ``closure``."""
    wanted = set(only) if only is not None else None
    named: List[Tuple[str, torch.Tensor]] = [
        (name, p)
        for name, p in module.named_parameters()
        if p.requires_grad and (wanted is None or name in wanted)
    ]
    return _compare(closure, named, h)
