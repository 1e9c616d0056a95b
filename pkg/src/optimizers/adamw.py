import logging
import math
from typing import Any, Callable, Dict, Iterable, Optional, Sequence, Tuple

import torch
from torch.optim import Optimizer

from utils.errors import NumericalError

logger = logging.getLogger(__name__)


def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    states: Sequence[Dict[str, Any]],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update with decoupled weight decay.

    Each state dict holds ``step``, ``exp_avg`` and ``exp_avg_sq`` and is
    initialised on first use.
    """
    beta1, beta2 = betas
    for idx, (p, g, state) in enumerate(zip(params, grads, states)):
        if p.shape != g.shape:
            raise NumericalError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericalError(
                "non-finite gradient",
                {"param": idx, "nan": int(torch.isnan(g).sum()), "inf": int(torch.isinf(g).sum())},
            )
        if not state:
            state["step"] = 0
            state["exp_avg"] = torch.zeros_like(p)
            state["exp_avg_sq"] = torch.zeros_like(p)

        state["step"] += 1
        t = state["step"]
        exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]

        p.mul_(1 - lr * weight_decay)
        exp_avg.mul_(beta1).add_(g, alpha=1 - beta1)
        exp_avg_sq.mul_(beta2).addcmul_(g, g, value=1 - beta2)

        bias1 = 1 - beta1**t
        bias2 = 1 - beta2**t
        denom = (exp_avg_sq.sqrt() / math.sqrt(bias2)).add_(eps)
        p.addcdiv_(exp_avg, denom, value=-lr / bias1)


class AdamW(Optimizer):
    def __init__(
        self,
        params: Iterable,
        lr: float = 3e-4,
        betas: Tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        if lr < 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"Invalid betas: {betas}")
        super().__init__(params, {"lr": lr, "betas": betas, "eps": eps, "weight_decay": weight_decay})

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            adamw_step(
                params,
                [p.grad for p in params],
                [self.state[p] for p in params],
                lr=group["lr"],
                betas=group["betas"],
                eps=group["eps"],
                weight_decay=group["weight_decay"],
            )
        return loss

