import math
import warnings
from typing import List

from torch.optim import Optimizer
from torch.optim.lr_scheduler import LRScheduler

from utils.errors import ConfigError

DECAYS = ("linear", "cosine")


def lr_at(
    step: int,
    peak_lr: float,
    warmup_steps: int,
    total_steps: int,
    begin_lr: float = 0.0,
    decay: str = "cosine",
) -> float:
    """Linear warmup from ``begin_lr`` to ``peak_lr``, then linear or cosine decay to 0."""
    if decay not in DECAYS:
        raise ConfigError(f"unknown decay {decay!r}, expected one of {DECAYS}")
    if step < warmup_steps:
        return begin_lr + (peak_lr - begin_lr) * step / warmup_steps

    progress = min(1.0, (step - warmup_steps) / max(1, total_steps - warmup_steps))
    if decay == "linear":
        return peak_lr * (1.0 - progress)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))


class WarmupDecayLR(LRScheduler):
    """Per-step schedule following ``lr_at``; every param group gets the same rate."""

    def __init__(
        self,
        optimizer: Optimizer,
        warmup_steps: int,
        total_steps: int,
        begin_lr: float = 0.0,
        decay: str = "cosine",
        last_epoch: int = -1,
    ) -> None:
        if warmup_steps > total_steps:
            raise ConfigError(f"warmup_steps {warmup_steps} > total_steps {total_steps}")
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.begin_lr = begin_lr
        self.decay = decay

        super().__init__(optimizer, last_epoch)

    def get_lr(self) -> List[float]:
        if not self._get_lr_called_within_step:
            warnings.warn(
                f"{type(self).__name__}.get_lr() called outside step(); read the current rate with get_last_lr()",
                UserWarning,
            )
        return [
            lr_at(self.last_epoch, base_lr, self.warmup_steps, self.total_steps, self.begin_lr, self.decay)
            for base_lr in self.base_lrs
        ]
