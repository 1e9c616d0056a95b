import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List

import lightning as L
import torch
from torchmetrics import MeanMetric
from torchmetrics.classification import MulticlassAccuracy

from datasets.tasks import TaskSpec, eval_mode_for
from nets import IGNORE_INDEX, DecoderLM, ModelConfig, task_loss
from optimizers import AdamW, WarmupDecayLR, lr_at
from utils.errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    begin_lr: float = 0.0
    warmup_steps: int = 100
    total_steps: int = 2000
    decay: str = "cosine"
    betas: List[float] = field(default_factory=lambda: [0.9, 0.98])
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 200
    num_workers: int = 0
    # masks used for the training forward; only "train" is trainable
    mask_mode: str = "train"

    def validate(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        for name in ("peak_lr", "eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.begin_lr < 0 or self.weight_decay < 0:
            raise ConfigError("begin_lr and weight_decay must be >= 0")
        if self.decay not in ("linear", "cosine"):
            raise ConfigError(f"unknown decay {self.decay!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.mask_mode != "train":
            raise ConfigError(f"cannot train with {self.mask_mode!r} masks, only \"train\"")

    def lr_at(self, step: int) -> float:
        return lr_at(step, self.peak_lr, self.warmup_steps, self.total_steps, self.begin_lr, self.decay)


class StableMaskLM(L.LightningModule):
    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, task: TaskSpec) -> None:
        super().__init__()
        model_config.validate()
        train_config.validate()
        task.validate()
        if model_config.vocab_size < task.vocab_size():
            raise ConfigError(
                f"model vocab {model_config.vocab_size} is smaller than the {task.kind} vocab {task.vocab_size()}"
            )
        self.save_hyperparameters(
            {"model": asdict(model_config), "train": asdict(train_config), "task": asdict(task)}
        )
        self.model_config = model_config
        self.train_config = train_config
        self.task = task

        self.net = DecoderLM(model_config)
        self.val_acc = MulticlassAccuracy(
            num_classes=model_config.vocab_size, average="micro", ignore_index=IGNORE_INDEX
        )
        self.val_loss = MeanMetric()
        self.last_grad_norm = 0.0
        self.last_eval: Dict[str, float] = {}

    def forward(self, tokens, mode="train"):
        return self.net(tokens, mode).logits

    def training_step(self, batch, batch_idx):
        tokens, targets, _ = batch
        loss = task_loss(self(tokens), targets)
        if not torch.isfinite(loss):
            raise NumericalError("non-finite training loss", {"step": self.global_step, "loss": loss.item()})
        self.log("train/loss", loss.item(), batch_size=tokens.shape[0])
        return loss

    def on_before_optimizer_step(self, optimizer) -> None:
        try:
            norm = torch.nn.utils.clip_grad_norm_(
                self.parameters(), self.train_config.clip_norm, error_if_nonfinite=True
            )
        except RuntimeError as e:
            bad = sum(1 for p in self.parameters() if p.grad is not None and not torch.isfinite(p.grad).all())
            raise NumericalError("non-finite gradient norm", {"step": self.global_step, "params": bad}) from e
        self.last_grad_norm = norm.item()
        self.log("train/grad_norm", self.last_grad_norm)

    def validation_step(self, batch, batch_idx):
        tokens, targets, scored = batch
        logits = self(tokens, eval_mode_for(self.task))
        loss = task_loss(logits, targets)
        self.val_acc.update(logits.argmax(-1).flatten(), targets.masked_fill(~scored, IGNORE_INDEX).flatten())
        self.val_loss.update(loss, weight=int((targets != IGNORE_INDEX).sum()))

    def on_validation_epoch_end(self) -> None:
        loss = self.val_loss.compute().item()
        self.last_eval = {
            "eval_loss": loss,
            "eval_ppl": math.exp(min(loss, 700.0)),
            "eval_acc": self.val_acc.compute().item(),
        }
        self.log_dict({"val/loss": loss, "val/ppl": self.last_eval["eval_ppl"], "val/acc": self.last_eval["eval_acc"]})
        self.val_loss.reset()
        self.val_acc.reset()

    def configure_optimizers(self):
        cfg = self.train_config
        optimizer = AdamW(
            self.parameters(), lr=cfg.peak_lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay
        )
        scheduler = WarmupDecayLR(optimizer, cfg.warmup_steps, cfg.total_steps, cfg.begin_lr, cfg.decay)
        return {"optimizer": optimizer, "lr_scheduler": {"scheduler": scheduler, "interval": "step"}}

    def on_save_checkpoint(self, checkpoint: Dict[str, Any]) -> None:
        checkpoint["stablemask_format"] = CHECKPOINT_FORMAT
        checkpoint["seed"] = self.train_config.seed
        spec = self.net.mask_spec
        checkpoint["mask_spec"] = spec.to_dict() if spec is not None else None
