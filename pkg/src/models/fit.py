import logging
import os.path as osp
from dataclasses import dataclass
from typing import Any, Dict, Optional

import lightning as L
from lightning.pytorch.callbacks import ModelCheckpoint
from lightning.pytorch.loggers import CSVLogger, TensorBoardLogger

from callbacks import MetricsStream
from datasets.tasks import TaskDataModule, TaskSpec, build_task_samples, eval_accuracy, write_samples
from nets import ModelConfig
from utils.errors import ConfigError

from .lm import StableMaskLM, TrainConfig

logger = logging.getLogger(__name__)

PRECISION = {"float64": "64-true", "float32": "32-true"}
FIT_SUBDIR = "fit"

# Trainer settings every fit shares, whether it comes from the CLI or from ``train``
TRAINER_DEFAULTS: Dict[str, Any] = {
    "accelerator": "cpu",
    "devices": 1,
    "max_epochs": -1,
    "deterministic": True,
    "check_val_every_n_epoch": None,
    "num_sanity_val_steps": 0,
    "enable_progress_bar": False,
    "enable_model_summary": False,
    "log_every_n_steps": 1,
}


@dataclass
class TrainResult:
    module: StableMaskLM
    log_dir: str
    metrics_path: str
    checkpoint_path: Optional[str]
    eval_accuracy: float

    def summary(self) -> Dict[str, Any]:
        return {
            "log_dir": self.log_dir,
            "metrics": self.metrics_path,
            "checkpoint": self.checkpoint_path,
            "eval_acc": self.eval_accuracy,
        }


def trainer_overrides(model_config: ModelConfig, train_config: TrainConfig) -> Dict[str, Any]:
    """Trainer arguments that follow from the run configs."""
    return {
        "precision": PRECISION[model_config.dtype],
        "max_steps": train_config.total_steps,
        "val_check_interval": train_config.eval_every,
    }


def finish_run(
    trainer: L.Trainer, module: StableMaskLM, task: TaskSpec, log_dir: str, ckpt_dir: Optional[str] = None
) -> TrainResult:
    """Save ``last.ckpt`` and the eval split next to the metrics, then score the eval split."""
    # last.ckpt from the callback only covers the last validation step
    last_path = osp.join(ckpt_dir or osp.join(log_dir, "checkpoints"), "last.ckpt")
    trainer.save_checkpoint(last_path)

    _, evals = build_task_samples(task)
    write_samples(evals, osp.join(log_dir, "eval_samples.jsonl"))
    module.net.eval()
    acc = eval_accuracy(module.net, evals, task=task)
    logger.info("final eval accuracy %.4f", acc)
    return TrainResult(
        module=module,
        log_dir=log_dir,
        metrics_path=osp.join(log_dir, "metrics.jsonl"),
        checkpoint_path=last_path,
        eval_accuracy=acc,
    )


def _make_logger(kind: str, save_dir: str, name: str, version: str):
    if kind == "tensorboard":
        return TensorBoardLogger(save_dir=save_dir, name=name, version=version, sub_dir=FIT_SUBDIR)
    if kind == "csv":
        # CSVLogger has no sub_dir
        return CSVLogger(save_dir=save_dir, name=name, version=osp.join(version, FIT_SUBDIR))
    if kind == "none":
        return False
    raise ConfigError(f"unknown logger {kind!r}, expected tensorboard, csv or none")


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    task: TaskSpec,
    out_dir: str = "logs",
    name: str = "default_name",
    version: str = "version_0",
    echo: bool = False,
    logger_kind: str = "tensorboard",
) -> TrainResult:
    """Fit a model on a task; metrics stream to ``<out>/<name>/<version>/fit/metrics.jsonl``.

    The library twin of ``main.py fit``: same Trainer settings, callbacks and run layout.
    """
    L.seed_everything(train_config.seed, workers=True)
    log_dir = osp.join(out_dir, name, version, FIT_SUBDIR)

    module = StableMaskLM(model_config, train_config, task)
    data = TaskDataModule(task, train_config.batch_size, train_config.num_workers)
    ckpt = ModelCheckpoint(dirpath=osp.join(log_dir, "checkpoints"), save_last=True, save_top_k=0)

    trainer = L.Trainer(
        **TRAINER_DEFAULTS,
        **trainer_overrides(model_config, train_config),
        default_root_dir=log_dir,
        logger=_make_logger(logger_kind, out_dir, name, version),
        callbacks=[MetricsStream(osp.join(log_dir, "metrics.jsonl"), echo), ckpt],
    )
    trainer.fit(module, datamodule=data)
    return finish_run(trainer, module, task, log_dir)
