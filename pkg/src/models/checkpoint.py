import logging
import os
import os.path as osp
import pickle
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import torch

from datasets.tasks import TaskSpec
from nets import DecoderLM, ModelConfig
from utils import structured
from utils.errors import CheckpointFormatError

from .lm import CHECKPOINT_FORMAT, TrainConfig

logger = logging.getLogger(__name__)

_PREFIX = "net."


@dataclass
class LoadedCheckpoint:
    model: DecoderLM
    model_config: ModelConfig
    train_config: TrainConfig
    task: TaskSpec
    seed: int
    global_step: int


def save_checkpoint(
    path: str,
    model: DecoderLM,
    train_config: TrainConfig,
    task: TaskSpec,
    global_step: int = 0,
    optimizer_states: Optional[list] = None,
) -> None:
    """Write a bare model in the same layout Lightning uses for a trained module."""
    spec = model.mask_spec
    checkpoint = {
        "stablemask_format": CHECKPOINT_FORMAT,
        "global_step": global_step,
        "seed": train_config.seed,
        "state_dict": {_PREFIX + k: v for k, v in model.state_dict().items()},
        "hyper_parameters": {
            "model": asdict(model.config),
            "train": asdict(train_config),
            "task": asdict(task),
        },
        "mask_spec": spec.to_dict() if spec is not None else None,
        "optimizer_states": optimizer_states or [],
    }
    os.makedirs(osp.dirname(path) or ".", exist_ok=True)
    torch.save(checkpoint, path)


def load_checkpoint(path: str) -> LoadedCheckpoint:
    try:
        checkpoint: Dict[str, Any] = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(checkpoint, dict):
        raise CheckpointFormatError(f"{path} is not a checkpoint dictionary")

    version = checkpoint.get("stablemask_format")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint format {version!r}")
    try:
        hparams = checkpoint["hyper_parameters"]
        model_config = structured(ModelConfig, hparams["model"])
        train_config = structured(TrainConfig, hparams["train"])
        task = structured(TaskSpec, hparams["task"])
        state = checkpoint["state_dict"]
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing {e}") from e

    model = DecoderLM(model_config)
    own = {k[len(_PREFIX) :]: v for k, v in state.items() if k.startswith(_PREFIX)}
    model.load_state_dict(own)
    model.eval()
    logger.info("loaded %s (step %d)", path, checkpoint.get("global_step", 0))
    return LoadedCheckpoint(
        model, model_config, train_config, task, int(checkpoint.get("seed", 0)), int(checkpoint.get("global_step", 0))
    )
