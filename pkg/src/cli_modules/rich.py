import json
import logging
import os
import os.path as osp
from typing import Any, Dict, Optional, Set, Tuple

import lightning as L
from jsonargparse import Namespace
from lightning.pytorch.callbacks import ModelCheckpoint
from lightning.pytorch.cli import LightningArgumentParser, LightningCLI
from omegaconf import OmegaConf

from callbacks import MetricsStream
from datasets import TaskSpec
from models import FIT_SUBDIR, TRAINER_DEFAULTS, TrainConfig, TrainResult, finish_run, trainer_overrides
from nets import ModelConfig
from utils.config import structured
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

MODEL_CLASS = "models.StableMaskLM"

# shortcut flag -> keys under model.init_args it sets
SHORTCUTS = {
    "mask": ("model_config.mask.kind",),
    "pe": ("model_config.pe.kind",),
    "gamma": ("model_config.mask.gamma",),
    "seed": ("train_config.seed", "task.seed"),
}


def increment_version(save_dir: str, name: str) -> str:
    i = 0
    while osp.exists(osp.join(save_dir, name, f"version_{i}")):
        i += 1
    return f"version_{i}"


class StableMaskCLI(LightningCLI):
    """``fit`` for ``models.StableMaskLM`` on ``datasets.TaskDataModule``.

    Runs land in ``<out>/<name>/<version>/fit``; fitting an existing run again
    writes ``fit1``, ``fit2``, ... and resumes from the previous ``last.ckpt``.
    The model's configs decide the vocabulary, the data module and the step
    budget of the Trainer, so they are copied over before instantiation.
    """

    result: Optional[TrainResult] = None

    @staticmethod
    def subcommands() -> Dict[str, Set[str]]:
        return {"fit": LightningCLI.subcommands()["fit"]}

    def add_arguments_to_parser(self, parser: LightningArgumentParser) -> None:
        parser.add_lightning_class_args(ModelCheckpoint, "model_ckpt")
        parser.set_defaults({"model_ckpt.save_last": True, "model_ckpt.save_top_k": 0})

        parser.add_lightning_class_args(MetricsStream, "metrics")

        parser.set_defaults({f"trainer.{k}": v for k, v in TRAINER_DEFAULTS.items()})
        parser.set_defaults(
            {
                "trainer.logger": {
                    "class_path": "lightning.pytorch.loggers.TensorBoardLogger",
                    "init_args": {"save_dir": os.environ.get("STABLEMASK_OUT", "logs")},
                },
            }
        )

        # `-n` / `-v` pick the run directory <out>/<name>/<version>/fit
        parser.add_argument("--name", "-n", dest="name", action="store", default="default_name")
        parser.add_argument("--version", "-v", dest="version", action="store", default="version_0")
        # first unused version_<i>; disables resuming
        parser.add_argument("--increment_version", action="store_true", default=False)
        parser.add_argument("--out", type=Optional[str], default=None, help="output root, defaults to the logger save_dir")
        parser.add_argument("--mask", type=Optional[str], default=None, help="vanilla or stablemask")
        parser.add_argument("--pe", type=Optional[str], default=None)
        parser.add_argument("--gamma", type=Optional[float], default=None)
        parser.add_argument("--seed", type=Optional[int], default=None, help="sets the train and task seeds")
        parser.add_argument("--json", dest="json", action="store_true", default=False)

    def _config(self) -> Namespace:
        if "subcommand" not in self.config:
            return self.config
        return self.config[self.config["subcommand"]]

    def _save_dir(self, cfg: Namespace) -> str:
        if cfg["out"]:
            return cfg["out"]
        logger_cfg = cfg["trainer.logger"]
        if isinstance(logger_cfg, Namespace) and logger_cfg.get("init_args.save_dir"):
            return logger_cfg["init_args.save_dir"]
        return os.environ.get("STABLEMASK_OUT", "logs")

    def _check_resume(self, save_dir: str, name: str, version: str) -> Tuple[str, Optional[str]]:
        """Sub directory for this fit and the checkpoint to resume from, if any."""
        if not osp.exists(osp.join(save_dir, name, version, FIT_SUBDIR)):
            return FIT_SUBDIR, None

        i = 1
        while osp.exists(osp.join(save_dir, name, version, f"{FIT_SUBDIR}{i}")):
            i += 1
        prev_log_dir = osp.join(save_dir, name, version, FIT_SUBDIR + (str(i - 1) if i - 1 else ""))
        sub_dir = f"{FIT_SUBDIR}{i}"

        prev_ckpt_dir = osp.join(prev_log_dir, "checkpoints")
        prev_config = osp.join(prev_log_dir, "config.yaml")
        if osp.exists(prev_config):
            prev_ckpt_dir = OmegaConf.select(OmegaConf.load(prev_config), "model_ckpt.dirpath") or prev_ckpt_dir
        last = osp.join(prev_ckpt_dir, "last.ckpt")
        if not osp.exists(last):
            logger.warning("%s has no last.ckpt, starting %s from scratch", prev_log_dir, sub_dir)
            return sub_dir, None
        logger.info("resuming from %s", last)
        return sub_dir, last

    def _apply_shortcuts(self, cfg: Namespace, init_args: Namespace) -> None:
        for flag, keys in SHORTCUTS.items():
            value = cfg.get(flag)
            if value is None:
                continue
            for key in keys:
                init_args[key] = value

    def _link_model_and_data(self, cfg: Namespace, init_args: Namespace) -> TrainConfig:
        task = structured(TaskSpec, init_args["task"].as_dict())
        init_args["model_config.vocab_size"] = task.vocab_size()
        if task.at_tokens and task.position_task and init_args.get("model_config.at_token") is None:
            init_args["model_config.at_token"] = task.vocab.at
        model_config = structured(ModelConfig, init_args["model_config"].as_dict())
        train_config = structured(TrainConfig, init_args["train_config"].as_dict())
        for config in (model_config, train_config, task):
            config.validate()

        cfg["data.init_args.task"] = init_args["task"].clone()
        cfg["data.init_args.batch_size"] = train_config.batch_size
        cfg["data.init_args.num_workers"] = train_config.num_workers
        for key, value in trainer_overrides(model_config, train_config).items():
            cfg[f"trainer.{key}"] = value
        return train_config

    def before_instantiate_classes(self) -> None:
        cfg = self._config()
        if cfg["model.class_path"] != MODEL_CLASS:
            raise ConfigError(f"model.class_path must be {MODEL_CLASS}, got {cfg['model.class_path']}")
        init_args = cfg["model.init_args"]
        self._apply_shortcuts(cfg, init_args)
        train_config = self._link_model_and_data(cfg, init_args)

        save_dir = self._save_dir(cfg)
        name = cfg["name"]
        version = cfg["version"] if not cfg["increment_version"] else increment_version(save_dir, name)
        sub_dir, resume_from = FIT_SUBDIR, None
        if "subcommand" in self.config and not cfg["increment_version"]:
            sub_dir, resume_from = self._check_resume(save_dir, name, version)
        if resume_from is not None:
            cfg["ckpt_path"] = resume_from
        self.log_dir = osp.join(save_dir, name, version, sub_dir)

        logger_cfg = cfg["trainer.logger"]
        if isinstance(logger_cfg, Namespace) and "class_path" in logger_cfg:
            logger_cfg["init_args.save_dir"] = save_dir
            logger_cfg["init_args.name"] = name
            if logger_cfg["class_path"].endswith("TensorBoardLogger"):
                logger_cfg["init_args.version"] = version
                logger_cfg["init_args.sub_dir"] = sub_dir
            else:
                logger_cfg["init_args.version"] = osp.join(version, sub_dir)
        cfg["trainer.default_root_dir"] = self.log_dir

        # ckpt_root_dirpath usually set with gs:// or s3://
        ckpt_root_dirpath = cfg["model_ckpt.dirpath"]
        if ckpt_root_dirpath:
            self.ckpt_dir = osp.join(ckpt_root_dirpath, self.log_dir, "checkpoints")
        else:
            self.ckpt_dir = osp.join(self.log_dir, "checkpoints")
        cfg["model_ckpt.dirpath"] = self.ckpt_dir
        cfg["metrics.path"] = osp.join(self.log_dir, "metrics.jsonl")

        cfg["seed_everything"] = train_config.seed
        L.seed_everything(train_config.seed, workers=True)
        logger.info("fit run directory %s", self.log_dir)

    def after_fit(self) -> None:
        self.result = finish_run(self.trainer, self.model, self.model.task, self.log_dir, self.ckpt_dir)
        summary: Dict[str, Any] = self.result.summary()
        if self._config()["json"]:
            print(json.dumps(summary))
        else:
            print("\n".join(f"{k}: {v}" for k, v in summary.items()))
